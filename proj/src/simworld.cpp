#include "cdp/simworld.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace cdp {

TaskKind parse_task(const std::string& name) {
  if (name == "grind") return TaskKind::Grind;
  if (name == "erase") return TaskKind::Erase;
  if (name == "insert_round") return TaskKind::InsertRound;
  if (name == "insert_cuboid") return TaskKind::InsertCuboid;
  throw UnknownTask("unknown task '" + name + "' (expected grind, erase, insert_round or insert_cuboid)");
}

std::string to_string(TaskKind task) {
  switch (task) {
    case TaskKind::Grind: return "grind";
    case TaskKind::Erase: return "erase";
    case TaskKind::InsertRound: return "insert_round";
    case TaskKind::InsertCuboid: return "insert_cuboid";
  }
  return "grind";
}

int arm_count(TaskKind task) { return is_insertion(task) ? 2 : 1; }
bool is_insertion(TaskKind task) { return task == TaskKind::InsertRound || task == TaskKind::InsertCuboid; }

void SceneConfig::validate() const {
  auto fail = [](const std::string& m) { throw InvalidConfig("scene: " + m); };
  if (!(control_rate > 0) || !(substep > 0)) fail("control_rate and substep must be > 0");
  if (!(contact_stiffness > 0) || contact_damping < 0 || friction < 0 || !(friction_velocity > 0)) {
    fail("contact parameters out of range");
  }
  if (grid_size < 1 || !(workspace > 0)) fail("grid_size and workspace must be positive");
  if (mark_row_begin < 0 || mark_row_end >= grid_size || mark_col_begin < 0 || mark_col_end >= grid_size ||
      mark_row_begin > mark_row_end || mark_col_begin > mark_col_end) {
    fail("mark band outside the grid");
  }
  if (!(clearance > 0) || chamfer < 0 || !(hole_depth > target_depth) || !(target_depth > 0)) {
    fail("insertion geometry out of range");
  }
}

Eigen::Vector2d cell_center(int row, int col, const SceneConfig& scene) {
  const double cell = scene.workspace / scene.grid_size;
  return {-scene.workspace / 2 + (col + 0.5) * cell, scene.workspace / 2 - (row + 0.5) * cell};
}

WorldState initial_state(TaskKind task, const SceneConfig& scene, std::uint64_t seed) {
  scene.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> jitter(-0.005, 0.005);
  WorldState s;
  s.task = task;
  s.arms.resize(static_cast<std::size_t>(arm_count(task)));
  switch (task) {
    case TaskKind::Grind:
      s.arms[0].pose.position = Vector3d(jitter(rng), jitter(rng), 0.06);
      break;
    case TaskKind::Erase: {
      s.arms[0].pose.position = Vector3d(0.10 + jitter(rng), jitter(rng), 0.05);
      s.erase.marks = Eigen::MatrixXd::Zero(scene.grid_size, scene.grid_size);
      std::uniform_real_distribution<double> intensity(scene.mark_min, scene.mark_max);
      for (int r = scene.mark_row_begin; r <= scene.mark_row_end; ++r) {
        for (int c = scene.mark_col_begin; c <= scene.mark_col_end; ++c) s.erase.marks(r, c) = intensity(rng);
      }
      s.erase.initial = s.erase.marks;
      break;
    }
    case TaskKind::InsertRound:
    case TaskKind::InsertCuboid: {
      std::uniform_real_distribution<double> hole(-scene.hole_randomization, scene.hole_randomization);
      s.arms[0].pose.position = Vector3d(-0.06 + jitter(rng), 0.04 + jitter(rng), 0.10);
      s.arms[1].pose.position = Vector3d(hole(rng), hole(rng), 0.0);
      break;
    }
  }
  return s;
}

namespace {

struct Drive {
  bool impedance = false;
  Vector6d held = Vector6d::Zero();
  Posed target;
  Vector6d k = Vector6d::Zero();
  Vector6d d = Vector6d::Zero();
  double max_force = std::numeric_limits<double>::infinity();
  double max_torque = std::numeric_limits<double>::infinity();
};

struct Contact {
  bool active = false;
  bool floor = false;  ///< contact with the working surface (drives task updates)
  double normal_force = 0.0;
  Vector3d normal = Vector3d::UnitZ();
  Vector3d point = Vector3d::Zero();
};

Vector3d tool_tip(const WorldState& s, const SceneConfig& scene, int arm) {
  const auto& b = s.arms[static_cast<std::size_t>(arm)];
  if (is_insertion(s.task) && arm == 0) return b.pose.position + b.pose.rotation * Vector3d(0, 0, -scene.peg_length);
  return b.pose.position;
}

Contact penalty(double pen, const Vector3d& normal, const Vector3d& point, const Vector3d& rel_velocity,
                const SceneConfig& scene) {
  Contact c;
  if (pen <= 0) return c;
  const double rate = -rel_velocity.dot(normal);
  c.normal_force = std::max(0.0, scene.contact_stiffness * pen + scene.contact_damping * rate);
  c.active = c.normal_force > 0;
  c.normal = normal;
  c.point = point;
  return c;
}

struct Lateral {
  double offset = 0.0;
  Vector3d direction = Vector3d::Zero();
};

Lateral lateral_of(const Vector3d& q, TaskKind task) {
  Lateral l;
  if (task == TaskKind::InsertCuboid) {
    const int axis = std::abs(q.x()) >= std::abs(q.y()) ? 0 : 1;
    l.offset = std::max(std::abs(q.x()), std::abs(q.y()));
    if (l.offset > 0) l.direction(axis) = std::copysign(1.0, q(axis));
  } else {
    l.offset = std::hypot(q.x(), q.y());
    if (l.offset > 0) l.direction = Vector3d(q.x(), q.y(), 0) / l.offset;
  }
  return l;
}

Contact arm_contact(const WorldState& s, const SceneConfig& scene, int arm) {
  const auto& b = s.arms[static_cast<std::size_t>(arm)];
  const Vector3d tip = tool_tip(s, scene, arm);
  switch (s.task) {
    case TaskKind::Grind: {
      const double r = std::hypot(tip.x(), tip.y());
      if (r > scene.mortar_radius && tip.z() < scene.mortar_wall_height) {
        const Vector3d n = -Vector3d(tip.x(), tip.y(), 0) / r;
        return penalty(r - scene.mortar_radius, n, tip, b.linear_velocity, scene);
      }
      Contact c = penalty(-tip.z(), Vector3d::UnitZ(), tip, b.linear_velocity, scene);
      c.floor = c.active;
      return c;
    }
    case TaskKind::Erase: {
      Contact c = penalty(-tip.z(), Vector3d::UnitZ(), tip, b.linear_velocity, scene);
      c.floor = c.active;
      return c;
    }
    case TaskKind::InsertRound:
    case TaskKind::InsertCuboid: {
      if (arm != 0 || !s.insert.attached) return {};
      const auto& hole = s.arms[1];
      const Vector3d q = hole.pose.rotation.transpose() * (tip - hole.pose.position);
      const Vector3d rel_v = b.linear_velocity - hole.linear_velocity;
      if (q.z() >= 0) return {};
      if (std::abs(q.x()) > scene.block_half_width || std::abs(q.y()) > scene.block_half_width) return {};
      const Lateral lat = lateral_of(q, s.task);
      const double c = scene.clearance, ch = scene.chamfer;
      Vector3d n_local;
      double pen = 0;
      if (lat.offset >= c + ch) {
        pen = -q.z();
        n_local = Vector3d::UnitZ();
      } else if (lat.offset > c && q.z() >= -ch) {
        // 45 degree chamfer: surface height rises from -ch at the bore to 0 at the rim.
        const double surface = lat.offset - (c + ch);
        pen = (surface - q.z()) / std::sqrt(2.0);
        n_local = (Vector3d::UnitZ() - lat.direction) / std::sqrt(2.0);
      } else if (lat.offset > c) {
        pen = lat.offset - c;
        n_local = -lat.direction;
      } else {
        pen = -scene.hole_depth - q.z();
        n_local = Vector3d::UnitZ();
      }
      return penalty(pen, hole.pose.rotation * n_local, tip, rel_v, scene);
    }
  }
  return {};
}

/// Velocity update of one body for one substep. Returns the impedance wrench
/// and the contact wrench actually applied.
struct BodyUpdate {
  Vector6d drive_wrench = Vector6d::Zero();
  Vector6d contact_wrench = Vector6d::Zero();
  double tangential_speed = 0.0;
};

BodyUpdate integrate_body(BodyState& b, const Drive& drive, const Contact& contact, const Vector3d& frame_velocity,
                          const Vector6d& external, double h, const SceneConfig& scene, const ControllerConfig& ctl) {
  BodyUpdate u;
  const double m = ctl.mass;
  const double inertia = ctl.inertia;

  // Translation: implicit impedance + implicit smoothed friction + drag.
  Matrix3d damping = scene.linear_drag * Matrix3d::Identity();
  Vector3d f_ext = external.head<3>();
  Matrix3d tangent = Matrix3d::Zero();
  double friction_coeff = 0.0;
  if (contact.active) {
    f_ext += contact.normal_force * contact.normal;
    tangent = Matrix3d::Identity() - contact.normal * contact.normal.transpose();
    const Vector3d vt = tangent * (b.linear_velocity - frame_velocity);
    friction_coeff = scene.friction * contact.normal_force /
                     std::sqrt(vt.squaredNorm() + scene.friction_velocity * scene.friction_velocity);
    damping += friction_coeff * tangent;
    f_ext += friction_coeff * tangent * frame_velocity;
  }
  Vector3d k = Vector3d::Zero(), d = Vector3d::Zero(), e = Vector3d::Zero();
  double sat = std::numeric_limits<double>::infinity();
  if (drive.impedance) {
    k = drive.k.head<3>();
    d = drive.d.head<3>();
    e = drive.target.position - b.pose.position;
    sat = drive.max_force;
  } else {
    f_ext += drive.held.head<3>();
  }
  const auto lin = implicit_impedance_axes(b.linear_velocity, e, k, d, m, h, f_ext, damping, sat);
  const Vector3d friction = -friction_coeff * tangent * (lin.velocity - frame_velocity);
  const Vector3d contact_force = contact.active ? Vector3d(contact.normal_force * contact.normal + friction)
                                                : Vector3d::Zero();
  u.tangential_speed = contact.active ? (tangent * (lin.velocity - frame_velocity)).norm() : 0.0;

  // Rotation.
  Vector3d torque_ext = external.tail<3>();
  Vector3d contact_torque = Vector3d::Zero();
  if (contact.active) contact_torque = (contact.point - b.pose.position).cross(contact_force);
  torque_ext += contact_torque;
  Vector3d kr = Vector3d::Zero(), dr = Vector3d::Zero(), er = Vector3d::Zero();
  double sat_r = std::numeric_limits<double>::infinity();
  if (drive.impedance) {
    kr = drive.k.tail<3>();
    dr = drive.d.tail<3>();
    er = rotation_log<double>(drive.target.rotation * b.pose.rotation.transpose());
    sat_r = drive.max_torque;
  } else {
    torque_ext += drive.held.tail<3>();
  }
  const auto ang = implicit_impedance_axes(b.angular_velocity, er, kr, dr, inertia, h, torque_ext,
                                           scene.angular_drag * Matrix3d::Identity(), sat_r);

  b.linear_velocity = lin.velocity;
  b.angular_velocity = ang.velocity;
  b.pose.position += h * b.linear_velocity;
  b.pose.rotation = rotation_exp<double>(h * b.angular_velocity) * b.pose.rotation;

  if (drive.impedance) {
    u.drive_wrench << lin.wrench, ang.wrench;
  } else {
    u.drive_wrench = drive.held;
  }
  u.contact_wrench << contact_force, contact_torque;
  return u;
}

void update_tasks(WorldState& s, const SceneConfig& scene, const Contact& contact, double tangential_speed,
                  double h) {
  if (!contact.floor) return;
  const double drive = std::max(0.0, contact.normal_force - scene.min_force);
  if (s.task == TaskKind::Grind) {
    const double total = s.grind.coarse + s.grind.fine;
    if (total <= 0) return;
    double delta = scene.grind_rate * drive * tangential_speed * (s.grind.coarse / total) * h;
    delta = std::min(delta, s.grind.coarse);
    s.grind.fine += delta;
    s.grind.coarse = total - s.grind.fine;
  } else if (s.task == TaskKind::Erase) {
    if (contact.normal_force > scene.damage_force) s.erase.damaged = true;
    const double loss = scene.erase_rate * drive * tangential_speed * h;
    if (loss <= 0) return;
    const double half = scene.eraser_size / 2;
    const Vector3d tip = contact.point;
    for (int r = 0; r < s.erase.marks.rows(); ++r) {
      for (int c = 0; c < s.erase.marks.cols(); ++c) {
        const auto center = cell_center(r, c, scene);
        if (std::abs(center.x() - tip.x()) <= half && std::abs(center.y() - tip.y()) <= half) {
          s.erase.marks(r, c) = std::max(0.0, s.erase.marks(r, c) - loss);
        }
      }
    }
  }
}

void check_divergence(const WorldState& s, const SceneConfig& scene) {
  for (std::size_t i = 0; i < s.arms.size(); ++i) {
    const auto& b = s.arms[i];
    const bool finite = b.pose.position.allFinite() && b.linear_velocity.allFinite() && b.angular_velocity.allFinite();
    if (!finite || b.linear_velocity.norm() > scene.max_speed || b.angular_velocity.norm() > 100 * scene.max_speed) {
      throw Diverged("arm " + std::to_string(i) + " diverged at t=" + std::to_string(s.time) + " s");
    }
  }
}

void advance(WorldState& s, std::span<const Drive> drives, double dt, const SceneConfig& scene,
             const ControllerConfig& ctl) {
  if (drives.size() != s.arms.size()) {
    throw ShapeMismatch("step: " + std::to_string(drives.size()) + " commands for " + std::to_string(s.arms.size()) +
                        " arms");
  }
  const int n = std::max(1, static_cast<int>(std::ceil(dt / scene.substep - 1e-9)));
  const double h = dt / n;
  for (int i = 0; i < n; ++i) {
    const Contact c0 = arm_contact(s, scene, 0);
    const Vector3d frame_v = s.arms.size() > 1 ? s.arms[1].linear_velocity : Vector3d::Zero();
    const BodyUpdate u0 = integrate_body(s.arms[0], drives[0], c0, is_insertion(s.task) ? frame_v : Vector3d::Zero(),
                                         Vector6d::Zero(), h, scene, ctl);
    s.arms[0].contact_wrench = u0.contact_wrench;
    s.arms[0].command_wrench = u0.drive_wrench;
    s.arms[0].normal_force = c0.normal_force;
    if (s.arms.size() > 1) {
      // The hole block takes the reaction at the peg tip.
      Vector6d reaction = Vector6d::Zero();
      if (c0.active) {
        const Vector3d f = -u0.contact_wrench.head<3>();
        reaction << f, (c0.point - s.arms[1].pose.position).cross(f);
      }
      const BodyUpdate u1 = integrate_body(s.arms[1], drives[1], Contact{}, Vector3d::Zero(), reaction, h, scene, ctl);
      s.arms[1].contact_wrench = reaction;
      s.arms[1].command_wrench = u1.drive_wrench;
      s.arms[1].normal_force = c0.normal_force;
    }
    update_tasks(s, scene, c0, u0.tangential_speed, h);
    s.time += h;
    check_divergence(s, scene);
  }
  for (auto& b : s.arms) {
    // Keep the rotation on SO(3) against drift.
    Vector6d cols;
    cols << b.pose.rotation.col(0), b.pose.rotation.col(1);
    b.pose.rotation = sixd_to_rotmat<double>(cols);
  }
  ++s.tick;
}

}  // namespace

void step(WorldState& state, std::span<const Wrenchd> wrenches, double dt, const SceneConfig& scene) {
  std::vector<Drive> drives(wrenches.size());
  for (std::size_t i = 0; i < wrenches.size(); ++i) drives[i].held = wrenches[i].stacked();
  advance(state, drives, dt, scene, ControllerConfig{});
}

void step_controlled(WorldState& state, std::span<const ArmCommand> commands, const SceneConfig& scene,
                     const ControllerConfig& controller) {
  std::vector<Drive> drives(commands.size());
  for (std::size_t i = 0; i < commands.size(); ++i) {
    auto& d = drives[i];
    d.impedance = true;
    d.target = commands[i].target;
    d.k = clamp_stiffness(commands[i].stiffness, controller);
    d.d = damping_gains(d.k, controller);
    d.max_force = controller.max_force;
    d.max_torque = controller.max_torque;
  }
  advance(state, drives, scene.control_dt(), scene, controller);
}

Vector3d peg_tip_in_hole(const WorldState& state, const SceneConfig& scene) {
  if (!is_insertion(state.task)) throw TaskMismatch("peg_tip_in_hole: not an insertion task");
  if (!state.insert.attached) return state.insert.released_tip;
  const auto& hole = state.arms[1];
  return hole.pose.rotation.transpose() * (tool_tip(state, scene, 0) - hole.pose.position);
}

double insert_lateral_offset(const WorldState& state, const SceneConfig& scene) {
  return lateral_of(peg_tip_in_hole(state, scene), state.task).offset;
}

bool insert_success(const WorldState& state, const SceneConfig& scene) {
  if (!is_insertion(state.task) || state.insert.attached) return false;
  const Vector3d q = state.insert.released_tip;
  return -q.z() >= scene.target_depth && lateral_of(q, state.task).offset <= scene.clearance + scene.contact_slop;
}

int default_episode_ticks(TaskKind task) {
  switch (task) {
    case TaskKind::Grind: return 4000;
    case TaskKind::Erase: return 700;
    case TaskKind::InsertRound:
    case TaskKind::InsertCuboid: return 500;
  }
  return 500;
}

bool task_success(const WorldState& state, const SceneConfig& scene) {
  switch (state.task) {
    case TaskKind::Grind: return fine_fraction(state) >= scene.grind_success;
    case TaskKind::Erase: return erased_fraction(state) >= scene.erase_success && !state.erase.damaged;
    case TaskKind::InsertRound:
    case TaskKind::InsertCuboid: return insert_success(state, scene);
  }
  return false;
}

double task_metric(const WorldState& state, const SceneConfig& scene) {
  switch (state.task) {
    case TaskKind::Grind: return fine_fraction(state);
    case TaskKind::Erase: return erased_fraction(state);
    case TaskKind::InsertRound:
    case TaskKind::InsertCuboid: return -peg_tip_in_hole(state, scene).z();
  }
  return 0.0;
}

double fine_fraction(const WorldState& state) {
  const double total = state.grind.coarse + state.grind.fine;
  return total > 0 ? state.grind.fine / total : 0.0;
}

double erased_fraction(const WorldState& state) {
  const double initial = state.erase.initial.sum();
  if (initial <= 0) return 1.0;
  return std::clamp(1.0 - state.erase.marks.sum() / initial, 0.0, 1.0);
}

ObservationFrame render_frame(const WorldState& state, const SceneConfig& scene) {
  const int g = scene.grid_size;
  ObservationFrame f;
  f.grid = Eigen::MatrixXd::Zero(g, g);
  auto cell_of = [&](const Vector3d& p, int& row, int& col) {
    const double cell = scene.workspace / g;
    col = static_cast<int>(std::floor((p.x() + scene.workspace / 2) / cell));
    row = static_cast<int>(std::floor((scene.workspace / 2 - p.y()) / cell));
    return row >= 0 && row < g && col >= 0 && col < g;
  };
  switch (state.task) {
    case TaskKind::Grind: {
      const double total = state.grind.coarse + state.grind.fine;
      const double coarse = total > 0 ? state.grind.coarse / total : 0.0;
      for (int r = 0; r < g; ++r) {
        for (int c = 0; c < g; ++c) {
          if (cell_center(r, c, scene).norm() <= scene.mortar_radius) f.grid(r, c) = 0.2 + 0.8 * coarse;
        }
      }
      break;
    }
    case TaskKind::Erase:
      f.grid = state.erase.marks;
      break;
    case TaskKind::InsertRound:
    case TaskKind::InsertCuboid: {
      const auto& hole = state.arms[1].pose;
      for (int r = 0; r < g; ++r) {
        for (int c = 0; c < g; ++c) {
          const auto xy = cell_center(r, c, scene);
          const Vector3d q = hole.rotation.transpose() * (Vector3d(xy.x(), xy.y(), 0) - hole.position);
          if (std::abs(q.x()) <= scene.block_half_width && std::abs(q.y()) <= scene.block_half_width) {
            f.grid(r, c) = lateral_of(q, state.task).offset <= scene.clearance + scene.chamfer + 0.005 ? 0.1 : 0.4;
          }
        }
      }
      const Vector3d tip = state.insert.attached ? tool_tip(state, scene, 0)
                                                 : Vector3d(hole.position + hole.rotation * state.insert.released_tip);
      int row = 0, col = 0;
      if (cell_of(tip, row, col)) f.grid(row, col) = 1.0;
      break;
    }
  }
  for (const auto& b : state.arms) {
    f.poses.push_back(pose_to_9d(b.pose));
    f.wrenches.push_back(b.contact_wrench);
  }
  return f;
}

Env::Env(TaskKind task, SceneConfig scene, ControllerConfig controller, std::uint64_t seed)
    : task_(task), scene_(std::move(scene)), controller_(std::move(controller)) {
  controller_.validate();
  reset(seed);
}

void Env::reset(std::uint64_t seed) {
  state_ = initial_state(task_, scene_, seed);
  current_ = render_frame(state_, scene_);
  previous_ = current_;
}

void Env::tick(std::span<const ArmCommand> commands) {
  if (commands.size() != state_.arms.size()) {
    throw ShapeMismatch("Env::tick: " + std::to_string(commands.size()) + " commands for " +
                        std::to_string(state_.arms.size()) + " arms");
  }
  for (std::size_t i = 0; i < commands.size(); ++i) {
    state_.arms[i].gripper = std::clamp(commands[i].gripper, 0.0, 1.0);
  }
  if (is_insertion(task_) && state_.insert.attached && state_.arms[0].gripper > 0.5) {
    state_.insert.released_tip = peg_tip_in_hole(state_, scene_);
    state_.insert.attached = false;
  }
  step_controlled(state_, commands, scene_, controller_);
  previous_ = std::move(current_);
  current_ = render_frame(state_, scene_);
}

}  // namespace cdp
