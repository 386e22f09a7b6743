#include "cdp/experts.hpp"

#include "cdp/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace cdp {

void ExpertConfig::validate() const {
  if (position_noise < 0 || rotation_noise < 0 || timing_jitter < 0 || timing_jitter >= 1) {
    throw InvalidConfig("expert: noise must be >= 0 and timing_jitter in [0, 1)");
  }
  if (!(grind_duration > 0) || !(orbit_radius > 0) || !(orbit_period > 0) || !(stroke_speed > 0)) {
    throw InvalidConfig("expert: durations, radius and speeds must be > 0");
  }
}

namespace {

constexpr double kRate = 50.0;

/// Rate-limited commanded pose.
struct Mover {
  Posed target;

  bool toward(const Posed& goal, double max_step, double max_rot = 0.05) {
    const Vector3d dp = goal.position - target.position;
    const double n = dp.norm();
    target.position += n > max_step ? Vector3d(dp * (max_step / n)) : dp;
    Vector3d w = rotation_log<double>(goal.rotation * target.rotation.transpose());
    const double a = w.norm();
    if (a > max_rot) w *= max_rot / a;
    target.rotation = rotation_exp(w) * target.rotation;
    return n <= max_step && a <= max_rot;
  }
};

class ExpertBase : public Expert {
 public:
  ExpertBase(TaskKind task, const ExpertConfig& cfg, const PresetTable& presets, const SceneConfig& scene)
      : task_(task), cfg_(cfg), scene_(scene), rng_(cfg.seed) {
    cfg_.validate();
    for (int a = 0; a < arm_count(task); ++a) {
      low_.push_back(set_stiffness_mode(StiffnessMode::Low, presets, to_string(task), a));
      high_.push_back(set_stiffness_mode(StiffnessMode::High, presets, to_string(task), a));
    }
    std::normal_distribution<double> rn(0.0, cfg_.rotation_noise);
    orientation_ = rotation_exp(Vector3d(rn(rng_), rn(rng_), rn(rng_)));
  }

  std::vector<ArmCommand> act(const WorldState& state) override {
    if (state.task != task_) {
      throw TaskMismatch("expert for " + to_string(task_) + " given a " + to_string(state.task) + " state");
    }
    if (!started_) {
      movers_.resize(state.arms.size());
      for (std::size_t i = 0; i < state.arms.size(); ++i) movers_[i].target = state.arms[i].pose;
      start(state);
      started_ = true;
    }
    auto out = step(state);
    ++tick_;
    return out;
  }

 protected:
  virtual void start(const WorldState& state) = 0;
  virtual std::vector<ArmCommand> step(const WorldState& state) = 0;

  double noise(double std) { return std::normal_distribution<double>(0.0, std)(rng_); }
  int jittered_ticks(double seconds) {
    const double j = std::uniform_real_distribution<double>(-cfg_.timing_jitter, cfg_.timing_jitter)(rng_);
    return std::max(1, static_cast<int>(std::lround(seconds * (1.0 + j) * kRate)));
  }
  Posed pose_at(const Vector3d& p) const { return {p, orientation_}; }
  ArmCommand command(int arm, bool low, double gripper) const {
    ArmCommand c;
    c.target = movers_[static_cast<std::size_t>(arm)].target;
    c.stiffness = low ? low_[static_cast<std::size_t>(arm)] : high_[static_cast<std::size_t>(arm)];
    c.gripper = gripper;
    return c;
  }

  TaskKind task_;
  ExpertConfig cfg_;
  SceneConfig scene_;
  std::mt19937_64 rng_;
  std::vector<Vector6d> low_, high_;
  Matrix3d orientation_;
  std::vector<Mover> movers_;
  long tick_ = 0;
  bool started_ = false;
};

// descend -> press -> orbit -> lift -> move out -> pause -> return -> press ...
class GrindExpert final : public ExpertBase {
 public:
  using ExpertBase::ExpertBase;
  bool finished() const override { return tick_ >= total_ticks(); }
  std::string phase() const override {
    static const char* names[] = {"approach", "press", "orbit", "lift", "move_out", "pause", "return"};
    return names[static_cast<int>(phase_)];
  }

 private:
  enum class Phase { Approach, Press, Orbit, Lift, MoveOut, Pause, Return };

  long total_ticks() const { return std::lround(cfg_.grind_duration * kRate); }

  void start(const WorldState&) override {
    center_ = Vector3d(noise(cfg_.position_noise), noise(cfg_.position_noise), 0.0);
    radius_ = std::max(0.01, cfg_.orbit_radius + noise(cfg_.position_noise));
    angle_ = noise(0.1);
    depth_ = cfg_.grind_press_depth + noise(cfg_.position_noise);
    out_ = Vector3d(0.09 + noise(cfg_.position_noise), noise(cfg_.position_noise), 0.05);
    enter(Phase::Approach);
  }

  Vector3d orbit_point(double z) const {
    return center_ + Vector3d(radius_ * std::cos(angle_), radius_ * std::sin(angle_), z);
  }

  void enter(Phase p) {
    phase_ = p;
    counter_ = 0;
    if (p == Phase::Orbit) duration_ = jittered_ticks(cfg_.orbit_time);
    if (p == Phase::Pause) duration_ = jittered_ticks(cfg_.pause_time);
    if (p == Phase::Press) duration_ = jittered_ticks(0.4);
  }

  std::vector<ArmCommand> step(const WorldState& state) override {
    auto& m = movers_[0];
    bool low = false;
    switch (phase_) {
      case Phase::Approach:
        if (m.toward(pose_at(orbit_point(0.01)), 0.003)) enter(Phase::Press);
        break;
      case Phase::Press:
        low = true;
        if (m.toward(pose_at(orbit_point(-depth_)), 0.002) && ++counter_ >= duration_) enter(Phase::Orbit);
        break;
      case Phase::Orbit: {
        low = true;
        angle_ += 2 * std::numbers::pi / (cfg_.orbit_period * kRate);
        m.toward(pose_at(orbit_point(-depth_)), 0.005);
        if (++counter_ >= duration_) {
          m.target.position = state.arms[0].pose.position;
          enter(Phase::Lift);
        }
        break;
      }
      case Phase::Lift:
        if (m.toward(pose_at({m.target.position.x(), m.target.position.y(), 0.05}), 0.003)) enter(Phase::MoveOut);
        break;
      case Phase::MoveOut:
        if (m.toward(pose_at(out_), 0.003)) enter(Phase::Pause);
        break;
      case Phase::Pause:
        m.toward(pose_at(out_), 0.003);
        if (++counter_ >= duration_) enter(Phase::Return);
        break;
      case Phase::Return:
        if (m.toward(pose_at(orbit_point(0.05)), 0.003)) enter(Phase::Approach);
        break;
    }
    return {command(0, low, 0.0)};
  }

  Phase phase_ = Phase::Approach;
  Vector3d center_, out_;
  double radius_ = 0, angle_ = 0, depth_ = 0;
  int counter_ = 0, duration_ = 0;
};

// approach -> press -> stroke right to left -> lift -> return -> (repeat until clean) -> home
class EraseExpert final : public ExpertBase {
 public:
  using ExpertBase::ExpertBase;
  bool finished() const override { return phase_ == Phase::Done; }
  std::string phase() const override {
    static const char* names[] = {"approach", "press", "stroke", "lift", "return", "home", "idle", "done"};
    return names[static_cast<int>(phase_)];
  }

 private:
  enum class Phase { Approach, Press, Stroke, Lift, Return, Home, Idle, Done };

  void start(const WorldState& state) override {
    home_ = state.arms[0].pose.position;
    new_stroke();
    phase_ = Phase::Approach;
  }

  void new_stroke() {
    y_ = noise(cfg_.position_noise);
    x_start_ = 0.09 + noise(cfg_.position_noise);
    x_end_ = -0.09 + noise(cfg_.position_noise);
    depth_ = cfg_.erase_press_depth + 0.25 * noise(cfg_.position_noise);
  }

  std::vector<ArmCommand> step(const WorldState& state) override {
    auto& m = movers_[0];
    bool low = false;
    switch (phase_) {
      case Phase::Approach:
        if (m.toward(pose_at({x_start_, y_, 0.01}), 0.003)) phase_ = Phase::Press;
        break;
      case Phase::Press:
        low = true;
        if (m.toward(pose_at({x_start_, y_, -depth_}), 0.0015)) phase_ = Phase::Stroke;
        break;
      case Phase::Stroke:
        low = true;
        if (m.toward(pose_at({x_end_, y_, -depth_}), cfg_.stroke_speed / kRate)) {
          ++strokes_;
          m.target.position = state.arms[0].pose.position;
          phase_ = Phase::Lift;
        }
        break;
      case Phase::Lift:
        if (m.toward(pose_at({m.target.position.x(), m.target.position.y(), 0.02}), 0.003)) {
          if (erased_fraction(state) >= cfg_.erase_done || strokes_ >= cfg_.erase_max_strokes) {
            phase_ = Phase::Home;
          } else {
            new_stroke();
            phase_ = Phase::Return;
          }
        }
        break;
      case Phase::Return:
        if (m.toward(pose_at({x_start_, y_, 0.01}), 0.004)) phase_ = Phase::Press;
        break;
      case Phase::Home:
        if (m.toward(pose_at(home_), 0.004)) {
          phase_ = Phase::Idle;
          idle_ = jittered_ticks(0.5);
        }
        break;
      case Phase::Idle:
        if (--idle_ <= 0) phase_ = Phase::Done;
        break;
      case Phase::Done:
        break;
    }
    return {command(0, low, 0.0)};
  }

  Phase phase_ = Phase::Approach;
  Vector3d home_;
  double y_ = 0, x_start_ = 0, x_end_ = 0, depth_ = 0;
  int strokes_ = 0, idle_ = 0;
};

// align above the hole -> descend compliant -> release -> retreat
class InsertExpert final : public ExpertBase {
 public:
  using ExpertBase::ExpertBase;
  bool finished() const override { return phase_ == Phase::Done; }
  std::string phase() const override {
    static const char* names[] = {"align", "descend", "settle", "release", "retreat", "idle", "done"};
    return names[static_cast<int>(phase_)];
  }

 private:
  enum class Phase { Align, Descend, Settle, Release, Retreat, Idle, Done };

  void start(const WorldState& state) override {
    hold_ = state.arms[1].pose;
    aim_ = Vector3d(noise(cfg_.position_noise), noise(cfg_.position_noise), 0.0);
    commanded_depth_ = -0.015;
  }

  Vector3d ee_for_tip(const Vector3d& tip) const { return tip + orientation_ * Vector3d(0, 0, scene_.peg_length); }

  std::vector<ArmCommand> step(const WorldState& state) override {
    auto& m = movers_[0];
    movers_[1].target = hold_;
    const Vector3d hole = state.arms[1].pose.position;
    bool low = false;
    double gripper = 0.0;
    switch (phase_) {
      case Phase::Align:
        if (m.toward(pose_at(ee_for_tip(hole + aim_ + Vector3d(0, 0, 0.015))), 0.003)) {
          phase_ = Phase::Descend;
          counter_ = 0;
        }
        break;
      case Phase::Descend: {
        low = true;
        commanded_depth_ = std::min(commanded_depth_ + 0.0015, scene_.target_depth + cfg_.insert_overshoot);
        m.toward(pose_at(ee_for_tip(hole + aim_ - Vector3d(0, 0, commanded_depth_))), 0.005);
        const double depth = -peg_tip_in_hole(state, scene_).z();
        if (depth >= scene_.target_depth + 0.001 || ++counter_ > 80) {
          phase_ = Phase::Settle;
          counter_ = jittered_ticks(0.2);
        }
        break;
      }
      case Phase::Settle:
        low = true;
        if (--counter_ <= 0) {
          phase_ = Phase::Release;
          counter_ = jittered_ticks(0.2);
        }
        break;
      case Phase::Release:
        low = true;
        gripper = 1.0;
        if (--counter_ <= 0) phase_ = Phase::Retreat;
        break;
      case Phase::Retreat:
        gripper = 1.0;
        if (m.toward(pose_at(ee_for_tip(hole + Vector3d(0, 0, 0.05))), 0.003)) {
          phase_ = Phase::Idle;
          counter_ = jittered_ticks(0.3);
        }
        break;
      case Phase::Idle:
        gripper = 1.0;
        if (--counter_ <= 0) phase_ = Phase::Done;
        break;
      case Phase::Done:
        gripper = 1.0;
        break;
    }
    const bool r2_low = phase_ == Phase::Descend || phase_ == Phase::Settle || phase_ == Phase::Release;
    return {command(0, low, gripper), command(1, r2_low, 0.0)};
  }

  Phase phase_ = Phase::Align;
  Posed hold_;
  Vector3d aim_;
  double commanded_depth_ = 0;
  int counter_ = 0;
};

}  // namespace

std::unique_ptr<Expert> make_expert(TaskKind task, const ExpertConfig& cfg, const PresetTable& presets,
                                    const SceneConfig& scene) {
  switch (task) {
    case TaskKind::Grind: return std::make_unique<GrindExpert>(task, cfg, presets, scene);
    case TaskKind::Erase: return std::make_unique<EraseExpert>(task, cfg, presets, scene);
    case TaskKind::InsertRound:
    case TaskKind::InsertCuboid: return std::make_unique<InsertExpert>(task, cfg, presets, scene);
  }
  throw UnknownTask("no expert for task");
}

std::vector<Action16> expert_action(Expert& expert, const WorldState& state, TaskKind task) {
  if (state.task != task) {
    throw TaskMismatch("expert_action: state is " + to_string(state.task) + ", requested " + to_string(task));
  }
  std::vector<Action16> out;
  for (const auto& c : expert.act(state)) out.push_back(encode_action(c));
  return out;
}

ExpertRollout run_expert(TaskKind task, const ExpertConfig& cfg, const PresetTable& presets, const SceneConfig& scene,
                         const ControllerConfig& controller, std::uint64_t seed, int max_ticks,
                         const std::string& date) {
  ExpertConfig c = cfg;
  c.seed = seed;
  auto expert = make_expert(task, c, presets, scene);
  Env env(task, scene, controller, seed);
  EpisodeMeta meta;
  meta.task = task;
  meta.seed = seed;
  meta.control_rate = scene.control_rate;
  meta.presets = presets.at(to_string(task));
  meta.date = date;
  meta.source = EpisodeSource::Expert;
  meta.n_arms = arm_count(task);
  meta.grid_size = scene.grid_size;
  EpisodeRecorder rec(meta, scene);
  const int limit = max_ticks > 0 ? max_ticks : default_episode_ticks(task);
  for (int t = 0; t < limit && !expert->finished(); ++t) {
    const ObservationFrame frame = env.observation().current;
    auto cmds = expert->act(env.state());
    env.tick(cmds);
    rec.record(frame, cmds, env.state());
  }
  ExpertRollout r;
  r.final_state = env.state();
  r.episode = rec.finish(r.final_state);
  r.success = r.episode.meta.success;
  return r;
}

std::uint64_t episode_seed(std::uint64_t base, int index, int attempt) {
  // splitmix64 finalizer over the combined key
  std::uint64_t z = base + 0x9E3779B97F4A7C15ull * (static_cast<std::uint64_t>(index) * 64 + static_cast<std::uint64_t>(attempt) + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

Dataset collect_demos(TaskKind task, const CollectOptions& opts, const ExpertConfig& cfg, const PresetTable& presets,
                      const SceneConfig& scene, const ControllerConfig& controller,
                      const std::function<void(const std::string&)>& log) {
  if (opts.episodes < 0 || opts.max_attempts < 1) throw InvalidConfig("collect: episodes >= 0 and max_attempts >= 1");
  Dataset data;
  for (int i = 0; i < opts.episodes; ++i) {
    bool done = false;
    for (int attempt = 0; attempt < opts.max_attempts && !done; ++attempt) {
      const auto seed = episode_seed(opts.seed, i, attempt);
      auto r = run_expert(task, cfg, presets, scene, controller, seed, opts.max_ticks, opts.date);
      if (r.success) {
        data.episodes.push_back(std::move(r.episode));
        done = true;
      } else if (log) {
        log("discarded " + to_string(task) + " episode " + std::to_string(i) + " attempt " + std::to_string(attempt) +
            " (seed " + std::to_string(seed) + ", metric " + std::to_string(r.episode.meta.metric) + ")");
      }
    }
    if (!done) {
      throw ExpertFailure(to_string(task) + " expert failed episode " + std::to_string(i) + " " +
                          std::to_string(opts.max_attempts) + " times");
    }
  }
  return data;
}

}  // namespace cdp
