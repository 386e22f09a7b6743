#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cdp/compliance.hpp"
#include "cdp/types.hpp"

namespace cdp {

enum class TaskKind { Grind, Erase, InsertRound, InsertCuboid };

/// Throws UnknownTask.
TaskKind parse_task(const std::string& name);
std::string to_string(TaskKind task);
int arm_count(TaskKind task);
bool is_insertion(TaskKind task);

struct SceneConfig {
  double control_rate = 50.0;  ///< Hz
  double substep = 0.001;      ///< s, upper bound on the integration step
  double contact_stiffness = 5000.0;
  double contact_damping = 100.0;
  double friction = 0.8;
  double friction_velocity = 0.01;  ///< smoothing scale of the Coulomb law
  double linear_drag = 0.5;
  double angular_drag = 0.001;
  double max_speed = 10.0;
  int grid_size = 24;
  double workspace = 0.24;  ///< side of the square rendered by the grid, m
  double min_force = 0.5;   ///< F_min, N
  double grind_success = 0.7;   ///< fine fraction counted as a successful demo
  double erase_success = 0.99;  ///< erased fraction counted as success

  // grind
  double mortar_radius = 0.06;
  double mortar_wall_height = 0.04;
  double grind_rate = 0.075;  ///< c_g

  // erase
  double erase_rate = 2.0;  ///< c_e
  double eraser_size = 0.05;
  double damage_force = 15.0;
  int mark_row_begin = 10, mark_row_end = 13;  ///< inclusive
  int mark_col_begin = 6, mark_col_end = 17;
  double mark_min = 0.6, mark_max = 1.0;

  // insert
  double clearance = 0.002;
  double contact_slop = 0.0005;  ///< wall penetration still counted as inside the bore
  double chamfer = 0.004;
  double hole_depth = 0.03;
  double target_depth = 0.02;
  double block_half_width = 0.03;
  double peg_length = 0.05;
  double hole_randomization = 0.005;

  double control_dt() const { return 1.0 / control_rate; }
  /// Throws InvalidConfig.
  void validate() const;
};

struct BodyState {
  Posed pose;
  Vector3d linear_velocity = Vector3d::Zero();
  Vector3d angular_velocity = Vector3d::Zero();
  double gripper = 0.0;  ///< 0 closed, 1 open
  Vector6d contact_wrench = Vector6d::Zero();  ///< environment on the body, world frame
  Vector6d command_wrench = Vector6d::Zero();
  double normal_force = 0.0;

  Vector6d velocity() const {
    Vector6d v;
    v << linear_velocity, angular_velocity;
    return v;
  }
};

struct GrindState {
  double coarse = 1.0;
  double fine = 0.0;
};

struct EraseState {
  Eigen::MatrixXd marks;
  Eigen::MatrixXd initial;
  bool damaged = false;
};

struct InsertState {
  bool attached = true;
  Vector3d released_tip = Vector3d::Zero();  ///< peg tip in the hole frame after release
};

struct WorldState {
  TaskKind task = TaskKind::Grind;
  std::vector<BodyState> arms;
  GrindState grind;
  EraseState erase;
  InsertState insert;
  double time = 0.0;
  long tick = 0;
};

WorldState initial_state(TaskKind task, const SceneConfig& scene, std::uint64_t seed);

/// Integrates dt with the given per-arm wrenches held constant, substepping at
/// scene.substep. Throws Diverged.
void step(WorldState& state, std::span<const Wrenchd> wrenches, double dt, const SceneConfig& scene);

/// One control tick: the impedance controller runs every substep against the
/// held commands. Stiffness is clamped to the controller bounds.
void step_controlled(WorldState& state, std::span<const ArmCommand> commands, const SceneConfig& scene,
                     const ControllerConfig& controller);

/// Peg tip in the hole frame (insertion tasks).
Vector3d peg_tip_in_hole(const WorldState& state, const SceneConfig& scene);
/// Lateral offset used by the clearance test: Euclidean for round pegs, max-norm for cuboids.
double insert_lateral_offset(const WorldState& state, const SceneConfig& scene);
bool insert_success(const WorldState& state, const SceneConfig& scene);

double fine_fraction(const WorldState& state);
double erased_fraction(const WorldState& state);

/// Episode length cap for rollouts: grind 80 s, erase 14 s, insertion 10 s.
int default_episode_ticks(TaskKind task);

/// Grind: fine fraction >= grind_success. Erase: erased >= erase_success and
/// no damage. Insertion: insert_success.
bool task_success(const WorldState& state, const SceneConfig& scene);
/// Task progress scalar: fine fraction, erased fraction, or peg depth (m).
double task_metric(const WorldState& state, const SceneConfig& scene);

ObservationFrame render_frame(const WorldState& state, const SceneConfig& scene);

/// Cell centre of grid (row, col) in world x/y. Row 0 is +y.
Eigen::Vector2d cell_center(int row, int col, const SceneConfig& scene);

/// Owns a world and its (t-1, t) observation pair.
class Env {
 public:
  Env(TaskKind task, SceneConfig scene, ControllerConfig controller, std::uint64_t seed);

  void reset(std::uint64_t seed);
  void tick(std::span<const ArmCommand> commands);

  const WorldState& state() const { return state_; }
  WorldState& mutable_state() { return state_; }
  Observation observation() const { return {previous_, current_}; }
  const SceneConfig& scene() const { return scene_; }
  const ControllerConfig& controller() const { return controller_; }
  TaskKind task() const { return task_; }

 private:
  TaskKind task_;
  SceneConfig scene_;
  ControllerConfig controller_;
  WorldState state_;
  ObservationFrame previous_, current_;
};

}  // namespace cdp
