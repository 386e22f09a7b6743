#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "cdp/compliance.hpp"
#include "cdp/datastore.hpp"
#include "cdp/simworld.hpp"

namespace cdp {

struct ExpertConfig {
  double position_noise = 0.002;  ///< m, std of waypoint noise
  double rotation_noise = 0.02;   ///< rad
  double timing_jitter = 0.1;     ///< relative, uniform +- on phase durations
  std::uint64_t seed = 0;

  // grind
  double grind_duration = 80.0;  ///< s
  double orbit_radius = 0.03;
  double orbit_period = 1.2;  ///< s
  double orbit_time = 6.0;    ///< s per pressing bout
  double grind_press_depth = 0.03;  ///< target below the mortar floor, m
  double pause_time = 1.0;

  // erase
  double erase_press_depth = 0.008;
  double stroke_speed = 0.1;  ///< m/s
  double erase_done = 0.995;  ///< erased fraction at which the expert stops stroking
  int erase_max_strokes = 8;

  // insert
  double insert_overshoot = 0.006;  ///< commanded depth beyond the target, m

  /// Throws InvalidConfig.
  void validate() const;
};

/// A scripted demonstrator for one task. Call act() once per control tick.
class Expert {
 public:
  virtual ~Expert() = default;
  /// Throws TaskMismatch if the state belongs to another task.
  virtual std::vector<ArmCommand> act(const WorldState& state) = 0;
  virtual bool finished() const = 0;
  virtual std::string phase() const = 0;
};

std::unique_ptr<Expert> make_expert(TaskKind task, const ExpertConfig& cfg, const PresetTable& presets,
                                    const SceneConfig& scene);

/// Encoded per-arm actions for the current tick. Throws TaskMismatch.
std::vector<Action16> expert_action(Expert& expert, const WorldState& state, TaskKind task);

/// Runs an expert in a fresh environment until it finishes or max_ticks.
struct ExpertRollout {
  Episode episode;
  WorldState final_state;
  bool success = false;
};

/// One scripted episode, recorded. Stops when the expert finishes or after
/// `max_ticks` (0 = the task default).
ExpertRollout run_expert(TaskKind task, const ExpertConfig& cfg, const PresetTable& presets, const SceneConfig& scene,
                         const ControllerConfig& controller, std::uint64_t seed, int max_ticks = 0,
                         const std::string& date = {});

struct CollectOptions {
  int episodes = 0;
  std::uint64_t seed = 0;
  int max_ticks = 0;
  int max_attempts = 5;  ///< per episode, before ExpertFailure
  std::string date;
};

/// Seed of attempt `attempt` of episode `index`.
std::uint64_t episode_seed(std::uint64_t base, int index, int attempt);

/// Successful expert episodes only; failed rollouts are discarded and
/// reported through `log`. Throws ExpertFailure when an episode exhausts its
/// attempts.
Dataset collect_demos(TaskKind task, const CollectOptions& opts, const ExpertConfig& cfg, const PresetTable& presets,
                      const SceneConfig& scene, const ControllerConfig& controller,
                      const std::function<void(const std::string&)>& log = {});

}  // namespace cdp
