#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cdp/compliance.hpp"
#include "cdp/datastore.hpp"
#include "cdp/denoiser.hpp"
#include "cdp/diffusion.hpp"
#include "cdp/normalization.hpp"
#include "cdp/simworld.hpp"

namespace cdp {

/// Overlapping chunks, each born at the tick it was sampled. Chunk j of age
/// a_j covering a tick gets weight exp(-m (a_max - a_j)), so the oldest
/// covering chunk weighs most; m = +inf keeps only the oldest.
class EnsembleBuffer {
 public:
  EnsembleBuffer(int horizon, int replan_interval, double decay);

  /// Drops expired chunks, then the oldest while over capacity.
  void add(Eigen::MatrixXd chunk, long birth_tick);

  struct Contribution {
    long birth = 0;
    double weight = 0.0;
    Eigen::VectorXd action;
  };
  /// Throws NoCoverage when no live chunk covers `tick`.
  std::vector<Contribution> contributions(long tick) const;

  int live() const { return static_cast<int>(entries_.size()); }
  /// ceil(H / replan_interval) + 1
  int capacity() const { return capacity_; }
  int horizon() const { return horizon_; }
  double decay() const { return decay_; }
  void clear() { entries_.clear(); }

 private:
  struct Entry {
    Eigen::MatrixXd chunk;
    long birth = 0;
  };
  int horizon_, replan_, capacity_;
  double decay_;
  std::deque<Entry> entries_;
};

/// Weighted average of the covering chunks' rows for `tick`. Throws NoCoverage.
Eigen::VectorXd ensemble_action(const EnsembleBuffer& buffer, long tick);

/// Raw (denormalized) action vector [16 A] to executable commands: 6D
/// rotation re-orthonormalized, gripper clamped to [0, 1], stiffness clamped
/// to the controller range. Throws InferenceFailure on non-finite or
/// degenerate input.
std::vector<ArmCommand> action_to_commands(const Eigen::VectorXd& raw, const ControllerConfig& controller);

enum class PolicyKind { Diffusion, Regression };

std::string to_string(PolicyKind k);
PolicyKind parse_policy_kind(const std::string& s);

struct TrainConfig {
  int steps = 3000;
  int batch = 32;
  double lr = 3e-4;
  double lr_final_fraction = 0.1;  ///< cosine decay to lr * this
  int warmup = 200;
  double grad_clip = 1.0;
  double ema = 0.0;  ///< 0 disables the averaged copy
  int log_every = 100;
  std::uint64_t seed = 0;
  std::uint64_t init_seed = 0;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

struct RolloutConfig {
  int replan_interval = 16;
  double ensemble_decay = 0.1;
  int n_infer = 16;  ///< DDIM steps
  int max_ticks = 0;  ///< 0 = task default

  void validate() const;
  bool operator==(const RolloutConfig&) const = default;
};

/// A trained (or freshly initialized) policy: weights, schedule and stats.
struct PolicyModel {
  PolicyKind kind = PolicyKind::Diffusion;
  TaskKind task = TaskKind::Grind;
  ScheduleKind schedule = ScheduleKind::SquaredCosine;
  Denoiser<float> net;
  NormalizationStats stats;

  PolicyModel(PolicyKind kind, TaskKind task, const DenoiserConfig& cfg, ScheduleKind schedule,
              NormalizationStats stats, std::uint64_t init_seed);
};

/// Checkpoint config header carries kind, task, schedule and model config;
/// stats ride along as stats.* tensors.
void save_policy(const std::filesystem::path& path, const PolicyModel& model);
PolicyModel load_policy(const std::filesystem::path& path);

/// Something that proposes denormalized chunks [H, 16 A] from raw observations.
class Policy {
 public:
  virtual ~Policy() = default;
  virtual Eigen::MatrixXd predict_chunk(const Observation& raw, std::uint64_t seed) = 0;
  virtual int horizon() const = 0;
};

/// Diffusion: DDIM from Gaussian noise. Regression: one decoder pass on a
/// zero chunk at step 0.
class LearnedPolicy final : public Policy {
 public:
  LearnedPolicy(const PolicyModel& model, int n_infer);

  Eigen::MatrixXd predict_chunk(const Observation& raw, std::uint64_t seed) override;
  /// Same, but in normalized action space.
  Eigen::MatrixXd predict_normalized(const Observation& normalized, std::uint64_t seed) const;
  int horizon() const override { return model_.net.config().horizon; }

 private:
  const PolicyModel& model_;
  NoiseSchedule schedule_;
  int n_infer_;
};

struct RolloutResult {
  Episode episode;
  WorldState final_state;
  int inferences = 0;
};

/// Closed loop: every replan_interval ticks sample a chunk from the current
/// observation, execute the ensembled action. Throws EnvTerminated if the
/// simulator diverges, InferenceFailure on bad policy output.
RolloutResult run_policy(Policy& policy, Env& env, const RolloutConfig& cfg, std::uint64_t seed,
                         const PresetTable& presets, const std::string& date = {});

struct TrainLog {
  std::vector<std::pair<int, double>> losses;  ///< (step, mean loss over the window)
  double first_loss = 0.0;
  double last_loss = 0.0;
};

/// Supplies batch `step` (normalized observations and chunks).
using BatchFn = std::function<TrainBatch(int step)>;

/// Adam with warmup and cosine decay, global-norm clipping, optional EMA
/// (copied into the model at the end). `log(step, loss)` fires every
/// log_every steps.
TrainLog train_policy(PolicyModel& model, const BatchFn& batches, const TrainConfig& cfg,
                      const std::function<void(int, double)>& log = {});

/// Batches drawn from a dataset by SampleSource with per-step seeds.
BatchFn dataset_batches(const SampleSource& source, int batch, int horizon, std::uint64_t seed);

}  // namespace cdp
