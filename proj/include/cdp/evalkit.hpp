#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cdp/datastore.hpp"
#include "cdp/policy.hpp"

namespace cdp {

/// Per-tick normal force statistics over episodes aligned at their start.
/// Ticks beyond a shorter episode's end average over the episodes that
/// still run. Population std.
struct ForceProfile {
  std::vector<double> mean;
  std::vector<double> std;
  std::vector<int> count;
};

/// Throws EmptySet. `arm` selects the normal-force column.
ForceProfile force_profile(std::span<const Episode> episodes, int arm = 0);

/// "tick,mean_N,std_N" rows, shortest round-trip decimal formatting.
std::string force_profile_csv(const ForceProfile& profile);

/// Fine fraction at the end of a grind episode.
double metric_fine_powder(const Episode& ep);
/// Erased fraction at the end of an erase episode.
double metric_erased(const Episode& ep);
/// Delegates to the simulator's check, recorded at the end of the episode.
bool metric_insertion(const Episode& ep);

struct MetricRow {
  std::string episode_id;
  std::string task;
  double metric = 0.0;
  bool success = false;
};

struct EvalSummary {
  int count = 0;
  double mean_metric = 0.0;
  double success_rate = 0.0;
};

/// One row per episode; ids are the given names. Throws EmptySet.
std::vector<MetricRow> episode_metrics(std::span<const Episode> episodes, std::span<const std::string> ids);
EvalSummary summarize(std::span<const MetricRow> rows);
/// "episode_id,task,metric,success"
std::string metrics_csv(std::span<const MetricRow> rows);

/// Batches for the bimodal toy problem: one fixed observation, every chunk
/// entry equal to +1 or -1 (fair coin per sample) plus N(0, noise^2).
TrainBatch bimodal_toy_batch(const DenoiserConfig& cfg, int batch, double noise, std::uint64_t seed);
/// The fixed toy observation (already normalized).
Observation bimodal_toy_observation(const DenoiserConfig& cfg);

}  // namespace cdp
