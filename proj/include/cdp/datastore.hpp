#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cdp/compliance.hpp"
#include "cdp/normalization.hpp"
#include "cdp/simworld.hpp"

namespace cdp {

enum class EpisodeSource { Expert, Human, Policy };

std::string to_string(EpisodeSource s);
EpisodeSource parse_source(const std::string& s);

struct EpisodeMeta {
  TaskKind task = TaskKind::Grind;
  std::uint64_t seed = 0;
  double control_rate = 50.0;
  std::vector<StiffnessPreset> presets;  ///< per arm
  std::string date;                      ///< taken from the run config, never the clock
  EpisodeSource source = EpisodeSource::Expert;
  int n_arms = 1;
  int grid_size = 24;
  bool success = false;
  double metric = 0.0;  ///< fine fraction, erased fraction, or peg depth at the end

  bool operator==(const EpisodeMeta&) const = default;
};

/// One recorded episode. Row t holds the observation seen at tick t, the
/// action issued at t, and the normal force / task progress after the tick.
struct Episode {
  EpisodeMeta meta;
  Eigen::MatrixXf pose;          ///< [T, 9 A]
  Eigen::MatrixXf wrench;        ///< [T, 6 A]
  Eigen::MatrixXf grid;          ///< [T, G*G], row-major cells
  Eigen::MatrixXf action;        ///< [T, 16 A]
  Eigen::MatrixXf normal_force;  ///< [T, A]
  Eigen::MatrixXf progress;      ///< [T, 1]

  int length() const { return static_cast<int>(action.rows()); }
  ObservationFrame frame(int t) const;
  /// Frames (t-1, t); tick 0 pairs with itself.
  Observation observation(int t) const;
  Eigen::VectorXd action_at(int t) const { return action.row(t).transpose().cast<double>(); }

  /// Throws CorruptFile(…, 0) when array lengths or widths disagree.
  void validate() const;
  bool operator==(const Episode& o) const;
};

/// Accumulates ticks, quantizing to float as they arrive.
class EpisodeRecorder {
 public:
  EpisodeRecorder(EpisodeMeta meta, SceneConfig scene);

  void record(const ObservationFrame& frame, const std::vector<ArmCommand>& commands, const WorldState& after);
  int length() const { return static_cast<int>(rows_.size()); }
  /// Fills success/metric from the final state.
  Episode finish(const WorldState& final_state);

 private:
  struct Row {
    std::vector<float> pose, wrench, grid, action, force;
    float progress = 0;
  };
  EpisodeMeta meta_;
  SceneConfig scene_;
  std::vector<Row> rows_;
};


/// Episode file:
///
///   "CDPE" | u32 version | u32 header length | header (JSON text)
///   u32 array count | per array: u16 name length | name | u32 rank | u32 dims[rank] | f32 data (LE, row-major)
inline constexpr std::uint32_t kEpisodeVersion = 1;

std::string encode_episode(const Episode& ep);
Episode decode_episode(std::string_view bytes);
void write_episode(const std::filesystem::path& path, const Episode& ep);
Episode read_episode(const std::filesystem::path& path);

struct Dataset {
  std::vector<Episode> episodes;

  long total_ticks() const;
  bool empty() const { return episodes.empty(); }
};

/// `<root>/<task>/ep_<index>.ep`; returns the written paths.
std::vector<std::filesystem::path> write_dataset(const std::filesystem::path& root, const Dataset& data,
                                                 int first_index = 0);
/// Every *.ep below `root`, in sorted path order. A missing directory is an
/// empty dataset.
Dataset load_dataset(const std::filesystem::path& root);

/// Throws EmptyDataset.
NormalizationStats compute_stats(const Dataset& data);

/// Normalized training batch.
struct TrainBatch {
  std::vector<Observation> observations;
  Eigen::MatrixXf actions;  ///< [B * H, 16 A], chunk b at rows [b H, (b+1) H)
  std::vector<std::pair<int, int>> picks;  ///< (episode, tick)
};

/// View of a dataset for repeated sampling; `data` must outlive it.
/// Actions are normalized once, observations per draw.
class SampleSource {
 public:
  SampleSource(const Dataset& data, NormalizationStats stats);

  /// Uniform over all (episode, tick) pairs; chunks past the episode end
  /// repeat the final action.
  TrainBatch sample(int batch, int horizon, std::uint64_t seed) const;
  /// The chunk starting at tick t of episode e, normalized.
  Eigen::MatrixXf chunk(int e, int t, int horizon) const;
  const NormalizationStats& stats() const { return stats_; }
  long total_ticks() const { return offsets_.back(); }
  int n_arms() const { return stats_.n_arms(); }

 private:
  const Dataset& data_;
  std::vector<Eigen::MatrixXf> actions_;
  std::vector<long> offsets_;
  NormalizationStats stats_;
};

TrainBatch sample_batch(const Dataset& data, const NormalizationStats& stats, int batch, int horizon,
                        std::uint64_t seed);

}  // namespace cdp
