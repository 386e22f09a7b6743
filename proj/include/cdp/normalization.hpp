#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cdp/checkpoint.hpp"
#include "cdp/types.hpp"

namespace cdp {

enum class NormKind { ZScore, MinMax };

/// Per-dimension affine map. ZScore: (x - a) / b. MinMax: 2 (x - a) / (b - a) - 1.
/// Constant dimensions map to 0 and back to `a`.
struct DimStats {
  NormKind kind = NormKind::ZScore;
  double a = 0.0;  ///< mean or min
  double b = 1.0;  ///< std or max
  bool constant = false;

  double normalize(double x) const;
  double denormalize(double y) const;
  bool operator==(const DimStats&) const = default;
};

/// Statistics for observation poses/wrenches and actions, laid out per arm
/// like the concatenated vectors: pose [9 A], wrench [6 A], action [16 A].
struct NormalizationStats {
  std::vector<DimStats> pose, wrench, action;

  bool empty() const { return pose.empty() || wrench.empty() || action.empty(); }
  int n_arms() const { return static_cast<int>(action.size()) / kActionDim; }

  /// Each throws MissingStats when stats are absent or sized for another arm count.
  Observation normalize(const Observation& raw) const;
  ObservationFrame normalize(const ObservationFrame& raw) const;
  Eigen::VectorXd normalize_action(const Eigen::VectorXd& raw) const;
  Eigen::VectorXd denormalize_action(const Eigen::VectorXd& normalized) const;
  /// Row-wise over a chunk [H, 16 A].
  Eigen::MatrixXd normalize_chunk(const Eigen::MatrixXd& raw) const;
  Eigen::MatrixXd denormalize_chunk(const Eigen::MatrixXd& normalized) const;

  /// Stored as "stats.<group>" tensors of shape [4, dims]: kind, a, b, constant.
  std::vector<StoredTensor> to_tensors() const;
  static NormalizationStats from_checkpoint(const Checkpoint& ckpt);

  bool operator==(const NormalizationStats&) const = default;
};

/// Pose dims of each arm's action are z-scored, gripper and stiffness min-max.
inline NormKind action_norm_kind(int dim) { return dim % kActionDim < kPoseDim ? NormKind::ZScore : NormKind::MinMax; }

/// Two-pass mean / population std, or min / max, over the rows of `samples`.
std::vector<DimStats> fit_dims(const Eigen::MatrixXd& samples, const std::vector<NormKind>& kinds);

}  // namespace cdp
