#pragma once

#include <vector>

#include <Eigen/Dense>

#include "cdp/geometry.hpp"

namespace cdp {

using Vector3d = Vector3<double>;
using Vector6d = Vector6<double>;
using Vector9d = Vector9<double>;
using Matrix3d = Matrix3<double>;

/// Per-arm action width: pose9 (position + 6D rotation), gripper, stiffness diagonal.
inline constexpr int kActionDim = 16;
inline constexpr int kPoseDim = 9;
inline constexpr int kWrenchDim = 6;

using Action16 = Eigen::Matrix<double, kActionDim, 1>;

/// Decoded per-arm command for the compliance controller.
struct ArmCommand {
  Posed target;
  double gripper = 0.0;  ///< opening width, 0 = closed, 1 = open
  Vector6d stiffness = Vector6d::Constant(1.0);
};

inline Action16 encode_action(const ArmCommand& c) {
  Action16 a;
  a << pose_to_9d(c.target), c.gripper, c.stiffness;
  return a;
}

/// The 6D rotation part goes through Gram-Schmidt, so any non-degenerate
/// network output decodes to a valid pose.
inline ArmCommand decode_action(const Action16& a) {
  ArmCommand c;
  c.target = pose_from_9d<double>(a.head<9>());
  c.gripper = a(9);
  c.stiffness = a.tail<6>();
  return c;
}

/// One observation timestep.
struct ObservationFrame {
  Eigen::MatrixXd grid;              ///< G x G intensities in [0, 1]
  std::vector<Vector9d> poses;       ///< per arm
  std::vector<Vector6d> wrenches;    ///< per arm, contact wrench
};

/// Observation pair (t-1, t).
struct Observation {
  ObservationFrame previous;
  ObservationFrame current;
};

}  // namespace cdp
