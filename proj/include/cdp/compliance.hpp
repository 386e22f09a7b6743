#pragma once

#include <map>
#include <string>
#include <vector>

#include "cdp/types.hpp"

namespace cdp {

struct ControllerConfig {
  double damping_ratio = 1.0;
  double mass = 1.0;      ///< kg
  double inertia = 0.01;  ///< kg m^2, isotropic
  double max_force = 50.0;
  double max_torque = 5.0;
  Vector6d k_min = (Vector6d() << 50, 50, 50, 10, 10, 10).finished();
  Vector6d k_max = (Vector6d() << 2000, 2000, 2000, 500, 500, 500).finished();

  /// Throws InvalidConfig.
  void validate() const;
};

struct ControllerState {
  Vector6d last_wrench = Vector6d::Zero();
};

/// d_i = 2 zeta sqrt(k_i m_i)
Vector6d damping_gains(const Vector6d& k, const ControllerConfig& cfg);

/// Component-wise clamp into [k_min, k_max].
Vector6d clamp_stiffness(const Vector6d& k, const ControllerConfig& cfg);

/// Explicit impedance law w = k .* e - d .* v, saturated component-wise.
/// `velocity` is [linear; angular] in the world frame.
Wrenchd impedance_wrench(const Posed& current, const Vector6d& velocity, const Posed& target, const Vector6d& k,
                         const ControllerConfig& cfg, ControllerState* state = nullptr);

enum class StiffnessMode { Low, High };

std::string to_string(StiffnessMode mode);
StiffnessMode toggled(StiffnessMode mode);

struct StiffnessPreset {
  double translation_low = 0, translation_high = 0;
  double rotation_low = 0, rotation_high = 0;

  Vector6d diagonal(StiffnessMode mode) const;
  bool operator==(const StiffnessPreset&) const = default;
};

/// Per task, one preset per arm.
using PresetTable = std::map<std::string, std::vector<StiffnessPreset>>;

PresetTable default_presets();

/// Throws UnknownPreset if the task or arm has no preset.
Vector6d set_stiffness_mode(StiffnessMode mode, const PresetTable& table, const std::string& task, int arm = 0);

/// One axis-decoupled backward-Euler step of a body under the impedance law
/// plus an external force. Returns the resulting impedance wrench (saturated).
///
/// Solves (m/h + h k + d) v1 = m v0 / h + f_ext + k e0 per axis, then clamps
/// axes whose wrench exceeds saturation and re-solves them with the clamped
/// force held constant. `extra_damping` adds an isotropic implicit drag
/// matrix (used for friction); it couples axes, so the solve is 3x3.
struct ImplicitAxisResult {
  Vector3d velocity;
  Vector3d wrench;
};

ImplicitAxisResult implicit_impedance_axes(const Vector3d& v0, const Vector3d& error0, const Vector3d& k,
                                           const Vector3d& d, double m, double h, const Vector3d& f_ext,
                                           const Matrix3d& extra_damping, double saturation);

}  // namespace cdp
