#include "cdp/compliance.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace cdp {

void ControllerConfig::validate() const {
  if (!(damping_ratio > 0)) throw InvalidConfig("controller: damping_ratio must be > 0");
  if (!(mass > 0) || !(inertia > 0)) throw InvalidConfig("controller: mass and inertia must be > 0");
  if (!(max_force > 0) || !(max_torque > 0)) throw InvalidConfig("controller: saturation must be > 0");
  if (!((k_min.array() > 0).all() && (k_max.array() >= k_min.array()).all())) {
    throw InvalidConfig("controller: need 0 < k_min <= k_max");
  }
}

Vector6d damping_gains(const Vector6d& k, const ControllerConfig& cfg) {
  Vector6d d;
  for (int i = 0; i < 6; ++i) {
    const double m = i < 3 ? cfg.mass : cfg.inertia;
    d(i) = 2.0 * cfg.damping_ratio * std::sqrt(std::max(k(i), 0.0) * m);
  }
  return d;
}

Vector6d clamp_stiffness(const Vector6d& k, const ControllerConfig& cfg) {
  Vector6d out;
  for (int i = 0; i < 6; ++i) {
    out(i) = std::isfinite(k(i)) ? std::clamp(k(i), cfg.k_min(i), cfg.k_max(i)) : cfg.k_min(i);
  }
  return out;
}

Wrenchd impedance_wrench(const Posed& current, const Vector6d& velocity, const Posed& target, const Vector6d& k,
                         const ControllerConfig& cfg, ControllerState* state) {
  const Vector6d e = pose_error(current, target);
  Vector6d w = k.cwiseProduct(e) - damping_gains(k, cfg).cwiseProduct(velocity);
  for (int i = 0; i < 6; ++i) {
    const double lim = i < 3 ? cfg.max_force : cfg.max_torque;
    w(i) = std::clamp(w(i), -lim, lim);
  }
  if (state) state->last_wrench = w;
  return Wrenchd::from_stacked(w);
}

std::string to_string(StiffnessMode mode) { return mode == StiffnessMode::Low ? "low" : "high"; }

StiffnessMode toggled(StiffnessMode mode) {
  return mode == StiffnessMode::Low ? StiffnessMode::High : StiffnessMode::Low;
}

Vector6d StiffnessPreset::diagonal(StiffnessMode mode) const {
  const bool low = mode == StiffnessMode::Low;
  const double t = low ? translation_low : translation_high;
  const double r = low ? rotation_low : rotation_high;
  Vector6d k;
  k << t, t, t, r, r, r;
  return k;
}

PresetTable default_presets() {
  const StiffnessPreset a{300, 800, 100, 150};
  const StiffnessPreset b{800, 1200, 150, 300};
  const StiffnessPreset r2{200, 800, 100, 150};
  return {{"grind", {a}}, {"erase", {b}}, {"insert_round", {b, r2}}, {"insert_cuboid", {b, r2}}};
}

Vector6d set_stiffness_mode(StiffnessMode mode, const PresetTable& table, const std::string& task, int arm) {
  auto it = table.find(task);
  if (it == table.end()) throw UnknownPreset("no stiffness preset for task '" + task + "'");
  if (arm < 0 || arm >= static_cast<int>(it->second.size())) {
    throw UnknownPreset("task '" + task + "' has no preset for arm " + std::to_string(arm));
  }
  return it->second[static_cast<std::size_t>(arm)].diagonal(mode);
}

ImplicitAxisResult implicit_impedance_axes(const Vector3d& v0, const Vector3d& error0, const Vector3d& k,
                                           const Vector3d& d, double m, double h, const Vector3d& f_ext,
                                           const Matrix3d& extra_damping, double saturation) {
  std::array<bool, 3> clamped{false, false, false};
  Vector3d held = Vector3d::Zero();
  ImplicitAxisResult r;
  for (int pass = 0; pass < 4; ++pass) {
    Matrix3d a = (m / h) * Matrix3d::Identity() + extra_damping;
    Vector3d rhs = (m / h) * v0 + f_ext;
    for (int i = 0; i < 3; ++i) {
      if (clamped[static_cast<std::size_t>(i)]) {
        rhs(i) += held(i);
      } else {
        a(i, i) += h * k(i) + d(i);
        rhs(i) += k(i) * error0(i);
      }
    }
    r.velocity = extra_damping.isZero(0.0) ? Vector3d(rhs.cwiseQuotient(a.diagonal())) : Vector3d(a.ldlt().solve(rhs));
    bool changed = false;
    for (int i = 0; i < 3; ++i) {
      if (clamped[static_cast<std::size_t>(i)]) {
        r.wrench(i) = held(i);
        continue;
      }
      r.wrench(i) = k(i) * (error0(i) - h * r.velocity(i)) - d(i) * r.velocity(i);
      if (std::abs(r.wrench(i)) > saturation) {
        clamped[static_cast<std::size_t>(i)] = true;
        held(i) = std::copysign(saturation, r.wrench(i));
        changed = true;
      }
    }
    if (!changed) break;
  }
  return r;
}

}  // namespace cdp
