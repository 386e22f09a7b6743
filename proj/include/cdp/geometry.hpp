#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include <Eigen/Dense>

#include "cdp/errors.hpp"

namespace cdp {

template <typename Scalar>
using Vector3 = Eigen::Matrix<Scalar, 3, 1>;
template <typename Scalar>
using Vector6 = Eigen::Matrix<Scalar, 6, 1>;
template <typename Scalar>
using Vector9 = Eigen::Matrix<Scalar, 9, 1>;
template <typename Scalar>
using Matrix3 = Eigen::Matrix<Scalar, 3, 3>;

/// Rigid pose. The rotation is expected to satisfy is_rotation().
template <typename Scalar>
struct Pose {
  Vector3<Scalar> position = Vector3<Scalar>::Zero();
  Matrix3<Scalar> rotation = Matrix3<Scalar>::Identity();
};

/// Force (N) and torque (N·m) acting on a body, expressed in the world frame.
template <typename Scalar>
struct Wrench {
  Vector3<Scalar> force = Vector3<Scalar>::Zero();
  Vector3<Scalar> torque = Vector3<Scalar>::Zero();

  Vector6<Scalar> stacked() const {
    Vector6<Scalar> w;
    w << force, torque;
    return w;
  }
  static Wrench from_stacked(const Vector6<Scalar>& w) { return {w.template head<3>(), w.template tail<3>()}; }
};

using Posed = Pose<double>;
using Wrenchd = Wrench<double>;

template <typename Scalar>
bool is_rotation(const Matrix3<Scalar>& r, Scalar tolerance = Scalar(1e-9)) {
  if (!r.allFinite()) return false;
  const Scalar ortho = (r.transpose() * r - Matrix3<Scalar>::Identity()).cwiseAbs().maxCoeff();
  return ortho < tolerance && std::abs(r.determinant() - Scalar(1)) < tolerance;
}

template <typename Scalar>
Matrix3<Scalar> skew(const Vector3<Scalar>& v) {
  Matrix3<Scalar> s;
  s << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return s;
}

/// First two columns of R, concatenated.
template <typename Scalar>
Vector6<Scalar> rotmat_to_6d(const Matrix3<Scalar>& r, Scalar tolerance = Scalar(1e-9)) {
  if (!is_rotation(r, tolerance)) {
    std::ostringstream os;
    os << "rotmat_to_6d: matrix is not a proper rotation:\n" << r;
    throw InvalidRotation(os.str());
  }
  Vector6<Scalar> out;
  out << r.col(0), r.col(1);
  return out;
}

/// Gram-Schmidt recovery of a rotation from an unconstrained 6-vector.
template <typename Scalar>
Matrix3<Scalar> sixd_to_rotmat(const Vector6<Scalar>& r6) {
  constexpr Scalar kMinNorm = Scalar(1e-8);
  const Vector3<Scalar> a1 = r6.template head<3>();
  const Vector3<Scalar> a2 = r6.template tail<3>();
  const Scalar n1 = a1.norm();
  if (!(n1 > kMinNorm) || !(a2.norm() > kMinNorm)) {
    throw DegenerateRotation("sixd_to_rotmat: half-vector norm below 1e-8");
  }
  const Vector3<Scalar> b1 = a1 / n1;
  const Vector3<Scalar> u2 = a2 - b1.dot(a2) * b1;
  const Scalar n2 = u2.norm();
  // Relative test: parallel halves leave only round-off in u2.
  if (!(n2 > kMinNorm * a2.norm())) {
    throw DegenerateRotation("sixd_to_rotmat: halves are parallel");
  }
  const Vector3<Scalar> b2 = u2 / n2;
  Matrix3<Scalar> r;
  r << b1, b2, b1.cross(b2);
  return r;
}

/// Rodrigues exponential of a rotation vector.
template <typename Scalar>
Matrix3<Scalar> rotation_exp(const Vector3<Scalar>& w) {
  const Scalar theta = w.norm();
  const Matrix3<Scalar> k = skew(w);
  if (theta < Scalar(1e-12)) return Matrix3<Scalar>::Identity() + k;
  const Scalar a = std::sin(theta) / theta;
  const Scalar b = (Scalar(1) - std::cos(theta)) / (theta * theta);
  return Matrix3<Scalar>::Identity() + a * k + b * k * k;
}

/// Rotation vector (axis * angle) with angle in [0, pi].
///
/// At angle pi the axis is the unit eigenvector of R for eigenvalue 1 with its
/// largest-magnitude component made positive (first index wins ties).
template <typename Scalar>
Vector3<Scalar> rotation_log(const Matrix3<Scalar>& r) {
  const Vector3<Scalar> vee(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1));
  const Scalar cos_theta = std::clamp((r.trace() - Scalar(1)) / Scalar(2), Scalar(-1), Scalar(1));
  const Scalar vee_norm = vee.norm();
  const Scalar theta = std::atan2(vee_norm / Scalar(2), cos_theta);

  if (vee_norm < Scalar(1e-300)) {
    if (cos_theta > 0) return Vector3<Scalar>::Zero();
  } else if (cos_theta > Scalar(-0.5)) {
    if (theta < Scalar(1e-8)) return vee / Scalar(2);
    return vee * (theta / vee_norm);
  }

  // Near pi the antisymmetric part vanishes; read the axis off
  // (sym(R) - cos I) / (1 - cos) = a a^T.
  const Matrix3<Scalar> sym = (r + r.transpose()) / Scalar(2);
  const Matrix3<Scalar> aat = (sym - cos_theta * Matrix3<Scalar>::Identity()) / (Scalar(1) - cos_theta);
  Eigen::Index k = 0;
  aat.diagonal().maxCoeff(&k);
  Vector3<Scalar> axis = aat.col(k).normalized();
  if (vee_norm > Scalar(1e-12)) {
    if (axis.dot(vee) < 0) axis = -axis;
  } else {
    Eigen::Index big = 0;
    for (Eigen::Index i = 1; i < 3; ++i) {
      if (std::abs(axis(i)) > std::abs(axis(big)) + Scalar(1e-12)) big = i;
    }
    if (axis(big) < 0) axis = -axis;
  }
  return axis * theta;
}

/// [target.p - current.p ; log(target.R * current.R^T)].
template <typename Scalar>
Vector6<Scalar> pose_error(const Pose<Scalar>& current, const Pose<Scalar>& target) {
  Vector6<Scalar> e;
  e.template head<3>() = target.position - current.position;
  e.template tail<3>() = rotation_log<Scalar>(target.rotation * current.rotation.transpose());
  return e;
}

/// Network-facing pose encoding: [position ; 6D rotation].
template <typename Scalar>
Vector9<Scalar> pose_to_9d(const Pose<Scalar>& p) {
  Vector9<Scalar> v;
  v << p.position, p.rotation.col(0), p.rotation.col(1);
  return v;
}

template <typename Scalar>
Pose<Scalar> pose_from_9d(const Vector9<Scalar>& v) {
  return {v.template head<3>(), sixd_to_rotmat<Scalar>(v.template tail<6>())};
}

template <typename Scalar>
Matrix3<Scalar> rot_z(Scalar angle) {
  return Eigen::AngleAxis<Scalar>(angle, Vector3<Scalar>::UnitZ()).toRotationMatrix();
}

}  // namespace cdp
