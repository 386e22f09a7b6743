#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cdp/autodiff.hpp"
#include "cdp/errors.hpp"

namespace cdp {

enum class ScheduleKind { SquaredCosine, LinearBeta };

ScheduleKind parse_schedule_kind(const std::string& name);
std::string to_string(ScheduleKind kind);

/// Cumulative signal fractions alpha_bar[0..N] with alpha_bar[0] = 1.
struct NoiseSchedule {
  ScheduleKind kind = ScheduleKind::SquaredCosine;
  int steps = 0;
  std::vector<double> alpha_bar;

  double at(int n) const {
    if (n < 0 || n > steps) {
      throw StepOutOfRange("diffusion step " + std::to_string(n) + " outside [0, " + std::to_string(steps) + "]");
    }
    return alpha_bar[static_cast<std::size_t>(n)];
  }
};

NoiseSchedule build_schedule(ScheduleKind kind, int steps);

/// Evenly strided descending steps N = s_0 > s_1 > ... > s_k = 0 with k = n_infer.
std::vector<int> inference_timesteps(int train_steps, int n_infer);

/// Chunks are [H, A] (or batches of chunks stacked to [B * H, A]).
template <typename Scalar>
using ActionChunk = ad::Matrix<Scalar>;

template <typename Scalar, typename Rng>
ActionChunk<Scalar> gaussian_chunk(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  ActionChunk<Scalar> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(normal(rng));
  return m;
}

/// a_n = sqrt(alpha_bar[n]) a_0 + sqrt(1 - alpha_bar[n]) eps
template <typename Scalar>
ActionChunk<Scalar> forward_noise(const ActionChunk<Scalar>& a0, int n, const ActionChunk<Scalar>& eps,
                                  const NoiseSchedule& sched) {
  if (a0.rows() != eps.rows() || a0.cols() != eps.cols()) {
    throw ShapeMismatch("forward_noise: chunk " + ad::shape_string(a0.rows(), a0.cols()) + " vs noise " +
                        ad::shape_string(eps.rows(), eps.cols()));
  }
  const double ab = sched.at(n);
  return static_cast<Scalar>(std::sqrt(ab)) * a0 + static_cast<Scalar>(std::sqrt(1.0 - ab)) * eps;
}

/// Deterministic (eta = 0) DDIM update from step n to n_prev given the clean
/// estimate a0_hat.
template <typename Scalar>
ActionChunk<Scalar> ddim_step(const ActionChunk<Scalar>& a_n, const ActionChunk<Scalar>& a0_hat, int n, int n_prev,
                              const NoiseSchedule& sched) {
  if (!(0 <= n_prev && n_prev < n && n <= sched.steps)) {
    throw StepOrderViolation("ddim_step: need 0 <= n_prev < n <= N, got n=" + std::to_string(n) +
                             " n_prev=" + std::to_string(n_prev) + " N=" + std::to_string(sched.steps));
  }
  if (a_n.rows() != a0_hat.rows() || a_n.cols() != a0_hat.cols()) {
    throw ShapeMismatch("ddim_step: noisy " + ad::shape_string(a_n.rows(), a_n.cols()) + " vs estimate " +
                        ad::shape_string(a0_hat.rows(), a0_hat.cols()));
  }
  const double ab = sched.at(n);
  const double ab_prev = sched.at(n_prev);
  if (n_prev == 0 && ab_prev == 1.0) return a0_hat;
  ActionChunk<Scalar> eps_hat =
      (a_n - static_cast<Scalar>(std::sqrt(ab)) * a0_hat) / static_cast<Scalar>(std::sqrt(1.0 - ab));
  return static_cast<Scalar>(std::sqrt(ab_prev)) * a0_hat + static_cast<Scalar>(std::sqrt(1.0 - ab_prev)) * eps_hat;
}

/// DDIM sampling. `model(noisy, n)` returns the clean-chunk estimate.
template <typename Scalar, typename Model>
ActionChunk<Scalar> sample(Model&& model, const NoiseSchedule& sched, int n_infer, std::uint64_t seed,
                           Eigen::Index rows, Eigen::Index cols) {
  std::mt19937_64 rng(seed);
  ActionChunk<Scalar> a = gaussian_chunk<Scalar>(rows, cols, rng);
  const auto steps = inference_timesteps(sched.steps, n_infer);
  for (std::size_t i = 0; i + 1 < steps.size(); ++i) {
    const ActionChunk<Scalar> a0_hat = model(static_cast<const ActionChunk<Scalar>&>(a), steps[i]);
    a = ddim_step<Scalar>(a, a0_hat, steps[i], steps[i + 1], sched);
  }
  return a;
}

/// Clean-sample MSE: mean over all entries of (model(a_n) - a_0)^2.
///
/// `a0` and `eps` hold `steps.size()` chunks stacked along rows;
/// `model(graph, noisy, steps)` returns a Var of the same shape.
template <typename Scalar, typename Model>
ad::Var<Scalar> training_loss(ad::Graph<Scalar>& graph, const ActionChunk<Scalar>& a0, std::span<const int> steps,
                              const ActionChunk<Scalar>& eps, const NoiseSchedule& sched, Model&& model) {
  const auto batch = static_cast<Eigen::Index>(steps.size());
  if (batch == 0 || a0.rows() % batch != 0) throw ShapeMismatch("training_loss: rows not divisible by batch");
  const Eigen::Index h = a0.rows() / batch;
  ActionChunk<Scalar> noisy(a0.rows(), a0.cols());
  for (Eigen::Index b = 0; b < batch; ++b) {
    noisy.middleRows(b * h, h) = forward_noise<Scalar>(a0.middleRows(b * h, h), steps[static_cast<std::size_t>(b)],
                                                       eps.middleRows(b * h, h), sched);
  }
  ad::Var<Scalar> pred = model(graph, static_cast<const ActionChunk<Scalar>&>(noisy), steps);
  ad::Var<Scalar> diff = ad::sub(pred, graph.constant(a0));
  return ad::scale(ad::sum_sq(diff), Scalar(1) / static_cast<Scalar>(a0.size()));
}

}  // namespace cdp
