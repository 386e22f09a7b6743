#pragma once

// Monte-Carlo estimate of the forward-noise marginal.

#include <random>

#include "cdp/diffusion.hpp"

namespace cdp::testing {

struct ForwardMoments {
  double variance = 0.0;     ///< empirical variance of a_n over draws
  double alpha_bar_hat = 0.0;  ///< recovered from the variance
};

/// Clean samples ~ N(0, s^2), so Var(a_n) = alpha_bar s^2 + (1 - alpha_bar) and
/// alpha_bar = (Var - 1) / (s^2 - 1).
inline ForwardMoments forward_moments(const NoiseSchedule& sched, int n, double s, int draws, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int rows = 1000, cols = draws / rows;
  ad::Matrix<double> a0 = s * gaussian_chunk<double>(rows, cols, rng);
  const ad::Matrix<double> eps = gaussian_chunk<double>(rows, cols, rng);
  const ad::Matrix<double> an = forward_noise<double>(a0, n, eps, sched);
  const double mean = an.mean();
  ForwardMoments m;
  m.variance = (an.array() - mean).square().sum() / static_cast<double>(an.size() - 1);
  m.alpha_bar_hat = (m.variance - 1.0) / (s * s - 1.0);
  return m;
}

}  // namespace cdp::testing
