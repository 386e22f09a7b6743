#pragma once

// Chunk streams for ensemble checks, plus a naive "newest chunk wins" executor
// to compare against.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "cdp/policy.hpp"

namespace cdp::testing {

struct ChunkStream {
  int horizon = 48;
  int replan = 16;
  std::vector<Eigen::MatrixXd> chunks;  ///< chunk k is born at k * replan
  long ticks() const { return static_cast<long>(chunks.size()) * replan; }
};

/// Constant chunks alternating between two values.
inline ChunkStream disagreeing_chunks(int n_chunks = 8, int width = 1, double lo = 0.0, double hi = 1.0) {
  ChunkStream s;
  for (int k = 0; k < n_chunks; ++k) {
    s.chunks.push_back(Eigen::MatrixXd::Constant(s.horizon, width, k % 2 == 0 ? lo : hi));
  }
  return s;
}

inline ChunkStream random_chunks(std::mt19937_64& rng, int horizon, int replan, int n_chunks, int width) {
  std::normal_distribution<double> n(0.0, 1.0);
  ChunkStream s;
  s.horizon = horizon;
  s.replan = replan;
  for (int k = 0; k < n_chunks; ++k) {
    Eigen::MatrixXd c(horizon, width);
    for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] = n(rng);
    s.chunks.push_back(c);
  }
  return s;
}

/// Per-tick outputs of the ensemble over the whole stream.
inline std::vector<Eigen::VectorXd> ensembled(const ChunkStream& s, double decay) {
  EnsembleBuffer buf(s.horizon, s.replan, decay);
  std::vector<Eigen::VectorXd> out;
  for (long t = 0; t < s.ticks(); ++t) {
    if (t % s.replan == 0) buf.add(s.chunks[static_cast<std::size_t>(t / s.replan)], t);
    out.push_back(ensemble_action(buf, t));
  }
  return out;
}

/// Each tick reads the most recent chunk only.
inline std::vector<Eigen::VectorXd> newest_only(const ChunkStream& s) {
  std::vector<Eigen::VectorXd> out;
  for (long t = 0; t < s.ticks(); ++t) {
    const long k = t / s.replan;
    out.push_back(s.chunks[static_cast<std::size_t>(k)].row(t - k * s.replan).transpose());
  }
  return out;
}

inline double max_jump(const std::vector<Eigen::VectorXd>& seq) {
  double m = 0.0;
  for (std::size_t i = 1; i < seq.size(); ++i) m = std::max(m, (seq[i] - seq[i - 1]).cwiseAbs().maxCoeff());
  return m;
}

}  // namespace cdp::testing
