#pragma once

// Random gradient-check cases for every differentiable autodiff op.

#include <random>
#include <string>
#include <vector>

#include "support/finite_difference.hpp"

namespace cdp::testing {

struct OpCase {
  Builder build;
  std::vector<MatD> inputs;
};

/// Reduces any output to a scalar with a fixed, non-symmetric projection so
/// every output entry contributes a distinct weight.
inline ad::Var<double> project(ad::Graph<double>& g, const ad::Var<double>& out) {
  MatD w(out.rows(), out.cols());
  for (Eigen::Index i = 0; i < w.rows(); ++i) {
    for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = std::sin(1.3 * i + 0.7 * j + 0.1) + 0.05 * (i - j);
  }
  return ad::mean(ad::mul(out, g.constant(w)));
}

inline MatD random_matrix(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  MatD m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

/// Entries bounded away from zero so kinks are not straddled by the stencil.
inline MatD away_from_zero(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c) {
  MatD m = random_matrix(rng, r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    double& x = m.data()[i];
    if (std::abs(x) < 1e-2) x = x < 0 ? -0.5 : 0.5;
  }
  return m;
}

inline const std::vector<std::string>& op_names() {
  static const std::vector<std::string> names = {
      "matmul",      "transpose",   "add",        "sub",       "mul",        "scale",     "add_rowwise",
      "mul_rowwise", "relu",        "gelu",       "softmax0",  "softmax1",   "layer_norm", "concat0",
      "concat1",     "slice0",      "slice1",     "embedding_lookup",      "tile_rows", "repeat_rows",
      "mean",        "sum_sq",      "attention",  "mlp3"};
  return names;
}

inline OpCase make_op_case(const std::string& op, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> dim(1, 5);
  const int r = dim(rng), c = dim(rng), k = dim(rng);
  using V = std::vector<ad::Var<double>>;
  using G = ad::Graph<double>;
  auto unary = [&](auto f, MatD x) {
    return OpCase{[f](G& g, const V& v) { return project(g, f(v[0])); }, {std::move(x)}};
  };
  auto binary = [&](auto f, MatD x, MatD y) {
    return OpCase{[f](G& g, const V& v) { return project(g, f(v[0], v[1])); }, {std::move(x), std::move(y)}};
  };

  if (op == "matmul") return binary([](auto a, auto b) { return ad::matmul(a, b); }, random_matrix(rng, r, k), random_matrix(rng, k, c));
  if (op == "transpose") return unary([](auto a) { return ad::transpose(a); }, random_matrix(rng, r, c));
  if (op == "add") return binary([](auto a, auto b) { return ad::add(a, b); }, random_matrix(rng, r, c), random_matrix(rng, r, c));
  if (op == "sub") return binary([](auto a, auto b) { return ad::sub(a, b); }, random_matrix(rng, r, c), random_matrix(rng, r, c));
  if (op == "mul") return binary([](auto a, auto b) { return ad::mul(a, b); }, random_matrix(rng, r, c), random_matrix(rng, r, c));
  if (op == "scale") {
    const double s = std::uniform_real_distribution<double>(-2.0, 2.0)(rng);
    return unary([s](auto a) { return ad::scale(a, s); }, random_matrix(rng, r, c));
  }
  if (op == "add_rowwise") return binary([](auto a, auto b) { return ad::add_rowwise(a, b); }, random_matrix(rng, r, c), random_matrix(rng, 1, c));
  if (op == "mul_rowwise") return binary([](auto a, auto b) { return ad::mul_rowwise(a, b); }, random_matrix(rng, r, c), random_matrix(rng, 1, c));
  if (op == "relu") return unary([](auto a) { return ad::relu(a); }, away_from_zero(rng, r, c));
  if (op == "gelu") return unary([](auto a) { return ad::gelu(a); }, random_matrix(rng, r, c, 2.0));
  if (op == "softmax0") return unary([](auto a) { return ad::softmax(a, 0); }, random_matrix(rng, r, c, 2.0));
  if (op == "softmax1") return unary([](auto a) { return ad::softmax(a, 1); }, random_matrix(rng, r, c, 2.0));
  if (op == "layer_norm") {
    // Width >= 2 so the variance is not identically zero.
    return unary([](auto a) { return ad::layer_norm(a); }, random_matrix(rng, r, c + 1));
  }
  if (op == "concat0" || op == "concat1") {
    const int axis = op == "concat0" ? 0 : 1;
    MatD a = random_matrix(rng, r, c), b = axis == 0 ? random_matrix(rng, k, c) : random_matrix(rng, r, k);
    return binary([axis](auto x, auto y) { return ad::concat({x, y}, axis); }, std::move(a), std::move(b));
  }
  if (op == "slice0" || op == "slice1") {
    const int axis = op == "slice0" ? 0 : 1;
    MatD a = random_matrix(rng, r + 2, c + 2);
    const int extent = axis == 0 ? r + 2 : c + 2;
    const int start = std::uniform_int_distribution<int>(0, extent - 1)(rng);
    const int len = std::uniform_int_distribution<int>(1, extent - start)(rng);
    return unary([axis, start, len](auto x) { return ad::slice(x, axis, start, len); }, std::move(a));
  }
  if (op == "embedding_lookup") {
    std::vector<int> idx;
    const int n = dim(rng) + 2;
    for (int i = 0; i < n; ++i) idx.push_back(std::uniform_int_distribution<int>(0, r - 1)(rng));
    return unary([idx](auto x) { return ad::embedding_lookup(x, idx); }, random_matrix(rng, r, c));
  }
  if (op == "tile_rows") return unary([k](auto a) { return ad::tile_rows(a, k); }, random_matrix(rng, r, c));
  if (op == "repeat_rows") return unary([k](auto a) { return ad::repeat_rows(a, k); }, random_matrix(rng, r, c));
  if (op == "mean") {
    return OpCase{[](G&, const V& v) { return ad::scale(ad::mean(v[0]), 3.0); }, {random_matrix(rng, r, c)}};
  }
  if (op == "sum_sq") return OpCase{[](G&, const V& v) { return ad::sum_sq(v[0]); }, {random_matrix(rng, r, c)}};
  if (op == "attention") {
    const int heads = std::uniform_int_distribution<int>(1, 2)(rng), batch = std::uniform_int_distribution<int>(1, 2)(rng);
    const int d = heads * (std::uniform_int_distribution<int>(1, 3)(rng));
    const int tq = dim(rng), tk = dim(rng);
    return OpCase{[heads, batch](G& g, const V& v) { return project(g, ad::attention(v[0], v[1], v[2], heads, batch)); },
                  {random_matrix(rng, batch * tq, d), random_matrix(rng, batch * tk, d), random_matrix(rng, batch * tk, d)}};
  }
  if (op == "mlp3") {
    // Three-layer MLP with every parameter as an input.
    const int h1 = dim(rng) + 1, h2 = dim(rng) + 1;
    return OpCase{[](G& g, const V& v) {
                    auto x = ad::gelu(ad::add_rowwise(ad::matmul(v[0], v[1]), v[2]));
                    x = ad::gelu(ad::add_rowwise(ad::matmul(x, v[3]), v[4]));
                    return project(g, ad::add_rowwise(ad::matmul(x, v[5]), v[6]));
                  },
                  {random_matrix(rng, r, c), random_matrix(rng, c, h1), random_matrix(rng, 1, h1),
                   random_matrix(rng, h1, h2), random_matrix(rng, 1, h2), random_matrix(rng, h2, k),
                   random_matrix(rng, 1, k)}};
  }
  throw std::invalid_argument("unknown op " + op);
}

}  // namespace cdp::testing
