#pragma once

// Central finite-difference gradient oracle, independent of the backward rules.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "cdp/autodiff.hpp"

namespace cdp::testing {

using MatD = ad::Matrix<double>;
using Builder = std::function<ad::Var<double>(ad::Graph<double>&, const std::vector<ad::Var<double>>&)>;

inline double evaluate(const Builder& build, const std::vector<MatD>& inputs) {
  ad::Graph<double> g(false);
  std::vector<ad::Var<double>> vars;
  for (const auto& m : inputs) vars.push_back(g.constant(m));
  return build(g, vars).value()(0, 0);
}

inline std::vector<MatD> analytic_gradients(const Builder& build, const std::vector<MatD>& inputs) {
  ad::Graph<double> g;
  std::vector<ad::Var<double>> vars;
  for (const auto& m : inputs) vars.push_back(g.leaf(m));
  auto loss = build(g, vars);
  g.backward(loss);
  std::vector<MatD> out;
  for (const auto& v : vars) out.push_back(v.grad());
  return out;
}

inline std::vector<MatD> numeric_gradients(const Builder& build, std::vector<MatD> inputs, double eps = 1e-5) {
  std::vector<MatD> out;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    MatD grad(inputs[k].rows(), inputs[k].cols());
    for (Eigen::Index i = 0; i < inputs[k].size(); ++i) {
      const double x = inputs[k].data()[i];
      inputs[k].data()[i] = x + eps;
      const double up = evaluate(build, inputs);
      inputs[k].data()[i] = x - eps;
      const double down = evaluate(build, inputs);
      inputs[k].data()[i] = x;
      grad.data()[i] = (up - down) / (2 * eps);
    }
    out.push_back(grad);
  }
  return out;
}

/// Largest relative error ||g - g_fd|| / max(||g||, ||g_fd||, floor) over inputs.
inline double gradient_error(const Builder& build, const std::vector<MatD>& inputs, double floor = 1e-6) {
  const auto a = analytic_gradients(build, inputs);
  const auto n = numeric_gradients(build, inputs);
  double worst = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double scale = std::max({a[k].norm(), n[k].norm(), floor});
    worst = std::max(worst, (a[k] - n[k]).norm() / scale);
  }
  return worst;
}

}  // namespace cdp::testing
