#pragma once

// Force profile CSV rebuilt tick by tick from the raw episodes, sharing no
// code with the evaluation module.

#include <charconv>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "cdp/datastore.hpp"

namespace cdp::testing {

inline std::string shortest_decimal(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::string force_profile_csv_oracle(std::span<const Episode> eps, int arm = 0) {
  int longest = 0;
  for (const auto& e : eps) longest = std::max(longest, e.length());
  std::string out = "tick,mean_N,std_N\n";
  for (int t = 0; t < longest; ++t) {
    std::vector<double> xs;
    for (const auto& e : eps) {
      if (t < e.length()) xs.push_back(e.normal_force(t, arm));
    }
    double mean = 0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    double var = 0;
    for (double x : xs) var += (x - mean) * (x - mean);
    out += std::to_string(t) + "," + shortest_decimal(mean) + "," +
           shortest_decimal(std::sqrt(var / static_cast<double>(xs.size()))) + "\n";
  }
  return out;
}

}  // namespace cdp::testing
