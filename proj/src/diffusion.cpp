#include "cdp/diffusion.hpp"

#include <algorithm>
#include <numbers>

namespace cdp {

ScheduleKind parse_schedule_kind(const std::string& name) {
  if (name == "squared_cosine") return ScheduleKind::SquaredCosine;
  if (name == "linear") return ScheduleKind::LinearBeta;
  throw UnknownScheduleKind("unknown noise schedule '" + name + "' (expected squared_cosine or linear)");
}

std::string to_string(ScheduleKind kind) {
  return kind == ScheduleKind::SquaredCosine ? "squared_cosine" : "linear";
}

NoiseSchedule build_schedule(ScheduleKind kind, int steps) {
  if (steps < 2) throw InvalidConfig("noise schedule needs at least 2 steps, got " + std::to_string(steps));
  constexpr double kMaxBeta = 0.999;
  NoiseSchedule s;
  s.kind = kind;
  s.steps = steps;
  s.alpha_bar.assign(static_cast<std::size_t>(steps) + 1, 1.0);
  const double n_total = steps;

  std::vector<double> betas(static_cast<std::size_t>(steps) + 1, 0.0);
  if (kind == ScheduleKind::SquaredCosine) {
    constexpr double offset = 0.008;
    auto f = [&](double n) {
      const double c = std::cos((n / n_total + offset) / (1.0 + offset) * std::numbers::pi / 2.0);
      return c * c;
    };
    for (int n = 1; n <= steps; ++n) betas[static_cast<std::size_t>(n)] = std::min(1.0 - f(n) / f(n - 1), kMaxBeta);
  } else {
    // Endpoints scaled by 1000 / N so short schedules still reach alpha_bar[N] < 0.01.
    const double scale = 1000.0 / n_total;
    const double lo = 1e-4 * scale, hi = 0.02 * scale;
    for (int n = 1; n <= steps; ++n) {
      const double t = steps == 1 ? 0.0 : static_cast<double>(n - 1) / (n_total - 1.0);
      betas[static_cast<std::size_t>(n)] = std::min(lo + t * (hi - lo), kMaxBeta);
    }
  }
  for (int n = 1; n <= steps; ++n) {
    const auto i = static_cast<std::size_t>(n);
    s.alpha_bar[i] = s.alpha_bar[i - 1] * (1.0 - betas[i]);
  }
  return s;
}

std::vector<int> inference_timesteps(int train_steps, int n_infer) {
  if (n_infer < 1 || n_infer > train_steps) {
    throw StepOutOfRange("inference step count " + std::to_string(n_infer) + " outside [1, " +
                         std::to_string(train_steps) + "]");
  }
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(n_infer) + 1);
  for (int k = 0; k <= n_infer; ++k) {
    const double v = static_cast<double>(train_steps) * static_cast<double>(n_infer - k) / n_infer;
    out.push_back(static_cast<int>(std::lround(v)));
  }
  return out;
}

}  // namespace cdp
