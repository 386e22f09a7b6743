#include "cdp/evalkit.hpp"

#include <charconv>
#include <cmath>
#include <random>

namespace cdp {

namespace {

std::string format_number(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

void require_task(const Episode& ep, bool ok, const char* what) {
  if (!ok) throw TaskMismatch(std::string(what) + " on a " + to_string(ep.meta.task) + " episode");
}

}  // namespace

ForceProfile force_profile(std::span<const Episode> episodes, int arm) {
  if (episodes.empty()) throw EmptySet("force_profile: no episodes");
  int longest = 0;
  for (const auto& e : episodes) {
    if (arm < 0 || arm >= e.meta.n_arms) throw ShapeMismatch("force_profile: arm " + std::to_string(arm) + " out of range");
    longest = std::max(longest, e.length());
  }
  ForceProfile p;
  p.mean.assign(static_cast<std::size_t>(longest), 0.0);
  p.std.assign(static_cast<std::size_t>(longest), 0.0);
  p.count.assign(static_cast<std::size_t>(longest), 0);
  for (const auto& e : episodes) {
    for (int t = 0; t < e.length(); ++t) {
      p.mean[static_cast<std::size_t>(t)] += e.normal_force(t, arm);
      ++p.count[static_cast<std::size_t>(t)];
    }
  }
  for (int t = 0; t < longest; ++t) p.mean[static_cast<std::size_t>(t)] /= p.count[static_cast<std::size_t>(t)];
  for (const auto& e : episodes) {
    for (int t = 0; t < e.length(); ++t) {
      const double d = e.normal_force(t, arm) - p.mean[static_cast<std::size_t>(t)];
      p.std[static_cast<std::size_t>(t)] += d * d;
    }
  }
  for (int t = 0; t < longest; ++t) {
    p.std[static_cast<std::size_t>(t)] = std::sqrt(p.std[static_cast<std::size_t>(t)] / p.count[static_cast<std::size_t>(t)]);
  }
  return p;
}

std::string force_profile_csv(const ForceProfile& profile) {
  std::string out = "tick,mean_N,std_N\n";
  for (std::size_t t = 0; t < profile.mean.size(); ++t) {
    out += std::to_string(t) + "," + format_number(profile.mean[t]) + "," + format_number(profile.std[t]) + "\n";
  }
  return out;
}

double metric_fine_powder(const Episode& ep) {
  require_task(ep, ep.meta.task == TaskKind::Grind, "metric_fine_powder");
  return ep.meta.metric;
}

double metric_erased(const Episode& ep) {
  require_task(ep, ep.meta.task == TaskKind::Erase, "metric_erased");
  return ep.meta.metric;
}

bool metric_insertion(const Episode& ep) {
  require_task(ep, is_insertion(ep.meta.task), "metric_insertion");
  return ep.meta.success;
}

std::vector<MetricRow> episode_metrics(std::span<const Episode> episodes, std::span<const std::string> ids) {
  if (episodes.empty()) throw EmptySet("no episodes to evaluate");
  if (ids.size() != episodes.size()) throw ShapeMismatch("episode_metrics: one id per episode required");
  std::vector<MetricRow> rows;
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    const auto& e = episodes[i];
    MetricRow r;
    r.episode_id = ids[i];
    r.task = to_string(e.meta.task);
    switch (e.meta.task) {
      case TaskKind::Grind: r.metric = metric_fine_powder(e); break;
      case TaskKind::Erase: r.metric = metric_erased(e); break;
      default: r.metric = metric_insertion(e) ? 1.0 : 0.0; break;
    }
    r.success = e.meta.success;
    rows.push_back(std::move(r));
  }
  return rows;
}

EvalSummary summarize(std::span<const MetricRow> rows) {
  if (rows.empty()) throw EmptySet("no metric rows");
  EvalSummary s;
  s.count = static_cast<int>(rows.size());
  for (const auto& r : rows) {
    s.mean_metric += r.metric;
    s.success_rate += r.success ? 1.0 : 0.0;
  }
  s.mean_metric /= s.count;
  s.success_rate /= s.count;
  return s;
}

std::string metrics_csv(std::span<const MetricRow> rows) {
  std::string out = "episode_id,task,metric,success\n";
  for (const auto& r : rows) {
    out += r.episode_id + "," + r.task + "," + format_number(r.metric) + "," + (r.success ? "1" : "0") + "\n";
  }
  return out;
}

Observation bimodal_toy_observation(const DenoiserConfig& cfg) {
  ObservationFrame f;
  f.grid = Eigen::MatrixXd::Constant(cfg.grid_size, cfg.grid_size, 0.5);
  for (int a = 0; a < cfg.n_arms; ++a) {
    f.poses.push_back(Vector9d::Zero());
    f.wrenches.push_back(Vector6d::Zero());
  }
  return {f, f};
}

TrainBatch bimodal_toy_batch(const DenoiserConfig& cfg, int batch, double noise, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(0.5);
  std::normal_distribution<double> gauss(0.0, noise);
  const Observation obs = bimodal_toy_observation(cfg);
  TrainBatch b;
  b.actions.resize(static_cast<Eigen::Index>(batch) * cfg.horizon, cfg.action_width());
  for (int i = 0; i < batch; ++i) {
    const double mode = coin(rng) ? 1.0 : -1.0;
    for (int r = 0; r < cfg.horizon; ++r) {
      for (int c = 0; c < cfg.action_width(); ++c) {
        b.actions(static_cast<Eigen::Index>(i) * cfg.horizon + r, c) = static_cast<float>(mode + gauss(rng));
      }
    }
    b.observations.push_back(obs);
    b.picks.emplace_back(0, 0);
  }
  return b;
}

}  // namespace cdp
