// Finds the grind and erase rate constants that make the scripted experts
// reach their targets, then prints them as a config fragment.
#include <cstdio>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "cdp/config.hpp"
#include "cdp/experts.hpp"

using namespace cdp;

namespace {

struct Outcome {
  double mean = 0.0;
  double worst = 1.0;
};

Outcome run(const RunConfig& cfg, TaskKind task, int seeds) {
  Outcome o;
  for (int s = 0; s < seeds; ++s) {
    const auto r = run_expert(task, cfg.expert, cfg.presets, cfg.scene, cfg.controller, episode_seed(99, s, 0));
    const double m = task_metric(r.final_state, cfg.scene);
    o.mean += m / seeds;
    o.worst = std::min(o.worst, m);
  }
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"calibrate task rate constants against the scripted experts"};
  std::string config;
  double grind_target = 0.76;
  int seeds = 5, iterations = 12, erase_strokes = 2;
  app.add_option("--config", config, "run config (JSON)");
  app.add_option("--grind-target", grind_target, "mean fine fraction the grind expert should reach");
  app.add_option("--erase-strokes", erase_strokes, "strokes the erase expert should need");
  app.add_option("--seeds", seeds, "episodes per evaluation");
  app.add_option("--iterations", iterations, "bisection steps");
  CLI11_PARSE(app, argc, argv);

  try {
    RunConfig cfg = config.empty() ? RunConfig{} : load_run_config(config);

    // Fine fraction grows monotonically with the grind rate.
    double lo = 0.0, hi = 1.0;
    for (int i = 0; i < iterations; ++i) {
      cfg.scene.grind_rate = 0.5 * (lo + hi);
      (run(cfg, TaskKind::Grind, seeds).mean < grind_target ? lo : hi) = cfg.scene.grind_rate;
    }
    cfg.scene.grind_rate = hi;
    const Outcome grind = run(cfg, TaskKind::Grind, seeds);
    std::fprintf(stderr, "grind_rate %.5f: mean fine %.4f, worst %.4f\n", cfg.scene.grind_rate, grind.mean,
                 grind.worst);

    // Smallest erase rate at which the expert finishes within the stroke budget.
    cfg.expert.erase_max_strokes = erase_strokes;
    lo = 0.0;
    hi = 20.0;
    for (int i = 0; i < iterations; ++i) {
      cfg.scene.erase_rate = 0.5 * (lo + hi);
      (run(cfg, TaskKind::Erase, seeds).worst < cfg.expert.erase_done ? lo : hi) = cfg.scene.erase_rate;
    }
    cfg.scene.erase_rate = hi;
    const Outcome erase = run(cfg, TaskKind::Erase, seeds);
    std::fprintf(stderr, "erase_rate %.5f: mean erased %.4f, worst %.4f after %d strokes\n", cfg.scene.erase_rate,
                 erase.mean, erase.worst, erase_strokes);

    std::cout << nlohmann::json{{"scene", {{"grind_rate", cfg.scene.grind_rate}, {"erase_rate", cfg.scene.erase_rate}}}}
                     .dump(2)
              << '\n';
  } catch (const Error& e) {
    std::cerr << "error: " << e.category() << ": " << e.what() << '\n';
    return e.category().rfind("config.", 0) == 0 ? 2 : 1;
  }
  return 0;
}
