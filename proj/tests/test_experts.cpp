#include <doctest.h>

#include <regex>
#include <set>

#include "cdp/experts.hpp"

using namespace cdp;

namespace {

ExpertConfig quiet() {
  ExpertConfig c;
  c.position_noise = 0;
  c.rotation_noise = 0;
  c.timing_jitter = 0;
  return c;
}

struct Trace {
  std::vector<std::string> phases;  // run-length compressed
  std::vector<Vector3d> targets;
};

Trace trace(TaskKind task, const ExpertConfig& cfg, std::uint64_t seed, int ticks) {
  SceneConfig scene;
  auto ex = make_expert(task, cfg, default_presets(), scene);
  Env env(task, scene, ControllerConfig{}, seed);
  Trace t;
  for (int i = 0; i < ticks && !ex->finished(); ++i) {
    auto cmds = ex->act(env.state());
    if (t.phases.empty() || t.phases.back() != ex->phase()) t.phases.push_back(ex->phase());
    t.targets.push_back(cmds[0].target.position);
    env.tick(cmds);
  }
  return t;
}

}  // namespace

TEST_SUITE("experts") {
  TEST_CASE("grind orbit traces the configured circle with the low preset") {
    SceneConfig scene;
    ExpertConfig cfg = quiet();
    const auto presets = default_presets();
    auto ex = make_expert(TaskKind::Grind, cfg, presets, scene);
    Env env(TaskKind::Grind, scene, ControllerConfig{}, 3);
    const Vector6d low = set_stiffness_mode(StiffnessMode::Low, presets, "grind");
    const Vector6d high = set_stiffness_mode(StiffnessMode::High, presets, "grind");
    CHECK(low(0) == 300);
    CHECK(high(0) == 800);
    int orbit_ticks = 0, approach_ticks = 0;
    for (int t = 0; t < 700; ++t) {
      auto cmds = ex->act(env.state());
      const std::string phase = ex->phase();
      const ArmCommand& c = cmds[0];
      if (phase == "orbit") {
        ++orbit_ticks;
        CHECK(c.stiffness == low);
        CHECK(c.target.position.head<2>().norm() == doctest::Approx(cfg.orbit_radius).epsilon(1e-9));
      }
      if (phase == "approach" || phase == "move_out") {
        ++approach_ticks;
        CHECK(c.stiffness == high);
      }
      env.tick(cmds);
    }
    CHECK(orbit_ticks > 200);
    CHECK(approach_ticks > 10);
  }

  TEST_CASE("two seeds give distinct trajectories with the same phase structure") {
    const ExpertConfig cfg;
    ExpertConfig a = cfg, b = cfg;
    a.seed = 1;
    b.seed = 2;
    const auto ta = trace(TaskKind::Erase, a, 1, 2000);
    const auto tb = trace(TaskKind::Erase, b, 2, 2000);
    // The number of strokes depends on what is left on the board; the cycle does not.
    const std::regex cycle("approach press (stroke lift return press )*stroke lift home idle done ");
    auto joined = [](const Trace& t) {
      std::string s;
      for (const auto& p : t.phases) s += p + " ";
      return s;
    };
    CHECK(std::regex_match(joined(ta), cycle));
    CHECK(std::regex_match(joined(tb), cycle));
    const std::size_t n = std::min(ta.targets.size(), tb.targets.size());
    double dist = 0;
    for (std::size_t i = 0; i < n; ++i) dist = std::max(dist, (ta.targets[i] - tb.targets[i]).norm());
    CHECK(dist > 1e-4);
  }

  TEST_CASE("wrong task state") {
    SceneConfig scene;
    auto ex = make_expert(TaskKind::Erase, ExpertConfig{}, default_presets(), scene);
    const auto s = initial_state(TaskKind::Grind, scene, 0);
    CHECK_THROWS_AS(ex->act(s), TaskMismatch);
    CHECK_THROWS_AS(expert_action(*ex, s, TaskKind::Erase), TaskMismatch);
  }

  TEST_CASE("config validation") {
    ExpertConfig c;
    c.position_noise = -1;
    CHECK_THROWS_AS(c.validate(), InvalidConfig);
  }

  TEST_CASE("grind expert reaches 0.7 fine fraction in 80 s") {
    const auto r = run_expert(TaskKind::Grind, ExpertConfig{}, default_presets(), SceneConfig{}, ControllerConfig{}, 11);
    CHECK(r.episode.length() == 4000);
    CHECK(fine_fraction(r.final_state) >= 0.7);
    CHECK(r.success);
  }

  TEST_CASE("erase: one stroke reduces the swept cells, repeated strokes clear 95%") {
    SceneConfig scene;
    ExpertConfig cfg;
    cfg.erase_max_strokes = 1;
    const auto one = run_expert(TaskKind::Erase, cfg, default_presets(), scene, ControllerConfig{}, 4);
    const auto& s = one.final_state.erase;
    const Eigen::MatrixXd before = s.initial;
    bool strictly = true;
    for (int c = scene.mark_col_begin; c <= scene.mark_col_end; ++c) {
      for (int r = scene.mark_row_begin; r <= scene.mark_row_end; ++r) strictly &= s.marks(r, c) < before(r, c);
    }
    CHECK(strictly);
    const auto full = run_expert(TaskKind::Erase, ExpertConfig{}, default_presets(), scene, ControllerConfig{}, 4);
    CHECK(erased_fraction(full.final_state) >= 0.95);
    CHECK_FALSE(full.final_state.erase.damaged);
  }

  TEST_CASE("insertion expert succeeds in at least 19 of 20 randomized scenes") {
    for (auto task : {TaskKind::InsertRound, TaskKind::InsertCuboid}) {
      int ok = 0;
      for (int i = 0; i < 20; ++i) {
        ok += run_expert(task, ExpertConfig{}, default_presets(), SceneConfig{}, ControllerConfig{},
                         episode_seed(5, i, 0))
                  .success;
      }
      CHECK(ok >= 19);
    }
  }

  TEST_CASE("collected demos: success only, presets exact, deterministic") {
    SceneConfig scene;
    const auto presets = default_presets();
    CollectOptions opts;
    opts.episodes = 3;
    opts.seed = 9;
    opts.date = "2024-05-01";
    const auto data = collect_demos(TaskKind::InsertRound, opts, ExpertConfig{}, presets, scene, ControllerConfig{});
    REQUIRE(data.episodes.size() == 3);
    std::set<std::vector<float>> allowed;
    for (int arm = 0; arm < 2; ++arm) {
      for (auto m : {StiffnessMode::Low, StiffnessMode::High}) {
        const Vector6d k = set_stiffness_mode(m, presets, "insert_round", arm);
        allowed.insert({float(k(0)), float(k(1)), float(k(2)), float(k(3)), float(k(4)), float(k(5))});
      }
    }
    for (const auto& e : data.episodes) {
      CHECK(e.meta.success);
      CHECK(e.meta.source == EpisodeSource::Expert);
      CHECK(e.meta.date == "2024-05-01");
      for (int t = 0; t < e.length(); ++t) {
        for (int arm = 0; arm < 2; ++arm) {
          std::vector<float> k;
          for (int j = 0; j < 6; ++j) k.push_back(e.action(t, arm * kActionDim + 10 + j));
          CHECK(allowed.count(k) == 1);
        }
      }
    }
    const auto again = collect_demos(TaskKind::InsertRound, opts, ExpertConfig{}, presets, scene, ControllerConfig{});
    for (std::size_t i = 0; i < data.episodes.size(); ++i) {
      CHECK(encode_episode(data.episodes[i]) == encode_episode(again.episodes[i]));
    }
    opts.episodes = 0;
    CHECK(collect_demos(TaskKind::Grind, opts, ExpertConfig{}, presets, scene, ControllerConfig{}).empty());
  }

  TEST_CASE("an expert that cannot succeed raises ExpertFailure") {
    SceneConfig scene;
    scene.grind_success = 1.01;  // unreachable
    CollectOptions opts;
    opts.episodes = 1;
    opts.max_attempts = 1;
    opts.max_ticks = 50;
    std::vector<std::string> logged;
    CHECK_THROWS_AS(collect_demos(TaskKind::Grind, opts, ExpertConfig{}, default_presets(), scene, ControllerConfig{},
                                  [&](const std::string& m) { logged.push_back(m); }),
                    ExpertFailure);
    CHECK(logged.size() == 1);
  }
}
