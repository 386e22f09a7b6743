#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "cdp/datastore.hpp"

using namespace cdp;

namespace {

Episode synthetic(TaskKind task, int length, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, 1.0f);
  auto fill = [&](Eigen::MatrixXf& m, Eigen::Index rows, Eigen::Index cols) {
    m.resize(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  };
  Episode e;
  e.meta.task = task;
  e.meta.seed = seed;
  e.meta.n_arms = arm_count(task);
  e.meta.date = "2024-01-02";
  const auto table = default_presets();
  for (int a = 0; a < e.meta.n_arms; ++a) e.meta.presets.push_back(table.at(to_string(task)).at(a));
  const int a = e.meta.n_arms;
  fill(e.pose, length, kPoseDim * a);
  fill(e.wrench, length, kWrenchDim * a);
  fill(e.grid, length, e.meta.grid_size * e.meta.grid_size);
  fill(e.action, length, kActionDim * a);
  fill(e.normal_force, length, a);
  fill(e.progress, length, 1);
  return e;
}

// Welford's running mean / variance, independent of the two-pass fit.
struct Running {
  long n = 0;
  double mean = 0, m2 = 0;
  void add(double x) {
    ++n;
    const double d = x - mean;
    mean += d / n;
    m2 += d * (x - mean);
  }
  double std() const { return std::sqrt(m2 / n); }
};

std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("cdp_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST_SUITE("datastore") {
  TEST_CASE("encode / decode round trip is bit exact") {
    auto e = synthetic(TaskKind::InsertCuboid, 17, 3);
    e.meta.success = true;
    e.meta.metric = -0.0123;
    e.meta.source = EpisodeSource::Human;
    const std::string bytes = encode_episode(e);
    CHECK(bytes.substr(0, 4) == "CDPE");
    const Episode back = decode_episode(bytes);
    CHECK(back == e);
    CHECK(encode_episode(back) == bytes);
  }

  TEST_CASE("file round trip") {
    const auto dir = scratch_dir("file");
    std::filesystem::create_directories(dir);
    const auto e = synthetic(TaskKind::Grind, 9, 1);
    write_episode(dir / "x.ep", e);
    CHECK(read_episode(dir / "x.ep") == e);
    std::filesystem::remove_all(dir);
  }

  TEST_CASE("truncation and corruption") {
    const auto e = synthetic(TaskKind::Erase, 12, 4);
    const std::string bytes = encode_episode(e);
    for (std::size_t cut : {std::size_t{2}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
      try {
        decode_episode(std::string_view(bytes).substr(0, cut));
        FAIL("truncated file decoded");
      } catch (const CorruptFile& err) {
        CHECK(err.category() == "format.corrupt_file");
        CHECK(err.offset() <= cut);
      }
    }
    CHECK_THROWS_AS(decode_episode(bytes + "x"), CorruptFile);
    std::string bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS_AS(decode_episode(bad), CorruptFile);
  }

  TEST_CASE("unknown version") {
    std::string bytes = encode_episode(synthetic(TaskKind::Erase, 3, 4));
    bytes[4] = static_cast<char>(kEpisodeVersion + 1);
    CHECK_THROWS_AS(decode_episode(bytes), VersionMismatch);
  }

  TEST_CASE("inconsistent arrays are rejected before writing") {
    auto e = synthetic(TaskKind::Grind, 5, 4);
    e.wrench.conservativeResize(4, Eigen::NoChange);
    CHECK_THROWS_AS(e.validate(), CorruptFile);
    CHECK_THROWS_AS(encode_episode(e), CorruptFile);
  }

  TEST_CASE("dataset directory layout and total ticks") {
    const auto dir = scratch_dir("layout");
    Dataset d;
    long expected = 0;
    for (int i = 0; i < 60; ++i) {
      d.episodes.push_back(synthetic(TaskKind::Grind, 5 + i % 7, static_cast<std::uint64_t>(i)));
      expected += 5 + i % 7;
    }
    CHECK(d.total_ticks() == expected);
    const auto paths = write_dataset(dir, d);
    REQUIRE(paths.size() == 60);
    CHECK(paths[0] == dir / "grind" / "ep_00000.ep");
    const Dataset back = load_dataset(dir);
    CHECK(back.total_ticks() == expected);
    REQUIRE(back.episodes.size() == 60);
    for (int i = 0; i < 60; ++i) CHECK(back.episodes[i] == d.episodes[i]);
    CHECK(load_dataset(dir / "missing").empty());
    std::filesystem::remove_all(dir);
  }

  TEST_CASE("stats: two-pass fit agrees with a running oracle; constant dims flagged") {
    Dataset d;
    for (int i = 0; i < 6; ++i) d.episodes.push_back(synthetic(TaskKind::Grind, 20 + 3 * i, 100 + i));
    // Two-valued stiffness, constant gripper.
    for (auto& e : d.episodes) {
      for (int t = 0; t < e.length(); ++t) {
        const bool low = (t / 4) % 2 == 0;
        for (int j = 0; j < 3; ++j) e.action(t, 10 + j) = low ? 300.0f : 800.0f;
        for (int j = 3; j < 6; ++j) e.action(t, 10 + j) = low ? 10.0f : 50.0f;
        e.action(t, 9) = 0.0f;
        e.pose(t, 2) = 0.25f;
      }
    }
    const auto s = compute_stats(d);
    CHECK(s.n_arms() == 1);
    CHECK(s.action[10].kind == NormKind::MinMax);
    CHECK(s.action[10].a == 300.0);
    CHECK(s.action[10].b == 800.0);
    CHECK(s.action[13].a == 10.0);
    CHECK(s.action[13].b == 50.0);
    CHECK(s.action[10].normalize(300.0) == doctest::Approx(-1.0));
    CHECK(s.action[10].normalize(800.0) == doctest::Approx(1.0));
    CHECK(s.action[9].constant);
    CHECK(s.pose[2].constant);
    CHECK(s.pose[2].normalize(0.25) == 0.0);
    CHECK(s.pose[2].denormalize(0.0) == doctest::Approx(0.25));
    for (int j = 0; j < kActionDim; ++j) {
      if (action_norm_kind(j) != NormKind::ZScore) continue;
      Running r;
      for (const auto& e : d.episodes) {
        for (int t = 0; t < e.length(); ++t) r.add(e.action(t, j));
      }
      CHECK(s.action[j].a == doctest::Approx(r.mean).epsilon(1e-12));
      CHECK(s.action[j].b == doctest::Approx(r.std()).epsilon(1e-10));
    }
    for (int j = 0; j < kWrenchDim; ++j) {
      Running r;
      for (const auto& e : d.episodes) {
        for (int t = 0; t < e.length(); ++t) r.add(e.wrench(t, j));
      }
      CHECK(s.wrench[j].a == doctest::Approx(r.mean).epsilon(1e-12));
      CHECK(s.wrench[j].b == doctest::Approx(r.std()).epsilon(1e-10));
    }
    CHECK_THROWS_AS(compute_stats(Dataset{}), EmptyDataset);
  }

  TEST_CASE("chunks past the episode end repeat the last action") {
    Dataset d;
    d.episodes.push_back(synthetic(TaskKind::Erase, 10, 1));
    const auto stats = compute_stats(d);
    SampleSource src(d, stats);
    const Eigen::MatrixXf c = src.chunk(0, 7, 6);
    const Eigen::VectorXd last = stats.normalize_action(d.episodes[0].action_at(9));
    for (int i = 0; i < 6; ++i) {
      const int t = std::min(7 + i, 9);
      const Eigen::VectorXd want = stats.normalize_action(d.episodes[0].action_at(t));
      CHECK((c.row(i).transpose().cast<double>() - want).cwiseAbs().maxCoeff() < 1e-5);
    }
    CHECK((c.row(5).transpose().cast<double>() - last).cwiseAbs().maxCoeff() < 1e-5);
  }

  TEST_CASE("batches are reproducible per seed and normalized") {
    Dataset d;
    for (int i = 0; i < 3; ++i) d.episodes.push_back(synthetic(TaskKind::Erase, 30, i));
    const auto stats = compute_stats(d);
    const auto a = sample_batch(d, stats, 8, 4, 42);
    const auto b = sample_batch(d, stats, 8, 4, 42);
    const auto c = sample_batch(d, stats, 8, 4, 43);
    CHECK(a.picks == b.picks);
    CHECK(a.actions == b.actions);
    CHECK(a.picks != c.picks);
    CHECK(a.actions.rows() == 32);
    CHECK(a.actions.cols() == kActionDim);
    REQUIRE(a.observations.size() == 8);
    const auto [e, t] = a.picks[3];
    const Observation want = stats.normalize(d.episodes[e].observation(t));
    CHECK((a.observations[3].current.poses[0] - want.current.poses[0]).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((a.observations[3].previous.wrenches[0] - want.previous.wrenches[0]).cwiseAbs().maxCoeff() < 1e-12);
  }

  TEST_CASE("sampling is uniform over ticks (chi-square)") {
    Dataset d;
    const int lengths[] = {5, 10, 20};
    for (int i = 0; i < 3; ++i) d.episodes.push_back(synthetic(TaskKind::Erase, lengths[i], i));
    SampleSource src(d, compute_stats(d));
    std::vector<long> counts(35, 0);
    long draws = 0;
    for (int s = 0; s < 100; ++s) {
      const auto b = src.sample(1000, 1, static_cast<std::uint64_t>(s));
      for (auto [e, t] : b.picks) {
        const int offset = e == 0 ? 0 : e == 1 ? 5 : 15;
        ++counts[static_cast<std::size_t>(offset + t)];
        ++draws;
      }
    }
    CHECK(draws == 100000);
    const double expected = draws / 35.0;
    double chi2 = 0;
    for (long c : counts) chi2 += (c - expected) * (c - expected) / expected;
    // 34 degrees of freedom; 65.25 is the 0.999 quantile.
    CHECK(chi2 < 65.25);
  }
}
