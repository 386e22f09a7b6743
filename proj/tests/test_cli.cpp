#include <doctest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>
#include <sys/wait.h>

#include <json.hpp>

#include "cdp/datastore.hpp"
#include "cdp/io.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string output;  ///< stdout and stderr
};

Run run_cli(const std::string& args) {
  const std::string cmd = std::string(CDP_CLI_PATH) + " " + args + " 2>&1";
  Run r;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::array<char, 4096> buf{};
  std::size_t n;
  while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) r.output.append(buf.data(), n);
  const int status = ::pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

fs::path fresh_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("cdp_cli_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) { return cdp::io::read_file(p); }

std::vector<fs::path> files_under(const fs::path& root) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file() && e.path().extension() == ".ep") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

// Small model so a few hundred steps finish in seconds.
fs::path small_config(const fs::path& dir) {
  const auto path = dir / "small.json";
  std::ofstream(path) << R"({"date": "2024-01-01",
    "model": {"d_model": 32, "n_heads": 2, "n_encoder_layers": 1, "n_decoder_layers": 1, "horizon": 16,
              "n_diffusion_steps": 20},
    "train": {"batch": 16, "warmup": 20, "lr": 0.001, "log_every": 50},
    "rollout": {"replan_interval": 8, "n_infer": 4, "max_ticks": 60},
    "eval": {"episodes": 2}})";
  return path;
}

std::vector<double> logged_losses(const fs::path& log) {
  std::vector<double> out;
  std::istringstream in(slurp(log));
  std::string line;
  const std::regex re(R"(step \d+ loss ([0-9.eE+-]+))");
  std::smatch m;
  while (std::getline(in, line)) {
    if (std::regex_search(line, m, re)) out.push_back(std::stod(m[1]));
  }
  return out;
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("collect writes one file per episode") {
    const auto dir = fresh_dir("collect");
    const auto r = run_cli("collect --task grind --episodes 2 --expert --seed 7 --out " + (dir / "demos").string());
    CHECK(r.code == 0);
    const auto files = files_under(dir / "demos");
    REQUIRE(files.size() == 2);
    CHECK(files[0].filename() == "ep_00000.ep");
    for (const auto& f : files) {
      const auto ep = cdp::read_episode(f);
      CHECK(ep.meta.task == cdp::TaskKind::Grind);
      CHECK(ep.meta.success);
      CHECK(ep.meta.source == cdp::EpisodeSource::Expert);
    }
    CHECK(fs::exists(dir / "demos" / "config.json"));
    fs::remove_all(dir);
  }

  TEST_CASE("usage and configuration errors exit with 2") {
    const auto dir = fresh_dir("errors");
    auto r = run_cli("collect --task juggle --episodes 1 --expert --out " + dir.string());
    CHECK(r.code == 2);
    CHECK(r.output.find("error: config.unknown_task") != std::string::npos);
    r = run_cli("collect --episodes 1");
    CHECK(r.code == 2);
    CHECK(r.output.find("error: config.usage") != std::string::npos);
    std::ofstream(dir / "bad.json") << R"({"train": {"stepz": 3}})";
    r = run_cli("collect --task erase --expert --config " + (dir / "bad.json").string() + " --out " + dir.string());
    CHECK(r.code == 2);
    CHECK(r.output.find("error: config.invalid") != std::string::npos);
    r = run_cli("eval --episodes " + (dir / "nothing").string() + " --out " + dir.string());
    CHECK(r.code == 1);
    CHECK(r.output.find("error: eval.empty_set") != std::string::npos);
    fs::remove_all(dir);
  }

  TEST_CASE("collect, train, rollout and eval are reproducible; training lowers the loss") {
    const auto dir = fresh_dir("pipeline");
    const auto cfg = small_config(dir).string();
    auto pipeline = [&](const std::string& tag) {
      const auto d = dir / tag;
      REQUIRE(run_cli("collect --task erase --episodes 5 --expert --seed 3 --config " + cfg + " --out " +
                  (d / "demos").string())
                  .code == 0);
      REQUIRE(run_cli("train --config " + cfg + " --data " + (d / "demos").string() + " --steps 300 --seed 1 --out " +
                  (d / "run").string())
                  .code == 0);
      REQUIRE(run_cli("rollout --task erase --weights " + (d / "run" / "policy.ckpt").string() + " --seed 11 --out " +
                  (d / "rollouts").string())
                  .code == 0);
      const auto r = run_cli("eval --episodes " + (d / "rollouts").string() + " --out " + (d / "eval").string());
      REQUIRE(r.code == 0);
      CHECK(r.output.find("2 episodes") != std::string::npos);
      return d;
    };
    const auto a = pipeline("a");
    const auto b = pipeline("b");

    const auto da = files_under(a / "demos"), db = files_under(b / "demos");
    REQUIRE(da.size() == 5);
    REQUIRE(db.size() == 5);
    for (std::size_t i = 0; i < da.size(); ++i) CHECK(slurp(da[i]) == slurp(db[i]));
    CHECK(slurp(a / "run" / "policy.ckpt") == slurp(b / "run" / "policy.ckpt"));
    const auto ra = files_under(a / "rollouts"), rb = files_under(b / "rollouts");
    REQUIRE(ra.size() == 2);
    for (std::size_t i = 0; i < ra.size(); ++i) CHECK(slurp(ra[i]) == slurp(rb[i]));
    CHECK(slurp(a / "eval" / "metrics.csv") == slurp(b / "eval" / "metrics.csv"));
    CHECK(slurp(a / "eval" / "force_profile.csv") == slurp(b / "eval" / "force_profile.csv"));

    const auto losses = logged_losses(a / "run" / "train.log");
    REQUIRE(losses.size() == 6);
    CHECK(losses.back() < losses.front());
    const auto used = nlohmann::json::parse(slurp(a / "run" / "config.json"));
    CHECK(used["train"]["steps"] == 300);
    CHECK(used["model"]["d_model"] == 32);

    const auto csv = slurp(a / "eval" / "metrics.csv");
    CHECK(csv.rfind("episode_id,task,metric,success\n", 0) == 0);
    CHECK(csv.find("erase/ep_00001,erase,") != std::string::npos);
    fs::remove_all(dir);
  }

  TEST_CASE("rollout refuses weights for another task") {
    const auto dir = fresh_dir("mismatch");
    const auto cfg = small_config(dir).string();
    REQUIRE(run_cli("collect --task erase --episodes 1 --expert --config " + cfg + " --out " + (dir / "d").string()).code ==
            0);
    REQUIRE(run_cli("train --config " + cfg + " --data " + (dir / "d").string() + " --steps 1 --out " +
                (dir / "r").string())
                .code == 0);
    const auto r = run_cli("rollout --task grind --episodes 1 --weights " + (dir / "r" / "policy.ckpt").string() +
                       " --out " + (dir / "x").string());
    CHECK(r.code == 1);
    CHECK(r.output.find("experts.task_mismatch") != std::string::npos);
    fs::remove_all(dir);
  }

  TEST_CASE("serve runs for a fixed duration") {
    const auto dir = fresh_dir("serve");
    const auto r = run_cli("serve --task insert_round --port 0 --duration 0.5 --out " + dir.string());
    CHECK(r.code == 0);
    CHECK(r.output.find("serving insert_round on ws://127.0.0.1:") != std::string::npos);
    CHECK(r.output.find("stopped after") != std::string::npos);
    fs::remove_all(dir);
  }
}
