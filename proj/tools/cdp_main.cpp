// Command-line entry point: collect, train, rollout, eval, serve.
#include <atomic>
#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <thread>

#include <CLI11.hpp>

#include "cdp/config.hpp"
#include "cdp/evalkit.hpp"
#include "cdp/experts.hpp"
#include "cdp/io.hpp"
#include "cdp/policy.hpp"
#include "cdp/teleop.hpp"

namespace fs = std::filesystem;
using namespace cdp;

namespace {

std::atomic<bool> g_interrupted{false};

void on_signal(int) { g_interrupted = true; }

RunConfig load_or_default(const std::string& path) {
  RunConfig cfg = path.empty() ? RunConfig{} : load_run_config(path);
  return cfg;
}

void set_task(RunConfig& cfg, const std::string& task) {
  cfg.task = to_string(parse_task(task));
  cfg.model.n_arms = arm_count(cfg.task_kind());
}

/// Appends to a log file and mirrors to stdout.
class Log {
 public:
  explicit Log(const fs::path& path) : file_(path, std::ios::app) {
    if (!file_) throw IoError("cannot open log file " + path.string());
  }
  void line(const std::string& s) {
    file_ << s << '\n';
    file_.flush();
    std::cout << s << '\n' << std::flush;
  }

 private:
  std::ofstream file_;
};

std::vector<std::string> relative_ids(const std::vector<fs::path>& files, const fs::path& root) {
  std::vector<std::string> ids;
  for (const auto& f : files) ids.push_back(fs::relative(f, root).replace_extension().generic_string());
  return ids;
}

std::vector<fs::path> episode_files(const fs::path& root) {
  std::vector<fs::path> files;
  if (fs::is_regular_file(root)) return {root};
  if (!fs::exists(root)) return files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file() && e.path().extension() == ".ep") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

int cmd_collect(const std::string& config_path, const std::string& task, int episodes, bool expert, bool teleop,
                std::uint64_t seed, const fs::path& out, int port) {
  RunConfig cfg = load_or_default(config_path);
  set_task(cfg, task);
  if (episodes >= 0) cfg.episodes = episodes;
  cfg.validate();
  if (expert == teleop) throw InvalidConfig("collect needs exactly one of --expert or --teleop");
  fs::create_directories(out);
  save_run_config(out / "config.json", cfg);
  Log log(out / "collect.log");
  const int n = episodes >= 0 ? episodes : cfg.demo_count();
  if (expert) {
    CollectOptions opts;
    opts.episodes = n;
    opts.seed = seed;
    opts.date = cfg.date;
    const Dataset data = collect_demos(cfg.task_kind(), opts, cfg.expert, cfg.presets, cfg.scene, cfg.controller,
                                       [&](const std::string& msg) { log.line(msg); });
    const auto paths = write_dataset(out, data);
    log.line("collected " + std::to_string(paths.size()) + " " + cfg.task + " episodes (" +
             std::to_string(data.total_ticks()) + " ticks) into " + out.string());
    return 0;
  }
  TeleopSession session(cfg.task_kind(), cfg.scene, cfg.controller, cfg.presets, seed, cfg.date, out);
  TeleopServer server(session, static_cast<std::uint16_t>(port), "127.0.0.1", cfg.scene.control_rate);
  log.line("teleop collection on ws://127.0.0.1:" + std::to_string(server.port()) + " (" + std::to_string(n) +
           " episodes)");
  while (!g_interrupted && session.recorded_count() < n) std::this_thread::sleep_for(std::chrono::milliseconds(50));
  server.stop();
  log.line("recorded " + std::to_string(session.recorded_count()) + " episodes");
  return 0;
}

int cmd_train(const std::string& config_path, const fs::path& data_dir, const fs::path& out, int steps,
              std::optional<std::uint64_t> seed) {
  RunConfig cfg = load_or_default(config_path);
  const Dataset data = load_dataset(data_dir);
  if (data.empty()) throw EmptyDataset("no episodes under " + data_dir.string());
  const TaskKind task = data.episodes.front().meta.task;
  for (const auto& e : data.episodes) {
    if (e.meta.task != task) throw InvalidConfig("training data mixes tasks");
  }
  set_task(cfg, to_string(task));
  if (steps >= 0) cfg.train.steps = steps;
  if (seed) cfg.train.seed = *seed;
  cfg.validate();
  fs::create_directories(out);
  save_run_config(out / "config.json", cfg);
  Log log(out / "train.log");
  const NormalizationStats stats = compute_stats(data);
  const SampleSource source(data, stats);
  PolicyModel model(cfg.policy, task, cfg.model, cfg.schedule, stats, cfg.train.init_seed);
  log.line("training " + to_string(cfg.policy) + " policy on " + std::to_string(data.episodes.size()) + " " +
           cfg.task + " episodes (" + std::to_string(data.total_ticks()) + " ticks), " +
           std::to_string(model.net.summary().parameters) + " parameters, " + std::to_string(cfg.train.steps) +
           " steps");
  const auto result = train_policy(model, dataset_batches(source, cfg.train.batch, cfg.model.horizon, cfg.train.seed),
                                   cfg.train, [&](int step, double loss) {
                                     char buf[96];
                                     std::snprintf(buf, sizeof(buf), "step %d loss %.6f", step, loss);
                                     log.line(buf);
                                   });
  save_policy(out / "policy.ckpt", model);
  char buf[128];
  std::snprintf(buf, sizeof(buf), "done: first loss %.6f, last loss %.6f", result.first_loss, result.last_loss);
  log.line(buf);
  return 0;
}

int cmd_rollout(const std::string& config_path, const fs::path& weights, const std::string& task, int episodes,
                std::uint64_t seed, const fs::path& out) {
  std::string cfg_path = config_path;
  if (cfg_path.empty() && fs::exists(weights.parent_path() / "config.json")) {
    cfg_path = (weights.parent_path() / "config.json").string();
  }
  RunConfig cfg = load_or_default(cfg_path);
  set_task(cfg, task);
  cfg.validate();
  const PolicyModel model = load_policy(weights);
  if (model.task != cfg.task_kind()) {
    throw TaskMismatch("weights were trained for " + to_string(model.task) + ", not " + cfg.task);
  }
  fs::create_directories(out);
  save_run_config(out / "config.json", cfg);
  Log log(out / "rollout.log");
  LearnedPolicy policy(model, cfg.rollout.n_infer);
  const int n = episodes >= 0 ? episodes : cfg.eval.episodes;
  Dataset data;
  for (int i = 0; i < n; ++i) {
    const auto env_seed = episode_seed(seed, i, 0);
    Env env(cfg.task_kind(), cfg.scene, cfg.controller, env_seed);
    auto r = run_policy(policy, env, cfg.rollout, episode_seed(seed, i, 1), cfg.presets, cfg.date);
    log.line("episode " + std::to_string(i) + " metric " + std::to_string(r.episode.meta.metric) + " success " +
             (r.episode.meta.success ? "1" : "0"));
    data.episodes.push_back(std::move(r.episode));
  }
  write_dataset(out, data);
  return 0;
}

int cmd_eval(const fs::path& episodes_dir, const fs::path& out) {
  const auto files = episode_files(episodes_dir);
  if (files.empty()) throw EmptySet("no episodes under " + episodes_dir.string());
  std::vector<Episode> eps;
  for (const auto& f : files) eps.push_back(read_episode(f));
  const auto ids = relative_ids(files, fs::is_directory(episodes_dir) ? episodes_dir : episodes_dir.parent_path());
  const auto rows = episode_metrics(eps, ids);
  const auto summary = summarize(rows);
  fs::create_directories(out);
  io::write_file(out / "metrics.csv", metrics_csv(rows));
  io::write_file(out / "force_profile.csv", force_profile_csv(force_profile(eps)));
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%d episodes: mean metric %.4f, success rate %.4f", summary.count,
                summary.mean_metric, summary.success_rate);
  std::cout << buf << '\n';
  return 0;
}

int cmd_serve(const std::string& config_path, const std::string& task, int port, std::uint64_t seed,
              const fs::path& out, double duration) {
  RunConfig cfg = load_or_default(config_path);
  set_task(cfg, task);
  cfg.validate();
  fs::create_directories(out);
  save_run_config(out / "config.json", cfg);
  TeleopSession session(cfg.task_kind(), cfg.scene, cfg.controller, cfg.presets, seed, cfg.date, out);
  TeleopServer server(session, static_cast<std::uint16_t>(port), "127.0.0.1", cfg.scene.control_rate);
  std::cout << "serving " << cfg.task << " on ws://127.0.0.1:" << server.port() << std::endl;
  const auto start = std::chrono::steady_clock::now();
  while (!g_interrupted) {
    if (duration > 0 && std::chrono::steady_clock::now() - start > std::chrono::duration<double>(duration)) break;
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
  }
  server.stop();
  std::cout << "stopped after " << session.tick() << " ticks, " << session.recorded_count() << " episodes recorded"
            << std::endl;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  CLI::App app{"compliant diffusion policy toolkit"};
  app.require_subcommand(1);

  std::string config, task, out, data, weights, episodes_dir;
  int episodes = -1, steps = -1, port = 8765;
  std::uint64_t seed = 0;
  bool expert = false, teleop = false;
  double duration = 0;

  auto* collect = app.add_subcommand("collect", "record demonstrations");
  collect->add_option("--config", config, "run config (JSON)");
  collect->add_option("--task", task, "grind|erase|insert_round|insert_cuboid")->required();
  collect->add_option("--episodes", episodes, "episode count (default from config)");
  collect->add_flag("--expert", expert, "scripted expert demonstrations");
  collect->add_flag("--teleop", teleop, "human demonstrations over the teleop protocol");
  collect->add_option("--seed", seed, "base seed");
  collect->add_option("--out", out, "output directory")->required();
  collect->add_option("--port", port, "teleop port (0 = any)");

  auto* train = app.add_subcommand("train", "train a policy");
  std::optional<std::uint64_t> train_seed;
  train->add_option("--config", config, "run config (JSON)");
  train->add_option("--data", data, "episode directory")->required();
  train->add_option("--out", out, "output directory")->required();
  train->add_option("--steps", steps, "override train.steps");
  train->add_option("--seed", train_seed, "override train.seed");

  auto* rollout = app.add_subcommand("rollout", "run a trained policy");
  rollout->add_option("--config", config, "run config (default: config.json next to the weights)");
  rollout->add_option("--weights", weights, "policy checkpoint")->required();
  rollout->add_option("--task", task, "task")->required();
  rollout->add_option("--episodes", episodes, "rollout count (default eval.episodes)");
  rollout->add_option("--seed", seed, "base seed");
  rollout->add_option("--out", out, "output directory")->required();

  auto* eval = app.add_subcommand("eval", "metrics and force profile of recorded episodes");
  eval->add_option("--episodes", episodes_dir, "episode file or directory")->required();
  eval->add_option("--out", out, "output directory")->required();

  auto* serve = app.add_subcommand("serve", "teleoperation server");
  serve->add_option("--config", config, "run config (JSON)");
  serve->add_option("--task", task, "task")->required();
  serve->add_option("--port", port, "port (0 = any)");
  serve->add_option("--seed", seed, "scene seed");
  serve->add_option("--out", out, "directory for recorded episodes")->default_val("teleop_episodes");
  serve->add_option("--duration", duration, "seconds to run (0 = until interrupted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: config.usage: " << e.what() << '\n';
    return 2;
  }

  try {
    if (*collect) return cmd_collect(config, task, episodes, expert, teleop, seed, out, port);
    if (*train) return cmd_train(config, data, out, steps, train_seed);
    if (*rollout) return cmd_rollout(config, weights, task, episodes, seed, out);
    if (*eval) return cmd_eval(episodes_dir, out);
    if (*serve) return cmd_serve(config, task, port, seed, out, duration);
  } catch (const Error& e) {
    std::cerr << "error: " << e.category() << ": " << e.what() << '\n';
    return e.category().rfind("config.", 0) == 0 ? 2 : 1;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: io.failure: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
