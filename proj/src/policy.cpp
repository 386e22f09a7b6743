#include "cdp/policy.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include "cdp/checkpoint.hpp"
#include "cdp/config.hpp"
#include "cdp/experts.hpp"

namespace cdp {

EnsembleBuffer::EnsembleBuffer(int horizon, int replan_interval, double decay)
    : horizon_(horizon), replan_(replan_interval), decay_(decay) {
  if (horizon < 1 || replan_interval < 1) throw InvalidConfig("ensemble: horizon and replan_interval must be >= 1");
  if (!(decay >= 0)) throw InvalidConfig("ensemble: decay must be >= 0");
  capacity_ = (horizon + replan_interval - 1) / replan_interval + 1;
}

void EnsembleBuffer::add(Eigen::MatrixXd chunk, long birth_tick) {
  if (chunk.rows() != horizon_) {
    throw ShapeMismatch("ensemble: chunk has " + std::to_string(chunk.rows()) + " rows, horizon is " +
                        std::to_string(horizon_));
  }
  if (!entries_.empty() && chunk.cols() != entries_.front().chunk.cols()) {
    throw ShapeMismatch("ensemble: chunk width changed");
  }
  while (!entries_.empty() && entries_.front().birth + horizon_ <= birth_tick) entries_.pop_front();
  while (static_cast<int>(entries_.size()) >= capacity_) entries_.pop_front();
  entries_.push_back({std::move(chunk), birth_tick});
}

std::vector<EnsembleBuffer::Contribution> EnsembleBuffer::contributions(long tick) const {
  std::vector<Contribution> out;
  long oldest_age = -1;
  for (const auto& e : entries_) {
    if (e.birth <= tick && tick < e.birth + horizon_) oldest_age = std::max(oldest_age, tick - e.birth);
  }
  if (oldest_age < 0) throw NoCoverage("no live chunk covers tick " + std::to_string(tick));
  double total = 0.0;
  for (const auto& e : entries_) {
    if (!(e.birth <= tick && tick < e.birth + horizon_)) continue;
    const long age = tick - e.birth;
    double w;
    if (std::isinf(decay_)) {
      w = age == oldest_age ? 1.0 : 0.0;
    } else {
      w = std::exp(-decay_ * static_cast<double>(oldest_age - age));
    }
    total += w;
    out.push_back({e.birth, w, e.chunk.row(age).transpose()});
  }
  for (auto& c : out) c.weight /= total;
  return out;
}

Eigen::VectorXd ensemble_action(const EnsembleBuffer& buffer, long tick) {
  const auto parts = buffer.contributions(tick);
  Eigen::VectorXd out = Eigen::VectorXd::Zero(parts.front().action.size());
  for (const auto& c : parts) {
    if (c.weight > 0) out += c.weight * c.action;
  }
  return out;
}

std::vector<ArmCommand> action_to_commands(const Eigen::VectorXd& raw, const ControllerConfig& controller) {
  if (raw.size() == 0 || raw.size() % kActionDim != 0) {
    throw ShapeMismatch("action vector of length " + std::to_string(raw.size()) + " is not a multiple of 16");
  }
  if (!raw.allFinite()) throw InferenceFailure("non-finite action");
  std::vector<ArmCommand> out;
  for (Eigen::Index a = 0; a < raw.size() / kActionDim; ++a) {
    ArmCommand c;
    try {
      c = decode_action(raw.segment<kActionDim>(a * kActionDim));
    } catch (const DegenerateRotation& e) {
      throw InferenceFailure(std::string("degenerate rotation in action: ") + e.what());
    }
    c.gripper = std::clamp(c.gripper, 0.0, 1.0);
    c.stiffness = clamp_stiffness(c.stiffness, controller);
    out.push_back(c);
  }
  return out;
}

std::string to_string(PolicyKind k) { return k == PolicyKind::Diffusion ? "diffusion" : "regression"; }

PolicyKind parse_policy_kind(const std::string& s) {
  if (s == "diffusion") return PolicyKind::Diffusion;
  if (s == "regression") return PolicyKind::Regression;
  throw InvalidConfig("unknown policy kind '" + s + "' (diffusion|regression)");
}

void TrainConfig::validate() const {
  if (steps < 0 || batch < 1 || !(lr > 0) || warmup < 0 || !(grad_clip > 0) || log_every < 1) {
    throw InvalidConfig("train: steps >= 0, batch >= 1, lr > 0, warmup >= 0, grad_clip > 0, log_every >= 1");
  }
  if (!(ema >= 0 && ema < 1)) throw InvalidConfig("train.ema must be in [0, 1)");
  if (!(lr_final_fraction >= 0 && lr_final_fraction <= 1)) throw InvalidConfig("train.lr_final_fraction in [0, 1]");
}

void RolloutConfig::validate() const {
  if (replan_interval < 1 || n_infer < 1 || max_ticks < 0 || !(ensemble_decay >= 0)) {
    throw InvalidConfig("rollout: replan_interval >= 1, n_infer >= 1, max_ticks >= 0, ensemble_decay >= 0");
  }
}

PolicyModel::PolicyModel(PolicyKind kind_, TaskKind task_, const DenoiserConfig& cfg, ScheduleKind schedule_,
                         NormalizationStats stats_, std::uint64_t init_seed)
    : kind(kind_), task(task_), schedule(schedule_), net(cfg, init_seed), stats(std::move(stats_)) {}

void save_policy(const std::filesystem::path& path, const PolicyModel& model) {
  Checkpoint ckpt;
  nlohmann::json header = {{"kind", to_string(model.kind)},
                           {"task", to_string(model.task)},
                           {"schedule", to_string(model.schedule)},
                           {"model", to_json(model.net.config())}};
  ckpt.config = header.dump();
  const auto& params = model.net.parameters();
  for (int i = 0; i < params.size(); ++i) ckpt.tensors.push_back(store_matrix<float>(params.name(i), params[i].value));
  for (auto& t : model.stats.to_tensors()) ckpt.tensors.push_back(std::move(t));
  save_checkpoint(path, ckpt);
}

PolicyModel load_policy(const std::filesystem::path& path) {
  const Checkpoint ckpt = load_checkpoint(path);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(ckpt.config);
  } catch (const nlohmann::json::exception& e) {
    throw CorruptFile(std::string("checkpoint config: ") + e.what(), 16);
  }
  PolicyModel model(parse_policy_kind(header.at("kind").get<std::string>()),
                    parse_task(header.at("task").get<std::string>()), denoiser_config_from_json(header.at("model")),
                    parse_schedule_kind(header.at("schedule").get<std::string>()),
                    NormalizationStats::from_checkpoint(ckpt), 0);
  auto& params = model.net.parameters();
  for (int i = 0; i < params.size(); ++i) {
    const auto* t = ckpt.find(params.name(i));
    if (t == nullptr) throw CorruptFile("checkpoint lacks tensor '" + params.name(i) + "'", 0);
    auto m = load_matrix<float>(*t);
    if (m.rows() != params[i].rows() || m.cols() != params[i].cols()) {
      throw ShapeMismatch("tensor '" + params.name(i) + "' is " + ad::shape_string(m.rows(), m.cols()) +
                          ", model expects " + ad::shape_string(params[i].rows(), params[i].cols()));
    }
    params[i].value = std::move(m);
  }
  return model;
}

LearnedPolicy::LearnedPolicy(const PolicyModel& model, int n_infer)
    : model_(model), schedule_(build_schedule(model.schedule, model.net.config().n_diffusion_steps)), n_infer_(n_infer) {
  if (n_infer < 1 || n_infer > schedule_.steps) throw InvalidConfig("n_infer must be in [1, N]");
  if (model.stats.empty()) throw MissingStats("policy has no normalization stats");
}

Eigen::MatrixXd LearnedPolicy::predict_normalized(const Observation& normalized, std::uint64_t seed) const {
  using Mat = ad::Matrix<float>;
  const auto& cfg = model_.net.config();
  const Mat tokens = model_.net.encode_observation(normalized);
  Mat out;
  if (model_.kind == PolicyKind::Diffusion) {
    out = sample<float>([&](const Mat& noisy, int n) { return model_.net.predict_clean_chunk(noisy, n, tokens); },
                        schedule_, n_infer_, seed, cfg.horizon, cfg.action_width());
  } else {
    out = model_.net.predict_clean_chunk(Mat::Zero(cfg.horizon, cfg.action_width()), 0, tokens);
  }
  if (!out.allFinite()) throw InferenceFailure("policy produced a non-finite chunk");
  return out.cast<double>();
}

Eigen::MatrixXd LearnedPolicy::predict_chunk(const Observation& raw, std::uint64_t seed) {
  return model_.stats.denormalize_chunk(predict_normalized(model_.stats.normalize(raw), seed));
}

RolloutResult run_policy(Policy& policy, Env& env, const RolloutConfig& cfg, std::uint64_t seed,
                         const PresetTable& presets, const std::string& date) {
  cfg.validate();
  const TaskKind task = env.task();
  EpisodeMeta meta;
  meta.task = task;
  meta.seed = seed;
  meta.control_rate = env.scene().control_rate;
  if (auto it = presets.find(to_string(task)); it != presets.end()) meta.presets = it->second;
  meta.date = date;
  meta.source = EpisodeSource::Policy;
  meta.n_arms = arm_count(task);
  meta.grid_size = env.scene().grid_size;
  EpisodeRecorder rec(meta, env.scene());
  EnsembleBuffer buffer(policy.horizon(), cfg.replan_interval, cfg.ensemble_decay);
  RolloutResult result;
  const int limit = cfg.max_ticks > 0 ? cfg.max_ticks : default_episode_ticks(task);
  for (int t = 0; t < limit; ++t) {
    const Observation obs = env.observation();
    if (t % cfg.replan_interval == 0) {
      Eigen::MatrixXd chunk = policy.predict_chunk(obs, episode_seed(seed, t, 0));
      if (chunk.cols() != kActionDim * meta.n_arms) {
        throw InferenceFailure("policy chunk width " + std::to_string(chunk.cols()) + " does not fit the task");
      }
      buffer.add(std::move(chunk), t);
      ++result.inferences;
    }
    const auto commands = action_to_commands(ensemble_action(buffer, t), env.controller());
    try {
      env.tick(commands);
    } catch (const Diverged& e) {
      throw EnvTerminated(std::string("rollout stopped at tick ") + std::to_string(t) + ": " + e.what());
    }
    rec.record(obs.current, commands, env.state());
  }
  result.final_state = env.state();
  result.episode = rec.finish(result.final_state);
  return result;
}

TrainLog train_policy(PolicyModel& model, const BatchFn& batches, const TrainConfig& cfg,
                      const std::function<void(int, double)>& log) {
  using Mat = ad::Matrix<float>;
  cfg.validate();
  auto& net = model.net;
  const auto& mc = net.config();
  const NoiseSchedule sched = build_schedule(model.schedule, mc.n_diffusion_steps);
  std::mt19937_64 rng(cfg.seed * 0x2545F4914F6CDD1Dull + 1);
  std::uniform_int_distribution<int> pick_step(1, mc.n_diffusion_steps);
  ad::AdamState<float> adam;
  std::vector<Mat> ema;
  if (cfg.ema > 0) {
    for (const auto& t : net.parameters().tensors()) ema.push_back(t.value);
  }
  TrainLog out;
  double window = 0.0;
  int window_count = 0;
  for (int step = 0; step < cfg.steps; ++step) {
    const TrainBatch b = batches(step);
    const int bsz = static_cast<int>(b.observations.size());
    if (bsz == 0 || b.actions.rows() != static_cast<Eigen::Index>(bsz) * mc.horizon ||
        b.actions.cols() != mc.action_width()) {
      throw ShapeMismatch("train: batch actions " + ad::shape_string(b.actions.rows(), b.actions.cols()) +
                          " do not match " + std::to_string(bsz) + " x horizon " + std::to_string(mc.horizon));
    }
    const auto obs = make_observation_batch<float>(b.observations, mc);
    ad::Graph<float> g;
    BoundParameters<float> p(g, net.parameters());
    auto memory = net.encode(p, obs);
    ad::Var<float> loss;
    if (model.kind == PolicyKind::Diffusion) {
      std::vector<int> steps(static_cast<std::size_t>(bsz));
      for (auto& s : steps) s = pick_step(rng);
      const Mat eps = gaussian_chunk<float>(b.actions.rows(), b.actions.cols(), rng);
      loss = training_loss<float>(g, b.actions, steps, eps, sched,
                                  [&](ad::Graph<float>&, const Mat& noisy, std::span<const int> st) {
                                    return net.decode(p, memory, noisy, st);
                                  });
    } else {
      const std::vector<int> steps(static_cast<std::size_t>(bsz), 0);
      auto pred = net.decode(p, memory, Mat::Zero(b.actions.rows(), b.actions.cols()), steps);
      loss = ad::scale(ad::sum_sq(ad::sub(pred, g.constant(b.actions))), 1.0f / static_cast<float>(b.actions.size()));
    }
    const double value = static_cast<double>(loss.value()(0, 0));
    if (!std::isfinite(value)) throw InferenceFailure("training loss became non-finite at step " + std::to_string(step));
    g.backward(loss);
    auto grads = p.gradients();
    ad::clip_grad_norm<float>(grads, cfg.grad_clip);

    double lr = cfg.lr;
    if (step < cfg.warmup) {
      lr *= static_cast<double>(step + 1) / static_cast<double>(cfg.warmup);
    } else if (cfg.steps > cfg.warmup) {
      const double progress = static_cast<double>(step - cfg.warmup) / static_cast<double>(cfg.steps - cfg.warmup);
      lr *= cfg.lr_final_fraction + (1.0 - cfg.lr_final_fraction) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
    }
    ad::AdamConfig ac;
    ac.lr = lr;
    ad::adam_step<float>(net.parameters().tensors(), grads, adam, ac);
    if (!ema.empty()) {
      const auto decay = static_cast<float>(cfg.ema);
      auto tensors = net.parameters().tensors();
      for (std::size_t i = 0; i < ema.size(); ++i) ema[i] = decay * ema[i] + (1.0f - decay) * tensors[i].value;
    }

    if (step == 0) out.first_loss = value;
    out.last_loss = value;
    window += value;
    ++window_count;
    if ((step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps) {
      const double mean = window / window_count;
      out.losses.emplace_back(step + 1, mean);
      if (log) log(step + 1, mean);
      window = 0.0;
      window_count = 0;
    }
  }
  if (!ema.empty()) {
    auto tensors = net.parameters().tensors();
    for (std::size_t i = 0; i < ema.size(); ++i) tensors[i].value = ema[i];
  }
  return out;
}

BatchFn dataset_batches(const SampleSource& source, int batch, int horizon, std::uint64_t seed) {
  return [&source, batch, horizon, seed](int step) { return source.sample(batch, horizon, episode_seed(seed, step, 1)); };
}

}  // namespace cdp
