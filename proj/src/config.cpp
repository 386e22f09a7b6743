#include "cdp/config.hpp"

#include <set>

#include "cdp/io.hpp"

namespace cdp {

namespace {

using json = nlohmann::json;

class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw InvalidConfig(where_ + ": expected an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    if (!j_.contains(key)) return;
    used_.insert(key);
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw InvalidConfig(where_ + "." + key + ": " + e.what());
    }
  }

  void get(const char* key, Vector6d& out) {
    std::vector<double> v;
    get(key, v);
    if (!j_.contains(key)) return;
    if (v.size() != 6) throw InvalidConfig(where_ + "." + key + ": expected 6 numbers");
    for (int i = 0; i < 6; ++i) out(i) = v[static_cast<std::size_t>(i)];
  }

  const json* child(const char* key) {
    if (!j_.contains(key)) return nullptr;
    used_.insert(key);
    return &j_.at(key);
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!used_.count(k)) throw InvalidConfig("unknown config key " + where_ + "." + k);
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> used_;
};

json vec6(const Vector6d& v) { return std::vector<double>(v.data(), v.data() + 6); }

#define CDP_SCENE_FIELDS(X)                                                                                      \
  X(control_rate) X(substep) X(contact_stiffness) X(contact_damping) X(friction) X(friction_velocity)             \
  X(linear_drag) X(angular_drag) X(max_speed) X(grid_size) X(workspace) X(min_force) X(grind_success)             \
  X(erase_success) X(mortar_radius) X(mortar_wall_height) X(grind_rate) X(erase_rate) X(eraser_size)              \
  X(damage_force) X(mark_row_begin) X(mark_row_end) X(mark_col_begin) X(mark_col_end) X(mark_min) X(mark_max)    \
  X(clearance) X(contact_slop) X(chamfer) X(hole_depth) X(target_depth) X(block_half_width) X(peg_length)         \
  X(hole_randomization)
#define CDP_CONTROLLER_FIELDS(X) X(damping_ratio) X(mass) X(inertia) X(max_force) X(max_torque) X(k_min) X(k_max)
#define CDP_EXPERT_FIELDS(X)                                                                                     \
  X(position_noise) X(rotation_noise) X(timing_jitter) X(seed) X(grind_duration) X(orbit_radius) X(orbit_period) \
  X(orbit_time) X(grind_press_depth) X(pause_time) X(erase_press_depth) X(stroke_speed) X(erase_done)            \
  X(erase_max_strokes) X(insert_overshoot)
#define CDP_MODEL_FIELDS(X)                                                                                      \
  X(d_model) X(n_heads) X(n_encoder_layers) X(n_decoder_layers) X(horizon) X(action_dim) X(n_arms)               \
  X(n_diffusion_steps) X(patch_size) X(grid_size) X(mlp_ratio) X(positional_embeddings)
#define CDP_TRAIN_FIELDS(X) \
  X(steps) X(batch) X(lr) X(lr_final_fraction) X(warmup) X(grad_clip) X(ema) X(log_every) X(seed) X(init_seed)
#define CDP_ROLLOUT_FIELDS(X) X(replan_interval) X(ensemble_decay) X(n_infer) X(max_ticks)
#define CDP_EVAL_FIELDS(X) X(episodes) X(seed)

#define CDP_WRITE(f) j[#f] = c.f;
#define CDP_WRITE6(f) j[#f] = vec6(c.f);
#define CDP_READ(f) r.get(#f, c.f);

json controller_json(const ControllerConfig& c) {
  json j;
  j["damping_ratio"] = c.damping_ratio;
  j["mass"] = c.mass;
  j["inertia"] = c.inertia;
  j["max_force"] = c.max_force;
  j["max_torque"] = c.max_torque;
  j["k_min"] = vec6(c.k_min);
  j["k_max"] = vec6(c.k_max);
  return j;
}

template <typename T, typename Fill>
T read_section(const json* j, const char* where, Fill fill) {
  T c;
  if (j == nullptr) return c;
  Reader r(*j, where);
  fill(r, c);
  r.finish();
  return c;
}

json presets_json(const PresetTable& table) {
  json out = json::object();
  for (const auto& [task, arms] : table) {
    json list = json::array();
    for (const auto& p : arms) {
      list.push_back({{"translation_low", p.translation_low},
                      {"translation_high", p.translation_high},
                      {"rotation_low", p.rotation_low},
                      {"rotation_high", p.rotation_high}});
    }
    out[task] = list;
  }
  return out;
}

PresetTable presets_from(const json& j) {
  if (!j.is_object()) throw InvalidConfig("presets: expected an object of task -> [per-arm preset]");
  PresetTable table = default_presets();
  for (const auto& [task, list] : j.items()) {
    parse_task(task);
    if (!list.is_array()) throw InvalidConfig("presets." + task + ": expected an array");
    std::vector<StiffnessPreset> arms;
    for (const auto& item : list) {
      StiffnessPreset p;
      Reader r(item, "presets." + task);
      r.get("translation_low", p.translation_low);
      r.get("translation_high", p.translation_high);
      r.get("rotation_low", p.rotation_low);
      r.get("rotation_high", p.rotation_high);
      r.finish();
      arms.push_back(p);
    }
    table[task] = arms;
  }
  return table;
}

}  // namespace

int default_demo_count(TaskKind task) { return task == TaskKind::Grind ? 40 : 60; }

int RunConfig::demo_count() const { return episodes > 0 ? episodes : default_demo_count(task_kind()); }

void RunConfig::validate() const {
  const TaskKind t = task_kind();
  scene.validate();
  controller.validate();
  expert.validate();
  model.validate();
  train.validate();
  rollout.validate();
  if (model.grid_size != scene.grid_size) throw InvalidConfig("model.grid_size must equal scene.grid_size");
  if (model.n_arms != arm_count(t)) {
    throw InvalidConfig("model.n_arms is " + std::to_string(model.n_arms) + " but task " + task + " has " +
                        std::to_string(arm_count(t)) + " arms");
  }
  const auto it = presets.find(task);
  if (it == presets.end() || static_cast<int>(it->second.size()) != arm_count(t)) {
    throw InvalidConfig("presets for " + task + " must list one entry per arm");
  }
  if (episodes < 0 || eval.episodes < 1) throw InvalidConfig("episodes must be >= 0 and eval.episodes >= 1");
}

json to_json(const DenoiserConfig& c) {
  json j;
  CDP_MODEL_FIELDS(CDP_WRITE)
  return j;
}

DenoiserConfig denoiser_config_from_json(const json& j) {
  return read_section<DenoiserConfig>(&j, "model", [](Reader& r, DenoiserConfig& c) { CDP_MODEL_FIELDS(CDP_READ) });
}

json to_json(const RunConfig& cfg) {
  json out;
  out["task"] = cfg.task;
  out["date"] = cfg.date;
  out["episodes"] = cfg.episodes;
  {
    json j;
    const auto& c = cfg.scene;
    CDP_SCENE_FIELDS(CDP_WRITE)
    out["scene"] = j;
  }
  out["controller"] = controller_json(cfg.controller);
  out["presets"] = presets_json(cfg.presets);
  {
    json j;
    const auto& c = cfg.expert;
    CDP_EXPERT_FIELDS(CDP_WRITE)
    out["expert"] = j;
  }
  out["model"] = to_json(cfg.model);
  out["policy"] = to_string(cfg.policy);
  out["schedule"] = to_string(cfg.schedule);
  {
    json j;
    const auto& c = cfg.train;
    CDP_TRAIN_FIELDS(CDP_WRITE)
    out["train"] = j;
  }
  {
    json j;
    const auto& c = cfg.rollout;
    CDP_ROLLOUT_FIELDS(CDP_WRITE)
    out["rollout"] = j;
  }
  {
    json j;
    const auto& c = cfg.eval;
    CDP_EVAL_FIELDS(CDP_WRITE)
    out["eval"] = j;
  }
  return out;
}

RunConfig run_config_from_json(const json& root) {
  RunConfig cfg;
  Reader r(root, "config");
  r.get("task", cfg.task);
  r.get("date", cfg.date);
  r.get("episodes", cfg.episodes);
  parse_task(cfg.task);
  cfg.scene = read_section<SceneConfig>(r.child("scene"), "scene", [](Reader& r, SceneConfig& c) { CDP_SCENE_FIELDS(CDP_READ) });
  cfg.controller = read_section<ControllerConfig>(r.child("controller"), "controller",
                                                  [](Reader& r, ControllerConfig& c) { CDP_CONTROLLER_FIELDS(CDP_READ) });
  if (const auto* p = r.child("presets")) cfg.presets = presets_from(*p);
  cfg.expert = read_section<ExpertConfig>(r.child("expert"), "expert", [](Reader& r, ExpertConfig& c) { CDP_EXPERT_FIELDS(CDP_READ) });
  // The arm count follows the task unless the file says otherwise.
  cfg.model.n_arms = arm_count(parse_task(cfg.task));
  if (const auto* m = r.child("model")) {
    Reader mr(*m, "model");
    auto& c = cfg.model;
#define CDP_READ_MODEL(f) mr.get(#f, c.f);
    CDP_MODEL_FIELDS(CDP_READ_MODEL)
#undef CDP_READ_MODEL
    mr.finish();
  }
  std::string policy = to_string(cfg.policy), schedule = to_string(cfg.schedule);
  r.get("policy", policy);
  r.get("schedule", schedule);
  cfg.policy = parse_policy_kind(policy);
  cfg.schedule = parse_schedule_kind(schedule);
  cfg.train = read_section<TrainConfig>(r.child("train"), "train", [](Reader& r, TrainConfig& c) { CDP_TRAIN_FIELDS(CDP_READ) });
  cfg.rollout = read_section<RolloutConfig>(r.child("rollout"), "rollout", [](Reader& r, RolloutConfig& c) { CDP_ROLLOUT_FIELDS(CDP_READ) });
  cfg.eval = read_section<EvalConfig>(r.child("eval"), "eval", [](Reader& r, EvalConfig& c) { CDP_EVAL_FIELDS(CDP_READ) });
  r.finish();
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(io::read_file(path));
  } catch (const json::parse_error& e) {
    throw InvalidConfig(path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

void save_run_config(const std::filesystem::path& path, const RunConfig& cfg) {
  io::write_file(path, to_json(cfg).dump(2) + "\n");
}

}  // namespace cdp
