#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "cdp/compliance.hpp"
#include "cdp/denoiser.hpp"
#include "cdp/experts.hpp"
#include "cdp/policy.hpp"
#include "cdp/simworld.hpp"

namespace cdp {

struct EvalConfig {
  int episodes = 20;
  std::uint64_t seed = 1000;
  bool operator==(const EvalConfig&) const = default;
};

/// Everything a run needs. Loaded from JSON over the defaults; unknown keys
/// are rejected.
struct RunConfig {
  std::string task = "erase";
  std::string date = "2000-01-01";
  int episodes = 0;  ///< demos to collect; 0 = task default (grind 40, others 60)
  SceneConfig scene;
  ControllerConfig controller;
  PresetTable presets = default_presets();
  ExpertConfig expert;
  DenoiserConfig model;
  PolicyKind policy = PolicyKind::Diffusion;
  ScheduleKind schedule = ScheduleKind::SquaredCosine;
  TrainConfig train;
  RolloutConfig rollout;
  EvalConfig eval;

  TaskKind task_kind() const { return parse_task(task); }
  int demo_count() const;
  /// Throws UnknownTask / InvalidConfig.
  void validate() const;
};

int default_demo_count(TaskKind task);

nlohmann::json to_json(const RunConfig& cfg);
/// Throws InvalidConfig on bad types or unknown keys, UnknownTask on a bad task.
/// Cross-field checks are left to validate().
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const std::filesystem::path& path, const RunConfig& cfg);

nlohmann::json to_json(const DenoiserConfig& cfg);
DenoiserConfig denoiser_config_from_json(const nlohmann::json& j);

}  // namespace cdp
