#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "cdp/compliance.hpp"
#include "cdp/datastore.hpp"
#include "cdp/simworld.hpp"

namespace cdp {

/// Wire protocol version carried as "v" in every message.
inline constexpr int kTeleopProtocolVersion = 1;
inline constexpr double kTeleopMaxStep = 0.005;     ///< m per command
inline constexpr double kTeleopMaxRotation = 0.05;  ///< rad per command

enum class RecordRequest { None, Start, Stop, Discard };

/// Client command after validation and clamping.
struct TeleopCommand {
  int arm = 0;
  Vector3d delta_position = Vector3d::Zero();
  Vector3d delta_rotation = Vector3d::Zero();  ///< rotation vector, world frame
  std::optional<double> gripper;
  bool stiffness_toggle = false;
  RecordRequest record = RecordRequest::None;
};

/// Parses a `command` message. Unknown fields are ignored; deltas are clamped
/// component-wise. Throws Error with category protocol.malformed or
/// protocol.version.
TeleopCommand parse_teleop_command(std::string_view text, int n_arms);

/// {"v":1,"type":"error","category":...,"message":...}
std::string teleop_error(const std::string& category, const std::string& message);

/// Simulation side of a teleoperation session. The connection side only
/// calls submit() and snapshot(); everything else belongs to the sim loop.
class TeleopSession {
 public:
  TeleopSession(TaskKind task, SceneConfig scene, ControllerConfig controller, PresetTable presets,
                std::uint64_t seed, std::string date = {}, std::filesystem::path out_dir = {});

  /// Queues a raw client message. Returns an error message to send back, if
  /// any. A newer command replaces an unapplied older one.
  std::optional<std::string> submit(std::string_view text);
  /// Latest state message.
  std::string snapshot() const;

  /// Applies the latest queued command (if any), then advances one tick.
  void step();

  long tick() const { return tick_; }
  long dropped_commands() const { return dropped_.load(); }
  /// Episodes finished so far; safe from any thread.
  int recorded_count() const { return recorded_.load(); }
  bool recording() const { return recorder_ != nullptr; }
  const Env& env() const { return env_; }
  const std::vector<ArmCommand>& targets() const { return targets_; }
  std::vector<StiffnessMode> modes() const { return modes_; }
  /// Episodes finished by `record stop`, oldest first; clears the list.
  std::vector<Episode> take_episodes();
  /// Files written for finished episodes when an output directory was given.
  const std::vector<std::filesystem::path>& written() const { return written_; }

 private:
  void apply(const TeleopCommand& cmd);
  void publish();

  TaskKind task_;
  SceneConfig scene_;
  PresetTable presets_;
  std::uint64_t seed_;
  std::string date_;
  std::filesystem::path out_dir_;
  Env env_;
  std::vector<ArmCommand> targets_;
  std::vector<StiffnessMode> modes_;
  std::unique_ptr<EpisodeRecorder> recorder_;
  std::vector<Episode> finished_;
  std::vector<std::filesystem::path> written_;
  int episode_index_ = 0;
  long tick_ = 0;

  mutable std::mutex mutex_;  // guards pending_ and snapshot_
  std::optional<TeleopCommand> pending_;
  std::string snapshot_;
  std::atomic<long> dropped_{0};
  std::atomic<int> recorded_{0};
};

/// WebSocket front end: accepts clients, forwards their text frames to the
/// session, and broadcasts snapshots at `broadcast_hz`. The sim loop ticks
/// the session at `tick_hz` on its own thread.
class TeleopServer {
 public:
  TeleopServer(TeleopSession& session, std::uint16_t port, std::string host = "127.0.0.1", double tick_hz = 50.0,
               double broadcast_hz = 20.0);
  ~TeleopServer();

  TeleopServer(const TeleopServer&) = delete;
  TeleopServer& operator=(const TeleopServer&) = delete;

  /// Bound port (useful when constructed with port 0).
  std::uint16_t port() const;
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace cdp
