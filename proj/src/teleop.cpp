#include "cdp/teleop.hpp"

#include <chrono>
#include <deque>
#include <iomanip>
#include <sstream>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/websocket.hpp>
#include <json.hpp>

#include "cdp/errors.hpp"

namespace cdp {

namespace {

using json = nlohmann::json;

class ProtocolError : public Error {
 public:
  ProtocolError(const std::string& kind, const std::string& message) : Error("protocol." + kind, message) {}
};

Vector3d clamp3(const json& j, const char* what, double bound) {
  if (!j.is_array() || j.size() != 3) throw ProtocolError("malformed", std::string(what) + " must be an array of 3 numbers");
  Vector3d v;
  for (int i = 0; i < 3; ++i) {
    if (!j[static_cast<std::size_t>(i)].is_number()) throw ProtocolError("malformed", std::string(what) + " must hold numbers");
    const double x = j[static_cast<std::size_t>(i)].get<double>();
    if (!std::isfinite(x)) throw ProtocolError("malformed", std::string(what) + " must be finite");
    v(i) = std::clamp(x, -bound, bound);
  }
  return v;
}

json vec_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

}  // namespace

TeleopCommand parse_teleop_command(std::string_view text, int n_arms) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ProtocolError("malformed", std::string("invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ProtocolError("malformed", "message must be a JSON object");
  if (!j.contains("v") || !j["v"].is_number_integer()) throw ProtocolError("malformed", "missing integer field v");
  if (j["v"].get<int>() != kTeleopProtocolVersion) {
    throw ProtocolError("version", "unsupported protocol version " + j["v"].dump());
  }
  if (j.value("type", std::string()) != "command") throw ProtocolError("malformed", "expected type \"command\"");
  TeleopCommand c;
  if (j.contains("arm")) {
    if (!j["arm"].is_number_integer()) throw ProtocolError("malformed", "arm must be an integer");
    c.arm = j["arm"].get<int>();
    if (c.arm < 0 || c.arm >= n_arms) throw ProtocolError("malformed", "arm index out of range");
  }
  if (j.contains("delta")) {
    const auto& d = j["delta"];
    if (!d.is_object()) throw ProtocolError("malformed", "delta must be an object");
    if (d.contains("position")) c.delta_position = clamp3(d["position"], "delta.position", kTeleopMaxStep);
    if (d.contains("rotation")) c.delta_rotation = clamp3(d["rotation"], "delta.rotation", kTeleopMaxRotation);
  }
  if (j.contains("gripper")) {
    if (!j["gripper"].is_number()) throw ProtocolError("malformed", "gripper must be a number");
    const double g = j["gripper"].get<double>();
    if (!std::isfinite(g)) throw ProtocolError("malformed", "gripper must be finite");
    c.gripper = std::clamp(g, 0.0, 1.0);
  }
  if (j.contains("stiffness_toggle")) {
    if (!j["stiffness_toggle"].is_boolean()) throw ProtocolError("malformed", "stiffness_toggle must be a boolean");
    c.stiffness_toggle = j["stiffness_toggle"].get<bool>();
  }
  if (j.contains("record") && !j["record"].is_null()) {
    const auto r = j["record"].is_string() ? j["record"].get<std::string>() : std::string("?");
    if (r == "start") {
      c.record = RecordRequest::Start;
    } else if (r == "stop") {
      c.record = RecordRequest::Stop;
    } else if (r == "discard") {
      c.record = RecordRequest::Discard;
    } else {
      throw ProtocolError("malformed", "record must be start, stop or discard");
    }
  }
  return c;
}

std::string teleop_error(const std::string& category, const std::string& message) {
  return json{{"v", kTeleopProtocolVersion}, {"type", "error"}, {"category", category}, {"message", message}}.dump();
}

TeleopSession::TeleopSession(TaskKind task, SceneConfig scene, ControllerConfig controller, PresetTable presets,
                             std::uint64_t seed, std::string date, std::filesystem::path out_dir)
    : task_(task),
      scene_(scene),
      presets_(std::move(presets)),
      seed_(seed),
      date_(std::move(date)),
      out_dir_(std::move(out_dir)),
      env_(task, scene, controller, seed) {
  for (int a = 0; a < arm_count(task); ++a) {
    ArmCommand c;
    c.target = env_.state().arms[static_cast<std::size_t>(a)].pose;
    c.gripper = env_.state().arms[static_cast<std::size_t>(a)].gripper;
    c.stiffness = set_stiffness_mode(StiffnessMode::High, presets_, to_string(task), a);
    targets_.push_back(c);
    modes_.push_back(StiffnessMode::High);
  }
  publish();
}

std::optional<std::string> TeleopSession::submit(std::string_view text) {
  TeleopCommand cmd;
  try {
    cmd = parse_teleop_command(text, arm_count(task_));
  } catch (const Error& e) {
    return teleop_error(e.category(), e.what());
  }
  std::lock_guard lock(mutex_);
  if (pending_) ++dropped_;
  pending_ = cmd;
  return std::nullopt;
}

std::string TeleopSession::snapshot() const {
  std::lock_guard lock(mutex_);
  return snapshot_;
}

void TeleopSession::apply(const TeleopCommand& cmd) {
  auto& t = targets_[static_cast<std::size_t>(cmd.arm)];
  t.target.position += cmd.delta_position;
  if (cmd.delta_rotation.squaredNorm() > 0) t.target.rotation = rotation_exp(cmd.delta_rotation) * t.target.rotation;
  if (cmd.gripper) t.gripper = *cmd.gripper;
  if (cmd.stiffness_toggle) {
    auto& mode = modes_[static_cast<std::size_t>(cmd.arm)];
    mode = toggled(mode);
    t.stiffness = set_stiffness_mode(mode, presets_, to_string(task_), cmd.arm);
  }
  switch (cmd.record) {
    case RecordRequest::Start: {
      EpisodeMeta meta;
      meta.task = task_;
      meta.seed = seed_;
      meta.control_rate = scene_.control_rate;
      meta.presets = presets_.at(to_string(task_));
      meta.date = date_;
      meta.source = EpisodeSource::Human;
      meta.n_arms = arm_count(task_);
      meta.grid_size = scene_.grid_size;
      recorder_ = std::make_unique<EpisodeRecorder>(meta, scene_);
      break;
    }
    case RecordRequest::Stop:
      if (recorder_) {
        Episode ep = recorder_->finish(env_.state());
        recorder_.reset();
        if (!out_dir_.empty()) {
          Dataset d;
          d.episodes.push_back(ep);
          const auto paths = write_dataset(out_dir_, d, episode_index_);
          written_.insert(written_.end(), paths.begin(), paths.end());
        }
        ++episode_index_;
        finished_.push_back(std::move(ep));
        ++recorded_;
      }
      break;
    case RecordRequest::Discard: recorder_.reset(); break;
    case RecordRequest::None: break;
  }
}

void TeleopSession::step() {
  std::optional<TeleopCommand> cmd;
  {
    std::lock_guard lock(mutex_);
    cmd.swap(pending_);
  }
  if (cmd) apply(*cmd);
  const ObservationFrame frame = env_.observation().current;
  env_.tick(targets_);
  ++tick_;
  if (recorder_) recorder_->record(frame, targets_, env_.state());
  publish();
}

std::vector<Episode> TeleopSession::take_episodes() {
  std::vector<Episode> out;
  out.swap(finished_);
  return out;
}

void TeleopSession::publish() {
  const auto& s = env_.state();
  json arms = json::array();
  for (std::size_t a = 0; a < s.arms.size(); ++a) {
    const auto& b = s.arms[a];
    arms.push_back({{"pose", vec_json(pose_to_9d(b.pose))},
                    {"target", vec_json(pose_to_9d(targets_[a].target))},
                    {"wrench", vec_json(b.contact_wrench)},
                    {"normal_force", b.normal_force},
                    {"gripper", targets_[a].gripper},
                    {"stiffness_mode", to_string(modes_[a])},
                    {"stiffness", vec_json(targets_[a].stiffness)}});
  }
  const ObservationFrame frame = env_.observation().current;
  std::vector<double> cells;
  cells.reserve(static_cast<std::size_t>(frame.grid.size()));
  for (Eigen::Index r = 0; r < frame.grid.rows(); ++r) {
    for (Eigen::Index c = 0; c < frame.grid.cols(); ++c) cells.push_back(frame.grid(r, c));
  }
  json msg = {{"v", kTeleopProtocolVersion},
              {"type", "state"},
              {"task", to_string(task_)},
              {"tick", tick_},
              {"arms", arms},
              {"grid", {{"size", frame.grid.rows()}, {"cells", cells}}},
              {"recording", recorder_ != nullptr},
              {"episodes_recorded", episode_index_}};
  std::string text = msg.dump();
  std::lock_guard lock(mutex_);
  snapshot_ = std::move(text);
}

// ---------------------------------------------------------------------------

namespace net = boost::asio;
namespace beast = boost::beast;
namespace websocket = beast::websocket;
using tcp = net::ip::tcp;

namespace {

class Connection : public std::enable_shared_from_this<Connection> {
 public:
  Connection(tcp::socket socket, TeleopSession& session, std::chrono::microseconds period)
      : ws_(std::move(socket)), session_(session), timer_(ws_.get_executor()), period_(period) {}

  void start() {
    ws_.text(true);
    ws_.async_accept([self = shared_from_this()](beast::error_code ec) {
      if (ec) return;
      self->read();
      self->tick();
    });
  }

 private:
  void read() {
    ws_.async_read(buffer_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (ec) {
        self->close();
        return;
      }
      const std::string text = beast::buffers_to_string(self->buffer_.data());
      self->buffer_.consume(self->buffer_.size());
      if (auto err = self->session_.submit(text)) self->send(std::move(*err));
      self->read();
    });
  }

  void tick() {
    timer_.expires_after(period_);
    timer_.async_wait([self = shared_from_this()](beast::error_code ec) {
      if (ec || self->closed_) return;
      self->send(self->session_.snapshot());
      self->tick();
    });
  }

  void send(std::string msg) {
    if (closed_) return;
    // A slow client gets the newest states rather than an ever-growing backlog.
    if (outbox_.size() > 8) outbox_.erase(outbox_.begin() + 1);
    outbox_.push_back(std::move(msg));
    if (!writing_) write();
  }

  void write() {
    writing_ = true;
    ws_.async_write(net::buffer(outbox_.front()), [self = shared_from_this()](beast::error_code ec, std::size_t) {
      self->outbox_.pop_front();
      if (ec) {
        self->close();
        return;
      }
      if (self->outbox_.empty()) {
        self->writing_ = false;
      } else {
        self->write();
      }
    });
  }

  void close() {
    closed_ = true;
    timer_.cancel();
  }

  websocket::stream<beast::tcp_stream> ws_;
  TeleopSession& session_;
  net::steady_timer timer_;
  std::chrono::microseconds period_;
  beast::flat_buffer buffer_;
  std::deque<std::string> outbox_;
  bool writing_ = false;
  bool closed_ = false;
};

}  // namespace

struct TeleopServer::Impl {
  TeleopSession& session;
  net::io_context io;
  tcp::acceptor acceptor;
  std::chrono::microseconds broadcast_period;
  std::chrono::microseconds tick_period;
  std::uint16_t bound_port = 0;
  std::atomic<bool> running{true};
  std::thread io_thread, sim_thread;

  Impl(TeleopSession& s, std::uint16_t port, const std::string& host, double tick_hz, double broadcast_hz)
      : session(s),
        acceptor(io),
        broadcast_period(static_cast<long>(1e6 / broadcast_hz)),
        tick_period(static_cast<long>(1e6 / tick_hz)) {
    const tcp::endpoint ep(net::ip::make_address(host), port);
    acceptor.open(ep.protocol());
    acceptor.set_option(net::socket_base::reuse_address(true));
    acceptor.bind(ep);
    acceptor.listen();
    bound_port = acceptor.local_endpoint().port();
    accept();
    io_thread = std::thread([this] { io.run(); });
    sim_thread = std::thread([this] { sim_loop(); });
  }

  void accept() {
    acceptor.async_accept([this](beast::error_code ec, tcp::socket socket) {
      if (ec) return;
      std::make_shared<Connection>(std::move(socket), session, broadcast_period)->start();
      accept();
    });
  }

  void sim_loop() {
    auto next = std::chrono::steady_clock::now();
    while (running) {
      session.step();
      next += tick_period;
      std::this_thread::sleep_until(next);
    }
  }

  void stop() {
    if (!running.exchange(false)) return;
    net::post(io, [this] {
      beast::error_code ec;
      acceptor.close(ec);
      io.stop();
    });
    if (sim_thread.joinable()) sim_thread.join();
    if (io_thread.joinable()) io_thread.join();
  }
};

TeleopServer::TeleopServer(TeleopSession& session, std::uint16_t port, std::string host, double tick_hz,
                           double broadcast_hz) {
  if (!(tick_hz > 0) || !(broadcast_hz > 0)) throw InvalidConfig("teleop rates must be > 0");
  try {
    impl_ = std::make_unique<Impl>(session, port, host, tick_hz, broadcast_hz);
  } catch (const boost::system::system_error& e) {
    throw IoError(std::string("teleop server: ") + e.what());
  }
}

TeleopServer::~TeleopServer() { stop(); }

std::uint16_t TeleopServer::port() const { return impl_->bound_port; }

void TeleopServer::stop() {
  if (impl_) impl_->stop();
}

}  // namespace cdp
