#include "cdp/datastore.hpp"

#include <algorithm>
#include <iomanip>
#include <random>
#include <sstream>

#include <json.hpp>

#include "cdp/io.hpp"

namespace cdp {

namespace {

using json = nlohmann::json;
constexpr std::string_view kMagic = "CDPE";

json presets_to_json(const std::vector<StiffnessPreset>& presets) {
  json arr = json::array();
  for (const auto& p : presets) {
    arr.push_back({{"translation_low", p.translation_low},
                   {"translation_high", p.translation_high},
                   {"rotation_low", p.rotation_low},
                   {"rotation_high", p.rotation_high}});
  }
  return arr;
}

std::vector<StiffnessPreset> presets_from_json(const json& arr) {
  std::vector<StiffnessPreset> out;
  for (const auto& j : arr) {
    out.push_back({j.at("translation_low").get<double>(), j.at("translation_high").get<double>(),
                   j.at("rotation_low").get<double>(), j.at("rotation_high").get<double>()});
  }
  return out;
}

json meta_to_json(const EpisodeMeta& m, int length) {
  return {{"task", to_string(m.task)},
          {"seed", m.seed},
          {"control_rate", m.control_rate},
          {"presets", presets_to_json(m.presets)},
          {"date", m.date},
          {"source", to_string(m.source)},
          {"n_arms", m.n_arms},
          {"grid_size", m.grid_size},
          {"success", m.success},
          {"metric", m.metric},
          {"length", length}};
}

struct NamedArray {
  const char* name;
  Eigen::MatrixXf Episode::*member;
};

constexpr NamedArray kArrays[] = {
    {"pose", &Episode::pose},     {"wrench", &Episode::wrench},
    {"grid", &Episode::grid},     {"action", &Episode::action},
    {"normal_force", &Episode::normal_force}, {"progress", &Episode::progress},
};

void check_width(const Eigen::MatrixXf& m, Eigen::Index rows, Eigen::Index cols, const char* name) {
  if (m.rows() != rows || m.cols() != cols) {
    throw CorruptFile(std::string("episode array '") + name + "' is " + ad::shape_string(m.rows(), m.cols()) +
                          ", expected " + ad::shape_string(rows, cols),
                      0);
  }
}

}  // namespace

std::string to_string(EpisodeSource s) {
  switch (s) {
    case EpisodeSource::Expert: return "expert";
    case EpisodeSource::Human: return "human";
    case EpisodeSource::Policy: return "policy";
  }
  return "expert";
}

EpisodeSource parse_source(const std::string& s) {
  if (s == "expert") return EpisodeSource::Expert;
  if (s == "human") return EpisodeSource::Human;
  if (s == "policy") return EpisodeSource::Policy;
  throw InvalidConfig("unknown episode source '" + s + "'");
}

ObservationFrame Episode::frame(int t) const {
  ObservationFrame f;
  const int g = meta.grid_size;
  f.grid.resize(g, g);
  for (int r = 0; r < g; ++r) {
    for (int c = 0; c < g; ++c) f.grid(r, c) = grid(t, r * g + c);
  }
  for (int a = 0; a < meta.n_arms; ++a) {
    f.poses.push_back(pose.block<1, kPoseDim>(t, a * kPoseDim).transpose().cast<double>());
    f.wrenches.push_back(wrench.block<1, kWrenchDim>(t, a * kWrenchDim).transpose().cast<double>());
  }
  return f;
}

Observation Episode::observation(int t) const { return {frame(std::max(0, t - 1)), frame(t)}; }

void Episode::validate() const {
  const Eigen::Index t = action.rows(), a = meta.n_arms, g = meta.grid_size;
  if (a != arm_count(meta.task)) throw CorruptFile("episode arm count does not match its task", 0);
  check_width(pose, t, kPoseDim * a, "pose");
  check_width(wrench, t, kWrenchDim * a, "wrench");
  check_width(grid, t, g * g, "grid");
  check_width(action, t, kActionDim * a, "action");
  check_width(normal_force, t, a, "normal_force");
  check_width(progress, t, 1, "progress");
}

bool Episode::operator==(const Episode& o) const {
  if (!(meta == o.meta)) return false;
  for (const auto& arr : kArrays) {
    const auto& x = this->*arr.member;
    const auto& y = o.*arr.member;
    if (x.rows() != y.rows() || x.cols() != y.cols() || x != y) return false;
  }
  return true;
}

EpisodeRecorder::EpisodeRecorder(EpisodeMeta meta, SceneConfig scene) : meta_(std::move(meta)), scene_(std::move(scene)) {}

void EpisodeRecorder::record(const ObservationFrame& frame, const std::vector<ArmCommand>& commands,
                             const WorldState& after) {
  if (static_cast<int>(commands.size()) != meta_.n_arms || static_cast<int>(frame.poses.size()) != meta_.n_arms) {
    throw ShapeMismatch("recorder: expected " + std::to_string(meta_.n_arms) + " arms");
  }
  Row row;
  for (int a = 0; a < meta_.n_arms; ++a) {
    for (int k = 0; k < kPoseDim; ++k) row.pose.push_back(static_cast<float>(frame.poses[a](k)));
    for (int k = 0; k < kWrenchDim; ++k) row.wrench.push_back(static_cast<float>(frame.wrenches[a](k)));
    const Action16 act = encode_action(commands[a]);
    for (int k = 0; k < kActionDim; ++k) row.action.push_back(static_cast<float>(act(k)));
    row.force.push_back(static_cast<float>(after.arms[a].normal_force));
  }
  const int g = static_cast<int>(frame.grid.rows());
  if (g != meta_.grid_size || frame.grid.cols() != g) throw ShapeMismatch("recorder: grid size mismatch");
  for (int r = 0; r < g; ++r) {
    for (int c = 0; c < g; ++c) row.grid.push_back(static_cast<float>(frame.grid(r, c)));
  }
  row.progress = static_cast<float>(task_metric(after, scene_));
  rows_.push_back(std::move(row));
}

Episode EpisodeRecorder::finish(const WorldState& final_state) {
  Episode ep;
  ep.meta = meta_;
  ep.meta.success = task_success(final_state, scene_);
  ep.meta.metric = static_cast<float>(task_metric(final_state, scene_));
  const auto t = static_cast<Eigen::Index>(rows_.size());
  const int a = meta_.n_arms, g = meta_.grid_size;
  ep.pose.resize(t, kPoseDim * a);
  ep.wrench.resize(t, kWrenchDim * a);
  ep.grid.resize(t, g * g);
  ep.action.resize(t, kActionDim * a);
  ep.normal_force.resize(t, a);
  ep.progress.resize(t, 1);
  for (Eigen::Index i = 0; i < t; ++i) {
    const auto& r = rows_[static_cast<std::size_t>(i)];
    ep.pose.row(i) = Eigen::Map<const Eigen::RowVectorXf>(r.pose.data(), ep.pose.cols());
    ep.wrench.row(i) = Eigen::Map<const Eigen::RowVectorXf>(r.wrench.data(), ep.wrench.cols());
    ep.grid.row(i) = Eigen::Map<const Eigen::RowVectorXf>(r.grid.data(), ep.grid.cols());
    ep.action.row(i) = Eigen::Map<const Eigen::RowVectorXf>(r.action.data(), ep.action.cols());
    ep.normal_force.row(i) = Eigen::Map<const Eigen::RowVectorXf>(r.force.data(), ep.normal_force.cols());
    ep.progress(i, 0) = r.progress;
  }
  rows_.clear();
  return ep;
}

std::string encode_episode(const Episode& ep) {
  ep.validate();
  io::ByteWriter w;
  w.raw(kMagic);
  w.u32(kEpisodeVersion);
  const std::string header = meta_to_json(ep.meta, ep.length()).dump();
  w.u32(static_cast<std::uint32_t>(header.size()));
  w.raw(header);
  w.u32(static_cast<std::uint32_t>(std::size(kArrays)));
  for (const auto& arr : kArrays) {
    const auto& m = ep.*arr.member;
    const std::string_view name(arr.name);
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.raw(name);
    w.u32(2);
    w.u32(static_cast<std::uint32_t>(m.rows()));
    w.u32(static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) w.f32(m(r, c));
    }
  }
  return w.bytes();
}

Episode decode_episode(std::string_view bytes) {
  io::ByteReader r(bytes);
  if (r.raw(4, "magic") != kMagic) throw CorruptFile("bad episode magic", 0);
  const auto version = r.u32();
  if (version != kEpisodeVersion) {
    throw VersionMismatch("episode version " + std::to_string(version) + ", expected " +
                          std::to_string(kEpisodeVersion));
  }
  const auto header_len = r.u32();
  const auto header_offset = r.offset();
  const auto header_text = r.raw(header_len, "header");
  Episode ep;
  int length = 0;
  try {
    const json h = json::parse(header_text);
    ep.meta.task = parse_task(h.at("task").get<std::string>());
    ep.meta.seed = h.at("seed").get<std::uint64_t>();
    ep.meta.control_rate = h.at("control_rate").get<double>();
    ep.meta.presets = presets_from_json(h.at("presets"));
    ep.meta.date = h.at("date").get<std::string>();
    ep.meta.source = parse_source(h.at("source").get<std::string>());
    ep.meta.n_arms = h.at("n_arms").get<int>();
    ep.meta.grid_size = h.at("grid_size").get<int>();
    ep.meta.success = h.at("success").get<bool>();
    ep.meta.metric = h.at("metric").get<double>();
    length = h.at("length").get<int>();
  } catch (const json::exception& e) {
    throw CorruptFile(std::string("episode header: ") + e.what(), header_offset);
  } catch (const Error& e) {
    throw CorruptFile(std::string("episode header: ") + e.what(), header_offset);
  }
  const auto count = r.u32();
  std::vector<bool> seen(std::size(kArrays), false);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_offset = r.offset();
    const auto name_len = r.u16();
    const std::string name(r.raw(name_len, "array name"));
    const auto rank = r.u32();
    if (rank != 2) throw CorruptFile("array '" + name + "' has rank " + std::to_string(rank), r.offset() - 4);
    const auto rows = r.u32();
    const auto cols = r.u32();
    const std::size_t n = static_cast<std::size_t>(rows) * cols;
    if (n > r.remaining() / 4) throw CorruptFile("array '" + name + "' data truncated", r.offset());
    std::size_t slot = std::size(kArrays);
    for (std::size_t k = 0; k < std::size(kArrays); ++k) {
      if (name == kArrays[k].name) slot = k;
    }
    if (slot == std::size(kArrays)) throw CorruptFile("unknown array '" + name + "'", name_offset);
    if (seen[slot]) throw CorruptFile("duplicate array '" + name + "'", name_offset);
    seen[slot] = true;
    auto& m = ep.*kArrays[slot].member;
    m.resize(rows, cols);
    for (std::uint32_t a = 0; a < rows; ++a) {
      for (std::uint32_t b = 0; b < cols; ++b) m(a, b) = r.f32();
    }
  }
  for (std::size_t k = 0; k < seen.size(); ++k) {
    if (!seen[k]) throw CorruptFile(std::string("missing array '") + kArrays[k].name + "'", r.offset());
  }
  if (r.remaining() != 0) throw CorruptFile("trailing bytes after episode", r.offset());
  ep.validate();
  if (ep.length() != length) throw CorruptFile("header length disagrees with arrays", header_offset);
  return ep;
}

void write_episode(const std::filesystem::path& path, const Episode& ep) { io::write_file(path, encode_episode(ep)); }

Episode read_episode(const std::filesystem::path& path) { return decode_episode(io::read_file(path)); }

long Dataset::total_ticks() const {
  long n = 0;
  for (const auto& e : episodes) n += e.length();
  return n;
}

std::vector<std::filesystem::path> write_dataset(const std::filesystem::path& root, const Dataset& data,
                                                 int first_index) {
  std::vector<std::filesystem::path> out;
  int index = first_index;
  for (const auto& ep : data.episodes) {
    std::ostringstream name;
    name << "ep_" << std::setw(5) << std::setfill('0') << index++ << ".ep";
    const auto path = root / to_string(ep.meta.task) / name.str();
    write_episode(path, ep);
    out.push_back(path);
  }
  return out;
}

Dataset load_dataset(const std::filesystem::path& root) {
  Dataset data;
  if (!std::filesystem::exists(root)) return data;
  std::vector<std::filesystem::path> files;
  if (std::filesystem::is_regular_file(root)) {
    files.push_back(root);
  } else {
    for (const auto& entry : std::filesystem::recursive_directory_iterator(root)) {
      if (entry.is_regular_file() && entry.path().extension() == ".ep") files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) data.episodes.push_back(read_episode(f));
  return data;
}

NormalizationStats compute_stats(const Dataset& data) {
  if (data.empty() || data.total_ticks() == 0) throw EmptyDataset("compute_stats: dataset has no ticks");
  const int arms = data.episodes.front().meta.n_arms;
  for (const auto& e : data.episodes) {
    if (e.meta.n_arms != arms) throw ShapeMismatch("compute_stats: episodes disagree on arm count");
  }
  const long t = data.total_ticks();
  Eigen::MatrixXd pose(t, kPoseDim * arms), wrench(t, kWrenchDim * arms), action(t, kActionDim * arms);
  long row = 0;
  for (const auto& e : data.episodes) {
    pose.middleRows(row, e.length()) = e.pose.cast<double>();
    wrench.middleRows(row, e.length()) = e.wrench.cast<double>();
    action.middleRows(row, e.length()) = e.action.cast<double>();
    row += e.length();
  }
  NormalizationStats s;
  s.pose = fit_dims(pose, std::vector<NormKind>(pose.cols(), NormKind::ZScore));
  s.wrench = fit_dims(wrench, std::vector<NormKind>(wrench.cols(), NormKind::ZScore));
  std::vector<NormKind> kinds;
  for (int j = 0; j < action.cols(); ++j) kinds.push_back(action_norm_kind(j));
  s.action = fit_dims(action, kinds);
  return s;
}

SampleSource::SampleSource(const Dataset& data, NormalizationStats stats) : data_(data), stats_(std::move(stats)) {
  if (data.empty() || data.total_ticks() == 0) throw EmptyDataset("sample source: dataset has no ticks");
  if (stats_.empty()) throw MissingStats("sample source: stats not computed");
  offsets_.push_back(0);
  for (const auto& e : data.episodes) {
    actions_.push_back(stats_.normalize_chunk(e.action.cast<double>()).cast<float>());
    offsets_.push_back(offsets_.back() + e.length());
  }
}

Eigen::MatrixXf SampleSource::chunk(int e, int t, int horizon) const {
  const auto& a = actions_[static_cast<std::size_t>(e)];
  Eigen::MatrixXf out(horizon, a.cols());
  for (int i = 0; i < horizon; ++i) out.row(i) = a.row(std::min<Eigen::Index>(t + i, a.rows() - 1));
  return out;
}

TrainBatch SampleSource::sample(int batch, int horizon, std::uint64_t seed) const {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<long> pick(0, total_ticks() - 1);
  TrainBatch out;
  out.actions.resize(static_cast<Eigen::Index>(batch) * horizon, kActionDim * n_arms());
  for (int b = 0; b < batch; ++b) {
    const long g = pick(rng);
    const int e = static_cast<int>(std::upper_bound(offsets_.begin(), offsets_.end(), g) - offsets_.begin()) - 1;
    const int t = static_cast<int>(g - offsets_[static_cast<std::size_t>(e)]);
    out.observations.push_back(stats_.normalize(data_.episodes[static_cast<std::size_t>(e)].observation(t)));
    out.actions.middleRows(static_cast<Eigen::Index>(b) * horizon, horizon) = chunk(e, t, horizon);
    out.picks.emplace_back(e, t);
  }
  return out;
}

TrainBatch sample_batch(const Dataset& data, const NormalizationStats& stats, int batch, int horizon,
                        std::uint64_t seed) {
  return SampleSource(data, stats).sample(batch, horizon, seed);
}

}  // namespace cdp
