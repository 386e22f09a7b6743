#include "cdp/normalization.hpp"

#include <cmath>

#include "cdp/errors.hpp"

namespace cdp {

namespace {

constexpr double kMinSpread = 1e-8;

void require(const std::vector<DimStats>& s, Eigen::Index n, const char* what) {
  if (s.empty()) throw MissingStats(std::string("no normalization stats for ") + what);
  if (static_cast<Eigen::Index>(s.size()) != n) {
    throw MissingStats(std::string(what) + " stats cover " + std::to_string(s.size()) + " dims, value has " +
                       std::to_string(n));
  }
}

template <typename Vec>
Eigen::VectorXd concat(const std::vector<Vec>& parts) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(parts.size()) * Vec::RowsAtCompileTime);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    out.segment<Vec::RowsAtCompileTime>(static_cast<Eigen::Index>(i) * Vec::RowsAtCompileTime) = parts[i];
  }
  return out;
}

StoredTensor group_tensor(const std::string& name, const std::vector<DimStats>& dims) {
  StoredTensor t;
  t.name = "stats." + name;
  t.dtype = DType::F64;
  t.dims = {4, static_cast<std::uint32_t>(dims.size())};
  t.data.resize(4 * dims.size());
  for (std::size_t j = 0; j < dims.size(); ++j) {
    // row-major [4, dims]
    t.data[j] = dims[j].kind == NormKind::ZScore ? 0.0 : 1.0;
    t.data[dims.size() + j] = dims[j].a;
    t.data[2 * dims.size() + j] = dims[j].b;
    t.data[3 * dims.size() + j] = dims[j].constant ? 1.0 : 0.0;
  }
  return t;
}

std::vector<DimStats> group_from(const Checkpoint& ckpt, const std::string& name) {
  const auto* t = ckpt.find("stats." + name);
  if (t == nullptr) throw MissingStats("checkpoint has no stats." + name);
  if (t->dims.size() != 2 || t->dims[0] != 4) throw MissingStats("stats." + name + " has the wrong shape");
  const std::size_t n = t->dims[1];
  std::vector<DimStats> out(n);
  for (std::size_t j = 0; j < n; ++j) {
    out[j].kind = t->data[j] == 0.0 ? NormKind::ZScore : NormKind::MinMax;
    out[j].a = t->data[n + j];
    out[j].b = t->data[2 * n + j];
    out[j].constant = t->data[3 * n + j] != 0.0;
  }
  return out;
}

}  // namespace

double DimStats::normalize(double x) const {
  if (constant) return 0.0;
  return kind == NormKind::ZScore ? (x - a) / b : 2.0 * (x - a) / (b - a) - 1.0;
}

double DimStats::denormalize(double y) const {
  if (constant) return a;
  return kind == NormKind::ZScore ? y * b + a : (y + 1.0) * 0.5 * (b - a) + a;
}

ObservationFrame NormalizationStats::normalize(const ObservationFrame& raw) const {
  const Eigen::VectorXd p = concat(raw.poses);
  const Eigen::VectorXd w = concat(raw.wrenches);
  require(pose, p.size(), "pose");
  require(wrench, w.size(), "wrench");
  ObservationFrame out;
  out.grid = raw.grid;
  for (std::size_t i = 0; i < raw.poses.size(); ++i) {
    Vector9d v;
    for (int k = 0; k < kPoseDim; ++k) v(k) = pose[i * kPoseDim + k].normalize(raw.poses[i](k));
    out.poses.push_back(v);
    Vector6d u;
    for (int k = 0; k < kWrenchDim; ++k) u(k) = wrench[i * kWrenchDim + k].normalize(raw.wrenches[i](k));
    out.wrenches.push_back(u);
  }
  return out;
}

Observation NormalizationStats::normalize(const Observation& raw) const {
  return {normalize(raw.previous), normalize(raw.current)};
}

Eigen::VectorXd NormalizationStats::normalize_action(const Eigen::VectorXd& raw) const {
  require(action, raw.size(), "action");
  Eigen::VectorXd out(raw.size());
  for (Eigen::Index i = 0; i < raw.size(); ++i) out(i) = action[static_cast<std::size_t>(i)].normalize(raw(i));
  return out;
}

Eigen::VectorXd NormalizationStats::denormalize_action(const Eigen::VectorXd& normalized) const {
  require(action, normalized.size(), "action");
  Eigen::VectorXd out(normalized.size());
  for (Eigen::Index i = 0; i < normalized.size(); ++i) {
    out(i) = action[static_cast<std::size_t>(i)].denormalize(normalized(i));
  }
  return out;
}

Eigen::MatrixXd NormalizationStats::normalize_chunk(const Eigen::MatrixXd& raw) const {
  Eigen::MatrixXd out(raw.rows(), raw.cols());
  for (Eigen::Index r = 0; r < raw.rows(); ++r) out.row(r) = normalize_action(raw.row(r).transpose()).transpose();
  return out;
}

Eigen::MatrixXd NormalizationStats::denormalize_chunk(const Eigen::MatrixXd& normalized) const {
  Eigen::MatrixXd out(normalized.rows(), normalized.cols());
  for (Eigen::Index r = 0; r < normalized.rows(); ++r) {
    out.row(r) = denormalize_action(normalized.row(r).transpose()).transpose();
  }
  return out;
}

std::vector<StoredTensor> NormalizationStats::to_tensors() const {
  if (empty()) throw MissingStats("cannot store empty normalization stats");
  return {group_tensor("pose", pose), group_tensor("wrench", wrench), group_tensor("action", action)};
}

NormalizationStats NormalizationStats::from_checkpoint(const Checkpoint& ckpt) {
  NormalizationStats s;
  s.pose = group_from(ckpt, "pose");
  s.wrench = group_from(ckpt, "wrench");
  s.action = group_from(ckpt, "action");
  return s;
}

std::vector<DimStats> fit_dims(const Eigen::MatrixXd& samples, const std::vector<NormKind>& kinds) {
  if (samples.rows() == 0) throw EmptyDataset("no samples to fit normalization stats");
  if (static_cast<Eigen::Index>(kinds.size()) != samples.cols()) {
    throw ShapeMismatch("fit_dims: " + std::to_string(kinds.size()) + " kinds for " + std::to_string(samples.cols()) +
                        " columns");
  }
  std::vector<DimStats> out(kinds.size());
  const double n = static_cast<double>(samples.rows());
  for (Eigen::Index j = 0; j < samples.cols(); ++j) {
    auto& d = out[static_cast<std::size_t>(j)];
    d.kind = kinds[static_cast<std::size_t>(j)];
    const auto col = samples.col(j);
    if (d.kind == NormKind::ZScore) {
      double mean = 0.0;
      for (Eigen::Index i = 0; i < col.size(); ++i) mean += col(i);
      mean /= n;
      double var = 0.0;
      for (Eigen::Index i = 0; i < col.size(); ++i) var += (col(i) - mean) * (col(i) - mean);
      d.a = mean;
      d.b = std::sqrt(var / n);
      d.constant = !(d.b > kMinSpread);
      if (d.constant) {
        d.a = col(0);
        d.b = 1.0;
      }
    } else {
      d.a = col.minCoeff();
      d.b = col.maxCoeff();
      d.constant = !(d.b - d.a > kMinSpread);
    }
  }
  return out;
}

}  // namespace cdp
