#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cdp/autodiff.hpp"

namespace cdp {

enum class DType : std::uint8_t { F32 = 1, F64 = 2 };

/// A named tensor as stored on disk. Values are held in double regardless of
/// dtype; F32 tensors round-trip exactly through double.
struct StoredTensor {
  std::string name;
  DType dtype = DType::F32;
  std::vector<std::uint32_t> dims;
  std::vector<double> data;

  bool operator==(const StoredTensor&) const = default;
};

/// Weight checkpoint:
///
///   "CDPW" | u32 version | u32 tensor count | u32 config length | config (JSON text)
///   per tensor: u32 name length | name | u8 dtype | u32 rank | u32 dims[rank] | data (LE)
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::string config;
  std::vector<StoredTensor> tensors;

  const StoredTensor* find(const std::string& name) const;
  bool operator==(const Checkpoint&) const = default;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::string_view bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

template <typename Scalar>
StoredTensor store_matrix(std::string name, const ad::Matrix<Scalar>& m) {
  StoredTensor t;
  t.name = std::move(name);
  t.dtype = std::is_same_v<Scalar, float> ? DType::F32 : DType::F64;
  t.dims = {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())};
  t.data.assign(m.data(), m.data() + m.size());
  return t;
}

template <typename Scalar>
ad::Matrix<Scalar> load_matrix(const StoredTensor& t) {
  Eigen::Index rows = 1, cols = 1;
  if (t.dims.size() == 1) {
    cols = t.dims[0];
  } else if (t.dims.size() == 2) {
    rows = t.dims[0];
    cols = t.dims[1];
  } else if (!t.dims.empty()) {
    throw ShapeMismatch("tensor '" + t.name + "' has rank " + std::to_string(t.dims.size()) + ", expected <= 2");
  }
  ad::Matrix<Scalar> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(t.data[static_cast<std::size_t>(i)]);
  return m;
}

}  // namespace cdp
