#include "cdp/checkpoint.hpp"

#include "cdp/io.hpp"

namespace cdp {

namespace {
constexpr std::string_view kMagic = "CDPW";
}

const StoredTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  io::ByteWriter w;
  w.raw(kMagic);
  w.u32(Checkpoint::kVersion);
  w.u32(static_cast<std::uint32_t>(ckpt.tensors.size()));
  w.u32(static_cast<std::uint32_t>(ckpt.config.size()));
  w.raw(ckpt.config);
  for (const auto& t : ckpt.tensors) {
    std::size_t count = 1;
    for (auto d : t.dims) count *= d;
    if (count != t.data.size()) {
      throw ShapeMismatch("checkpoint tensor '" + t.name + "': dims product " + std::to_string(count) +
                          " != data length " + std::to_string(t.data.size()));
    }
    w.u32(static_cast<std::uint32_t>(t.name.size()));
    w.raw(t.name);
    w.u8(static_cast<std::uint8_t>(t.dtype));
    w.u32(static_cast<std::uint32_t>(t.dims.size()));
    for (auto d : t.dims) w.u32(d);
    for (double v : t.data) {
      if (t.dtype == DType::F32) {
        w.f32(static_cast<float>(v));
      } else {
        w.f64(v);
      }
    }
  }
  return w.bytes();
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  io::ByteReader r(bytes);
  if (r.raw(4, "magic") != kMagic) throw CorruptFile("bad checkpoint magic", 0);
  const auto version = r.u32();
  if (version != Checkpoint::kVersion) {
    throw VersionMismatch("checkpoint version " + std::to_string(version) + ", expected " +
                          std::to_string(Checkpoint::kVersion));
  }
  Checkpoint ckpt;
  const auto count = r.u32();
  const auto config_len = r.u32();
  ckpt.config = std::string(r.raw(config_len, "config"));
  for (std::uint32_t i = 0; i < count; ++i) {
    StoredTensor t;
    const auto name_len = r.u32();
    t.name = std::string(r.raw(name_len, "tensor name"));
    const auto tag_offset = r.offset();
    const auto tag = r.u8();
    if (tag != static_cast<std::uint8_t>(DType::F32) && tag != static_cast<std::uint8_t>(DType::F64)) {
      throw CorruptFile("unknown dtype tag " + std::to_string(tag), tag_offset);
    }
    t.dtype = static_cast<DType>(tag);
    const auto rank = r.u32();
    if (rank > 8) throw CorruptFile("implausible tensor rank " + std::to_string(rank), r.offset() - 4);
    std::size_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      t.dims.push_back(r.u32());
      n *= t.dims.back();
    }
    const std::size_t width = t.dtype == DType::F32 ? 4 : 8;
    if (n > r.remaining() / width) throw CorruptFile("tensor '" + t.name + "' data truncated", r.offset());
    t.data.resize(n);
    for (auto& v : t.data) v = t.dtype == DType::F32 ? static_cast<double>(r.f32()) : r.f64();
    ckpt.tensors.push_back(std::move(t));
  }
  if (r.remaining() != 0) throw CorruptFile("trailing bytes after last tensor", r.offset());
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  io::write_file(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(io::read_file(path)); }

}  // namespace cdp
