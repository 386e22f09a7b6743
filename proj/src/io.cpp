#include "cdp/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "cdp/errors.hpp"

namespace cdp::io {

namespace {

template <typename T>
void put_le(std::string& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

template <typename T>
T get_le(const char* p) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

}  // namespace

void ByteWriter::u16(std::uint16_t v) { put_le(bytes_, v); }
void ByteWriter::u32(std::uint32_t v) { put_le(bytes_, v); }
void ByteWriter::u64(std::uint64_t v) { put_le(bytes_, v); }
void ByteWriter::f32(float v) { put_le(bytes_, std::bit_cast<std::uint32_t>(v)); }
void ByteWriter::f64(double v) { put_le(bytes_, std::bit_cast<std::uint64_t>(v)); }

void ByteReader::need(std::size_t n, const char* what) const {
  if (remaining() < n) {
    throw CorruptFile(std::string("truncated while reading ") + what + " (need " + std::to_string(n) +
                          " bytes, have " + std::to_string(remaining()) + ")",
                      offset_);
  }
}

std::uint8_t ByteReader::u8() {
  need(1, "u8");
  return static_cast<std::uint8_t>(data_[offset_++]);
}

std::uint16_t ByteReader::u16() {
  need(2, "u16");
  auto v = get_le<std::uint16_t>(data_.data() + offset_);
  offset_ += 2;
  return v;
}

std::uint32_t ByteReader::u32() {
  need(4, "u32");
  auto v = get_le<std::uint32_t>(data_.data() + offset_);
  offset_ += 4;
  return v;
}

std::uint64_t ByteReader::u64() {
  need(8, "u64");
  auto v = get_le<std::uint64_t>(data_.data() + offset_);
  offset_ += 8;
  return v;
}

float ByteReader::f32() { return std::bit_cast<float>(u32()); }
double ByteReader::f64() { return std::bit_cast<double>(u64()); }

std::string_view ByteReader::raw(std::size_t n, const char* what) {
  need(n, what);
  auto v = data_.substr(offset_, n);
  offset_ += n;
  return v;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace cdp::io
