#include <doctest.h>

#include <filesystem>

#include "cdp/checkpoint.hpp"
#include "cdp/io.hpp"

using namespace cdp;

TEST_SUITE("checkpoint") {
  TEST_CASE("byte codec is little-endian") {
    io::ByteWriter w;
    w.u32(0x01020304u);
    w.f32(1.0f);
    const auto& b = w.bytes();
    CHECK(static_cast<unsigned char>(b[0]) == 0x04);
    CHECK(static_cast<unsigned char>(b[3]) == 0x01);
    CHECK(static_cast<unsigned char>(b[7]) == 0x3f);
    io::ByteReader r(b);
    CHECK(r.u32() == 0x01020304u);
    CHECK(r.f32() == 1.0f);
    CHECK_THROWS_AS(r.u8(), CorruptFile);
  }

  TEST_CASE("round trip is bit exact") {
    Checkpoint c;
    c.config = R"({"d_model":8})";
    ad::Matrix<float> mf(2, 3);
    mf << 1.5f, -0.1f, 3e-8f, 7.f, 0.f, -2.f;
    ad::Matrix<double> md(1, 2);
    md << std::numbers::pi, -1e-300;
    c.tensors.push_back(store_matrix("a", mf));
    c.tensors.push_back(store_matrix("b", md));
    const auto bytes = encode_checkpoint(c);
    const auto d = decode_checkpoint(bytes);
    CHECK(d == c);
    CHECK(encode_checkpoint(d) == bytes);
    CHECK(load_matrix<float>(*d.find("a")) == mf);
    CHECK(load_matrix<double>(*d.find("b")) == md);
    CHECK(d.find("missing") == nullptr);

    const auto path = std::filesystem::temp_directory_path() / "cdp_ckpt_test.bin";
    save_checkpoint(path, c);
    CHECK(load_checkpoint(path) == c);
    std::filesystem::remove(path);
  }

  TEST_CASE("corruption and version errors") {
    Checkpoint c;
    c.config = "{}";
    c.tensors.push_back(store_matrix<float>("w", ad::Matrix<float>::Ones(2, 2)));
    auto bytes = encode_checkpoint(c);
    CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), CorruptFile);
    CHECK_THROWS_AS(decode_checkpoint(bytes + "x"), CorruptFile);
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(decode_checkpoint(bad_magic), CorruptFile);
    auto bad_version = bytes;
    bad_version[4] = 9;
    CHECK_THROWS_AS(decode_checkpoint(bad_version), VersionMismatch);
    try {
      decode_checkpoint(bytes.substr(0, 20));
    } catch (const CorruptFile& e) {
      CHECK(e.offset() <= 20);
    }
  }
}
