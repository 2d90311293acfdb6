#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <limits>
#include <random>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "model_tailor/checkpoint.hpp"
#include "model_tailor/error.hpp"
#include "support/expect.hpp"

using namespace model_tailor;
using expect::code_of;
using nlohmann::json;

namespace {

std::uint32_t crc(const std::string& s) {
  return static_cast<std::uint32_t>(::crc32(0L, reinterpret_cast<const Bytef*>(s.data()), static_cast<uInt>(s.size())));
}

std::uint32_t crc(const std::vector<std::uint8_t>& b, std::size_t off, std::size_t n) {
  return static_cast<std::uint32_t>(::crc32(0L, b.data() + off, static_cast<uInt>(n)));
}

// Assemble a container by hand from a header (without its crc) and raw payload bytes.
std::vector<std::uint8_t> craft(json header, const std::vector<std::uint8_t>& payload, std::uint32_t version = 1) {
  header["crc32"] = crc(header.dump());
  const std::string text = header.dump();
  std::vector<std::uint8_t> out{'M', 'T', 'W', 'T'};
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(version >> (8 * i)));
  const std::uint64_t len = text.size();
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(len >> (8 * i)));
  out.insert(out.end(), text.begin(), text.end());
  while (out.size() % 64) out.push_back(0);
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

std::vector<std::uint8_t> f64_bytes(const std::vector<double>& v) {
  std::vector<std::uint8_t> out;
  for (double d : v) {
    const auto u = std::bit_cast<std::uint64_t>(d);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
  }
  return out;
}

json entry(const std::vector<std::uint8_t>& payload, std::size_t offset, std::size_t nbytes,
           std::vector<std::uint64_t> shape) {
  return {{"crc32", crc(payload, offset, nbytes)},
          {"dtype", "f64"},
          {"nbytes", nbytes},
          {"offset", offset},
          {"shape", shape}};
}

std::uint64_t header_len(const std::vector<std::uint8_t>& b) {
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(b[8 + i]) << (8 * i);
  return len;
}

Checkpoint sample() {
  Checkpoint c;
  c.add("b", Tensor::from_matrix(linalg::Matrix::from_rows({{1.5, -0.0}, {std::numeric_limits<double>::denorm_min(), 3}})));
  c.add("a", Tensor::vector({0.25, -8.0, 1e300}));
  c.add("f", Tensor{{3}, DType::F32, {0.5, -1.25, 1024.0}});
  c.metadata["stage"] = "pre";
  c.metadata["task_id"] = "A";
  return c;
}

}  // namespace

TEST_CASE("empty checkpoint round-trips") {
  const Checkpoint c;
  const auto bytes = serialize(c);
  CHECK(bytes.size() % 64 == 0);
  CHECK(std::memcmp(bytes.data(), "MTWT", 4) == 0);
  const Checkpoint back = deserialize(bytes);
  CHECK(back.tensors.empty());
  CHECK(back.metadata.empty());
  CHECK(bit_equal(back, c));
}

TEST_CASE("single 2x2 f64 tensor round-trips bit-exactly") {
  Checkpoint c;
  c.add("w", Tensor::from_matrix(linalg::Matrix::from_rows({{1.0, -0.0}, {std::nan(""), 1e-310}})));
  const Checkpoint back = deserialize(serialize(c));
  CHECK(bit_equal(back, c));
  CHECK(std::signbit(back.at("w").data[1]));
}

TEST_CASE("layout") {
  const Checkpoint c = sample();
  const auto bytes = serialize(c);
  CHECK(bytes[4] == 1);
  CHECK(bytes[5] == 0);
  const auto len = header_len(bytes);
  const std::string text(reinterpret_cast<const char*>(bytes.data() + 16), len);
  const json h = json::parse(text);
  CHECK(h.dump() == text);  // compact, sorted keys
  std::vector<std::string> names;
  for (const auto& [k, _] : h["tensors"].items()) names.push_back(k);
  CHECK(names == std::vector<std::string>{"a", "b", "f"});
  const std::size_t data_start = (16 + len + 63) / 64 * 64;
  for (const auto& [name, e] : h["tensors"].items()) {
    const auto off = e["offset"].get<std::uint64_t>();
    CHECK(off % 64 == 0);
    CHECK(e["nbytes"].get<std::uint64_t>() == c.at(name).numel() * dtype_width(c.at(name).dtype));
    CHECK(e["crc32"].get<std::uint32_t>() == crc(bytes, data_start + off, e["nbytes"].get<std::size_t>()));
  }
  // payloads are little-endian doubles
  const auto off_b = h["tensors"]["b"]["offset"].get<std::size_t>();
  std::uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(bytes[data_start + off_b + i]) << (8 * i);
  CHECK(std::bit_cast<double>(u) == 1.5);
}

TEST_CASE("serialization is canonical") {
  Checkpoint a = sample();
  Checkpoint b;
  // same content, different insertion order
  b.metadata["task_id"] = "A";
  b.add("f", a.at("f"));
  b.add("a", a.at("a"));
  b.metadata["stage"] = "pre";
  b.add("b", a.at("b"));
  CHECK(serialize(a) == serialize(b));
  CHECK(serialize(a) == serialize(a));
  CHECK(digest(a) == digest(b));
  b.metadata["stage"] = "sft";
  CHECK(digest(a) != digest(b));
}

TEST_CASE("f32 tensors narrow on write") {
  Checkpoint c;
  c.add("x", Tensor{{2}, DType::F32, {0.1, 2.0}});
  const auto back = deserialize(serialize(c));
  CHECK(back.at("x").data[0] == static_cast<double>(0.1f));
  CHECK(back.at("x").data[1] == 2.0);
}

TEST_CASE("write-side validation") {
  Checkpoint c;
  c.add("x", Tensor::vector({1.0}));
  CHECK(code_of([&] { c.add("x", Tensor::vector({2.0})); }) == ErrorCode::DuplicateName);
  CHECK(code_of([&] { c.add("", Tensor::vector({2.0})); }) == ErrorCode::InvalidArgument);

  Checkpoint bad;
  bad.tensors["y"] = Tensor{{2, 2}, DType::F64, {1.0}};
  CHECK(code_of([&] { serialize(bad); }) == ErrorCode::Shape);

  Checkpoint huge;
  huge.tensors["z"] = Tensor{{std::uint64_t{1} << 40, std::uint64_t{1} << 40}, DType::F64, {}};
  CHECK(code_of([&] { serialize(huge); }) == ErrorCode::Overflow);

  Checkpoint wrong_version;
  wrong_version.format_version = 2;
  CHECK(code_of([&] { serialize(wrong_version); }) == ErrorCode::VersionMismatch);
}

TEST_CASE("corruption classes raise distinct codes") {
  const auto good = serialize(sample());

  SUBCASE("bad magic") {
    auto b = good;
    b[0] = 'X';
    CHECK(code_of([&] { deserialize(b); }) == ErrorCode::BadMagic);
  }
  SUBCASE("version mismatch") {
    auto b = good;
    b[4] = 2;
    CHECK(code_of([&] { deserialize(b); }) == ErrorCode::VersionMismatch);
  }
  SUBCASE("truncated preamble") {
    std::vector<std::uint8_t> b(good.begin(), good.begin() + 10);
    CHECK(code_of([&] { deserialize(b); }) == ErrorCode::Truncated);
  }
  SUBCASE("truncated header") {
    std::vector<std::uint8_t> b(good.begin(), good.begin() + 40);
    CHECK(code_of([&] { deserialize(b); }) == ErrorCode::Truncated);
  }
  SUBCASE("truncated payload names the tensor") {
    std::vector<std::uint8_t> b(good.begin(), good.end() - 3);
    try {
      deserialize(b);
      FAIL("accepted a truncated stream");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::Truncated);
      CHECK(std::string(e.what()).find("'f'") != std::string::npos);
    }
  }
  SUBCASE("trailing bytes") {
    auto b = good;
    b.push_back(0);
    CHECK(code_of([&] { deserialize(b); }) == ErrorCode::HeaderCorrupt);
  }
  SUBCASE("payload bit flip") {
    auto b = good;
    b.back() ^= 0x01;
    CHECK(code_of([&] { deserialize(b); }) == ErrorCode::PayloadChecksum);
  }
  SUBCASE("header checksum mismatch") {
    auto b = good;
    const auto len = header_len(b);
    std::string text(reinterpret_cast<const char*>(b.data() + 16), len);
    const auto pos = text.find("\"pre\"");
    REQUIRE(pos != std::string::npos);
    b[16 + pos + 1] = 'q';  // still valid canonical JSON
    CHECK(code_of([&] { deserialize(b); }) == ErrorCode::HeaderCorrupt);
  }
  SUBCASE("offset overlap") {
    const auto payload = f64_bytes({1, 2, 3, 4});
    json h{{"metadata", json::object()},
           {"tensors", {{"a", entry(payload, 0, 32, {4})}, {"b", entry(payload, 0, 16, {2})}}}};
    CHECK(code_of([&] { deserialize(craft(h, payload)); }) == ErrorCode::OffsetOverlap);
  }
  SUBCASE("hand-crafted well-formed file is accepted") {
    auto payload = f64_bytes({1, 2});
    payload.resize(64, 0);
    const auto tail = f64_bytes({5});
    payload.insert(payload.end(), tail.begin(), tail.end());
    json h{{"metadata", {{"k", "v"}}},
           {"tensors", {{"a", entry(payload, 0, 16, {2})}, {"b", entry(payload, 64, 8, {1})}}}};
    const auto c = deserialize(craft(h, payload));
    CHECK(c.at("b").data == std::vector<double>{5.0});
    CHECK(c.metadata.at("k") == "v");
  }
  SUBCASE("misaligned offset") {
    auto payload = f64_bytes({1, 2});
    json h{{"metadata", json::object()}, {"tensors", {{"a", entry(payload, 8, 8, {1})}}}};
    CHECK(code_of([&] { deserialize(craft(h, payload)); }) == ErrorCode::HeaderCorrupt);
  }
  SUBCASE("nbytes disagreeing with shape") {
    auto payload = f64_bytes({1, 2});
    json h{{"metadata", json::object()}, {"tensors", {{"a", entry(payload, 0, 16, {3})}}}};
    CHECK(code_of([&] { deserialize(craft(h, payload)); }) == ErrorCode::HeaderCorrupt);
  }
  SUBCASE("non-zero padding") {
    auto b = good;
    const auto len = header_len(b);
    const std::size_t pad = 16 + len;
    if (pad % 64 != 0) {
      b[pad] = 1;
      CHECK(code_of([&] { deserialize(b); }) == ErrorCode::HeaderCorrupt);
    }
  }
}

TEST_CASE("every single-byte header corruption is rejected") {
  const auto good = serialize(sample());
  const std::size_t end = (16 + header_len(good) + 63) / 64 * 64;
  std::size_t rejected = 0;
  for (std::size_t i = 0; i < end; ++i) {
    for (std::uint8_t flip : {0x01, 0x20, 0x80, 0xff}) {
      auto b = good;
      b[i] ^= flip;
      bool threw = false;
      try {
        deserialize(b);
      } catch (const Error&) {
        threw = true;
      }
      CHECK_MESSAGE(threw, "byte ", i, " flip ", int(flip));
      rejected += threw;
    }
  }
  CHECK(rejected == end * 4);
}

TEST_CASE("stream and file I/O") {
  const Checkpoint c = sample();
  std::stringstream ss;
  const auto n = write_checkpoint(c, ss);
  CHECK(n == serialize(c).size());
  CHECK(bit_equal(read_checkpoint(ss), c));

  const auto dir = std::filesystem::temp_directory_path() / "mt_test_checkpoint";
  std::filesystem::create_directories(dir);
  save_checkpoint(c, dir / "c.mtw");
  CHECK(bit_equal(load_checkpoint(dir / "c.mtw"), c));
  CHECK(code_of([&] { load_checkpoint(dir / "missing.mtw"); }) == ErrorCode::Io);
  std::filesystem::remove_all(dir);
}

TEST_CASE("format_double is shortest round-trip") {
  for (double v : {0.1, 1.0 / 3.0, 1e-300, -2.5, 0.05}) CHECK(parse_double(format_double(v)) == v);
  CHECK(format_double(0.1) == "0.1");
  CHECK(code_of([] { parse_double("abc"); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("task patches") {
  SUBCASE("empty layers") {
    TaskPatch p;
    p.task_id = "B";
    p.pre_digest = "deadbeef";
    std::stringstream ss;
    write_task_patch(p, ss);
    CHECK(bit_equal(read_task_patch(ss), p));
  }
  SUBCASE("one layer with indices [0,3]") {
    TaskPatch p;
    p.task_id = "B";
    p.config.rho = 0.5;
    p.layers["layer0"] = PatchLayer{2, 2, {0, 3}, {0.5, -0.25}, {1.0, 2.0}, 0.75};
    std::stringstream ss;
    write_task_patch(p, ss);
    const TaskPatch back = read_task_patch(ss);
    CHECK(bit_equal(back, p));
    CHECK(back.layers.at("layer0").decorator == std::vector<double>{0.5, -0.25});
    CHECK(back.config.rho == 0.5);
  }
  SUBCASE("misaligned lists") {
    TaskPatch p;
    p.layers["l"] = PatchLayer{2, 2, {0, 3}, {0.5}, {1.0, 2.0}, 0.0};
    CHECK(code_of([&] { patch_to_checkpoint(p); }) == ErrorCode::Misaligned);
    p.layers["l"] = PatchLayer{2, 2, {3, 0}, {0.5, 1}, {1.0, 2.0}, 0.0};
    CHECK(code_of([&] { patch_to_checkpoint(p); }) == ErrorCode::Misaligned);
    p.layers["l"] = PatchLayer{2, 2, {0, 4}, {0.5, 1}, {1.0, 2.0}, 0.0};
    CHECK(code_of([&] { patch_to_checkpoint(p); }) == ErrorCode::Misaligned);
  }
  SUBCASE("reading a misaligned container") {
    TaskPatch p;
    p.layers["l"] = PatchLayer{2, 2, {0, 3}, {0.5, 1}, {1.0, 2.0}, 0.0};
    Checkpoint c = patch_to_checkpoint(p);
    c.tensors["l/decorator"] = Tensor::vector({0.5});
    CHECK(code_of([&] { patch_from_checkpoint(deserialize(serialize(c))); }) == ErrorCode::Misaligned);
  }
  SUBCASE("a weights checkpoint is not a patch") {
    CHECK(code_of([] { patch_from_checkpoint(sample()); }) == ErrorCode::InvalidArgument);
  }
}

TEST_CASE("randomized round trips") {
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<int> dim(0, 5);
  std::uniform_int_distribution<int> count(0, 4);
  for (int trial = 0; trial < 100; ++trial) {
    Checkpoint c;
    const int n = count(rng);
    for (int t = 0; t < n; ++t) {
      Tensor x;
      const int rank = dim(rng) % 3 + 1;
      for (int r = 0; r < rank; ++r) x.shape.push_back(static_cast<std::uint64_t>(dim(rng)));
      x.dtype = rng() % 2 ? DType::F64 : DType::F32;
      for (std::uint64_t i = 0; i < x.numel(); ++i) {
        const double v = std::bit_cast<double>(rng());
        x.data.push_back(x.dtype == DType::F32 ? static_cast<double>(static_cast<float>(v)) : v);
      }
      c.tensors["t" + std::to_string(rng() % 1000)] = x;
    }
    c.metadata["trial"] = std::to_string(trial);
    const auto bytes = serialize(c);
    const Checkpoint back = deserialize(bytes);
    CHECK(bit_equal(back, c));
    CHECK(serialize(back) == bytes);
  }
}
