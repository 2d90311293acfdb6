#include "model_tailor/checkpoint.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <sstream>

#include "json.hpp"
#include "model_tailor/error.hpp"

namespace model_tailor {

using nlohmann::json;

namespace {

constexpr std::size_t kPreambleSize = 16;

std::uint64_t align_up(std::uint64_t v) {
  return (v + kPayloadAlignment - 1) / kPayloadAlignment * kPayloadAlignment;
}

std::uint32_t crc_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks to stay within range.
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    const std::size_t n = std::min<std::size_t>(bytes.size() - pos, 1u << 30);
    crc = crc32(crc, bytes.data() + pos, static_cast<uInt>(n));
    pos += n;
  }
  return static_cast<std::uint32_t>(crc);
}

std::uint32_t crc_of(const std::string& s) {
  return crc_of(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <typename T>
T get_le(const std::uint8_t* p) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(p[i]) << (8 * i);
  return v;
}

std::uint64_t checked_numel(const std::vector<std::uint64_t>& shape, const std::string& name) {
  std::uint64_t n = 1;
  for (std::uint64_t d : shape) {
    if (d != 0 && n > std::numeric_limits<std::uint64_t>::max() / d) {
      throw Error(ErrorCode::Overflow, "element count of tensor '" + name + "' overflows");
    }
    n *= d;
  }
  return n;
}

std::uint64_t checked_nbytes(const std::vector<std::uint64_t>& shape, DType dtype, const std::string& name) {
  const std::uint64_t n = checked_numel(shape, name);
  const std::uint64_t w = dtype_width(dtype);
  if (n > std::numeric_limits<std::uint64_t>::max() / w / 2) {
    throw Error(ErrorCode::Overflow, "byte length of tensor '" + name + "' overflows");
  }
  return n * w;
}

void encode_payload(const Tensor& t, std::vector<std::uint8_t>& out) {
  if (t.dtype == DType::F64) {
    for (double v : t.data) put_le(out, std::bit_cast<std::uint64_t>(v));
  } else {
    for (double v : t.data) put_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
}

std::vector<double> decode_payload(const std::uint8_t* p, std::uint64_t numel, DType dtype) {
  std::vector<double> out(numel);
  if (dtype == DType::F64) {
    for (std::uint64_t i = 0; i < numel; ++i) out[i] = std::bit_cast<double>(get_le<std::uint64_t>(p + 8 * i));
  } else {
    for (std::uint64_t i = 0; i < numel; ++i) {
      out[i] = static_cast<double>(std::bit_cast<float>(get_le<std::uint32_t>(p + 4 * i)));
    }
  }
  return out;
}

DType parse_dtype(const std::string& s) {
  if (s == "f64") return DType::F64;
  if (s == "f32") return DType::F32;
  throw Error(ErrorCode::HeaderCorrupt, "unknown dtype '" + s + "'");
}

[[noreturn]] void corrupt(const std::string& what) { throw Error(ErrorCode::HeaderCorrupt, what); }

}  // namespace

std::size_t dtype_width(DType dtype) { return dtype == DType::F64 ? 8 : 4; }
const char* dtype_name(DType dtype) { return dtype == DType::F64 ? "f64" : "f32"; }

std::uint64_t Tensor::numel() const {
  std::uint64_t n = 1;
  for (std::uint64_t d : shape) n *= d;
  return n;
}

Tensor Tensor::from_matrix(const linalg::Matrix& m, DType dtype) {
  return Tensor{{m.rows(), m.cols()}, dtype, m.values()};
}

Tensor Tensor::vector(std::vector<double> values, DType dtype) {
  const std::uint64_t n = values.size();
  return Tensor{{n}, dtype, std::move(values)};
}

linalg::Matrix Tensor::to_matrix() const {
  if (shape.size() != 2) throw Error(ErrorCode::Shape, "expected a rank-2 tensor, got rank " + std::to_string(shape.size()));
  return linalg::Matrix(shape[0], shape[1], data);
}

void Checkpoint::add(const std::string& name, Tensor tensor) {
  if (name.empty()) throw Error(ErrorCode::InvalidArgument, "tensor name must not be empty");
  if (!tensors.emplace(name, std::move(tensor)).second) {
    throw Error(ErrorCode::DuplicateName, "tensor '" + name + "' already present");
  }
}

const Tensor& Checkpoint::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw Error(ErrorCode::InvalidArgument, "no tensor named '" + name + "'");
  return it->second;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape == b.shape && a.dtype == b.dtype && a.data.size() == b.data.size() &&
         (a.data.empty() || std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(double)) == 0);
}

bool bit_equal(const Checkpoint& a, const Checkpoint& b) {
  if (a.format_version != b.format_version || a.metadata != b.metadata || a.tensors.size() != b.tensors.size()) {
    return false;
  }
  return std::equal(a.tensors.begin(), a.tensors.end(), b.tensors.begin(),
                    [](const auto& x, const auto& y) { return x.first == y.first && bit_equal(x.second, y.second); });
}

std::vector<std::uint8_t> serialize(const Checkpoint& ckpt) {
  if (ckpt.format_version != kFormatVersion) {
    throw Error(ErrorCode::VersionMismatch, "cannot write format version " + std::to_string(ckpt.format_version));
  }
  json header;
  header["metadata"] = json::object();
  for (const auto& [k, v] : ckpt.metadata) header["metadata"][k] = v;
  header["tensors"] = json::object();

  std::vector<std::uint8_t> payload;
  for (const auto& [name, t] : ckpt.tensors) {
    if (name.empty()) throw Error(ErrorCode::InvalidArgument, "tensor name must not be empty");
    const std::uint64_t nbytes = checked_nbytes(t.shape, t.dtype, name);
    if (t.data.size() != checked_numel(t.shape, name)) {
      throw Error(ErrorCode::Shape, "tensor '" + name + "' holds " + std::to_string(t.data.size()) +
                                        " values for shape of " + std::to_string(checked_numel(t.shape, name)));
    }
    payload.resize(align_up(payload.size()), 0);
    const std::uint64_t offset = payload.size();
    encode_payload(t, payload);
    const auto crc = crc_of(std::span(payload).subspan(offset, nbytes));
    header["tensors"][name] = {{"crc32", crc},
                               {"dtype", dtype_name(t.dtype)},
                               {"nbytes", nbytes},
                               {"offset", offset},
                               {"shape", t.shape}};
  }

  std::string text;
  try {
    header["crc32"] = crc_of(header.dump());
    text = header.dump();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, std::string("header not encodable: ") + e.what());
  }

  std::vector<std::uint8_t> out;
  out.reserve(kPreambleSize + text.size() + kPayloadAlignment + payload.size());
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  put_le<std::uint32_t>(out, ckpt.format_version);
  put_le<std::uint64_t>(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.resize(align_up(out.size()), 0);
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

Checkpoint deserialize(std::span<const std::uint8_t> bytes) {
  if (bytes.size() >= 4 && std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw Error(ErrorCode::BadMagic, "stream does not start with MTWT");
  }
  if (bytes.size() < kPreambleSize) throw Error(ErrorCode::Truncated, "stream shorter than the preamble");
  const auto version = get_le<std::uint32_t>(bytes.data() + 4);
  if (version != kFormatVersion) {
    throw Error(ErrorCode::VersionMismatch, "format version " + std::to_string(version) + ", expected " +
                                                std::to_string(kFormatVersion));
  }
  const auto header_len = get_le<std::uint64_t>(bytes.data() + 8);
  if (header_len > bytes.size() - kPreambleSize) throw Error(ErrorCode::Truncated, "header extends past end of stream");

  const std::string text(reinterpret_cast<const char*>(bytes.data() + kPreambleSize), header_len);
  json header;
  try {
    header = json::parse(text);
  } catch (const json::exception& e) {
    corrupt(std::string("header is not valid JSON: ") + e.what());
  }
  if (!header.is_object() || header.size() != 3 || !header.contains("crc32") || !header.contains("metadata") ||
      !header.contains("tensors")) {
    corrupt("header does not have the crc32/metadata/tensors layout");
  }
  if (header.dump() != text) corrupt("header is not in canonical form");
  if (!header["crc32"].is_number_unsigned()) corrupt("header crc32 is not an unsigned integer");
  const auto stored_crc = header["crc32"].get<std::uint64_t>();
  header.erase("crc32");
  if (stored_crc != crc_of(header.dump())) corrupt("header checksum mismatch");

  const std::uint64_t data_start = align_up(kPreambleSize + header_len);
  if (data_start > bytes.size()) throw Error(ErrorCode::Truncated, "header padding is truncated");
  for (std::uint64_t i = kPreambleSize + header_len; i < data_start; ++i) {
    if (bytes[i] != 0) corrupt("non-zero header padding");
  }
  const std::uint64_t payload_size = bytes.size() - data_start;

  Checkpoint ckpt;
  ckpt.format_version = version;
  try {
    if (!header["metadata"].is_object() || !header["tensors"].is_object()) corrupt("metadata/tensors must be objects");
    for (const auto& [k, v] : header["metadata"].items()) {
      if (!v.is_string()) corrupt("metadata value for '" + k + "' is not a string");
      ckpt.metadata.emplace(k, v.get<std::string>());
    }
    std::uint64_t cursor = 0;
    for (const auto& [name, entry] : header["tensors"].items()) {
      if (!entry.is_object() || entry.size() != 5) corrupt("tensor entry '" + name + "' malformed");
      for (const char* key : {"crc32", "nbytes", "offset"}) {
        if (!entry.contains(key) || !entry[key].is_number_unsigned()) corrupt("tensor '" + name + "' missing " + key);
      }
      if (!entry.contains("dtype") || !entry["dtype"].is_string() || !entry.contains("shape") ||
          !entry["shape"].is_array()) {
        corrupt("tensor entry '" + name + "' malformed");
      }
      Tensor t;
      t.dtype = parse_dtype(entry["dtype"].get<std::string>());
      for (const auto& d : entry["shape"]) {
        if (!d.is_number_unsigned()) corrupt("tensor '" + name + "' has a non-integer dimension");
        t.shape.push_back(d.get<std::uint64_t>());
      }
      const auto nbytes = entry["nbytes"].get<std::uint64_t>();
      const auto offset = entry["offset"].get<std::uint64_t>();
      std::uint64_t expected = 0;
      try {
        expected = checked_nbytes(t.shape, t.dtype, name);
      } catch (const Error&) {
        corrupt("declared size of tensor '" + name + "' overflows");
      }
      if (nbytes != expected) corrupt("tensor '" + name + "' nbytes disagrees with its shape");
      if (offset % kPayloadAlignment != 0) corrupt("tensor '" + name + "' offset is not aligned");
      if (offset < cursor) throw Error(ErrorCode::OffsetOverlap, "tensor '" + name + "' overlaps the previous payload");
      if (offset > payload_size || nbytes > payload_size - offset) {
        throw Error(ErrorCode::Truncated, "payload of tensor '" + name + "' is truncated");
      }
      for (std::uint64_t i = cursor; i < offset; ++i) {
        if (bytes[data_start + i] != 0) corrupt("non-zero payload padding before '" + name + "'");
      }
      const auto* p = bytes.data() + data_start + offset;
      if (crc_of(std::span(p, nbytes)) != entry["crc32"].get<std::uint64_t>()) {
        throw Error(ErrorCode::PayloadChecksum, "payload of tensor '" + name + "' fails its checksum");
      }
      t.data = decode_payload(p, expected / dtype_width(t.dtype), t.dtype);
      cursor = offset + nbytes;
      ckpt.tensors.emplace(name, std::move(t));
    }
    if (payload_size != cursor) corrupt("trailing bytes after the last payload");
  } catch (const json::exception& e) {
    corrupt(std::string("header schema error: ") + e.what());
  }
  return ckpt;
}

std::uint64_t write_checkpoint(const Checkpoint& ckpt, std::ostream& sink) {
  const auto bytes = serialize(ckpt);
  sink.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!sink) throw Error(ErrorCode::Io, "write failed");
  return bytes.size();
}

Checkpoint read_checkpoint(std::istream& source) {
  std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(source), std::istreambuf_iterator<char>()};
  return deserialize(bytes);
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = serialize(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::Io, "short write to '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open '" + path.string() + "'");
  return read_checkpoint(in);
}

std::string digest(const Checkpoint& ckpt) {
  const auto bytes = serialize(ckpt);
  uLong adler = adler32(0L, Z_NULL, 0);
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    const std::size_t n = std::min<std::size_t>(bytes.size() - pos, 1u << 30);
    adler = adler32(adler, bytes.data() + pos, static_cast<uInt>(n));
    pos += n;
  }
  char buf[32];
  std::snprintf(buf, sizeof buf, "%08x%08x", crc_of(bytes), static_cast<std::uint32_t>(adler));
  return buf;
}

std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

double parse_double(const std::string& text) {
  double v = 0.0;
  auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || end != text.data() + text.size()) {
    throw Error(ErrorCode::InvalidArgument, "not a number: '" + text + "'");
  }
  return v;
}

// Task patches ---------------------------------------------------------------

void PatchLayer::validate(const std::string& name) const {
  if (decorator.size() != indices.size() || finetuned.size() != indices.size()) {
    throw Error(ErrorCode::Misaligned, "layer '" + name + "': " + std::to_string(indices.size()) + " indices, " +
                                           std::to_string(decorator.size()) + " decorator values, " +
                                           std::to_string(finetuned.size()) + " fine-tuned values");
  }
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (i > 0 && indices[i] <= indices[i - 1]) {
      throw Error(ErrorCode::Misaligned, "layer '" + name + "': indices not strictly increasing");
    }
    if (indices[i] >= rows * cols) throw Error(ErrorCode::Misaligned, "layer '" + name + "': index out of range");
  }
}

namespace {

constexpr const char* kPatchKind = "task_patch";

std::vector<double> indices_to_values(const std::vector<std::uint64_t>& idx) {
  std::vector<double> v;
  v.reserve(idx.size());
  for (auto i : idx) {
    if (i > (std::uint64_t{1} << 53)) throw Error(ErrorCode::Overflow, "index too large for exact storage");
    v.push_back(static_cast<double>(i));
  }
  return v;
}

std::uint64_t to_index(double v, const std::string& name) {
  if (!(v >= 0.0) || v != std::floor(v) || v > 9007199254740992.0) {
    throw Error(ErrorCode::Misaligned, "layer '" + name + "': stored index is not a non-negative integer");
  }
  return static_cast<std::uint64_t>(v);
}

const std::string& meta(const Checkpoint& c, const std::string& key) {
  auto it = c.metadata.find(key);
  if (it == c.metadata.end()) throw Error(ErrorCode::InvalidArgument, "task patch missing metadata '" + key + "'");
  return it->second;
}

}  // namespace

Checkpoint patch_to_checkpoint(const TaskPatch& patch) {
  Checkpoint c;
  c.metadata = {{"kind", kPatchKind},
                {"task_id", patch.task_id},
                {"pre_digest", patch.pre_digest},
                {"rho", format_double(patch.config.rho)},
                {"omega", format_double(patch.config.omega)},
                {"damp_frac", format_double(patch.config.damp_frac)},
                {"mode", patch.config.mode},
                {"decorated", patch.config.decorated ? "true" : "false"},
                {"layers", std::to_string(patch.layers.size())}};
  for (const auto& [name, layer] : patch.layers) {
    layer.validate(name);
    c.add(name + "/shape", Tensor::vector({static_cast<double>(layer.rows), static_cast<double>(layer.cols)}));
    c.add(name + "/indices", Tensor::vector(indices_to_values(layer.indices)));
    c.add(name + "/decorator", Tensor::vector(layer.decorator));
    c.add(name + "/finetuned", Tensor::vector(layer.finetuned));
    c.add(name + "/threshold", Tensor::vector({layer.threshold}));
  }
  return c;
}

TaskPatch patch_from_checkpoint(const Checkpoint& c) {
  if (meta(c, "kind") != kPatchKind) throw Error(ErrorCode::InvalidArgument, "container is not a task patch");
  TaskPatch p;
  p.task_id = meta(c, "task_id");
  p.pre_digest = meta(c, "pre_digest");
  p.config.rho = parse_double(meta(c, "rho"));
  p.config.omega = parse_double(meta(c, "omega"));
  p.config.damp_frac = parse_double(meta(c, "damp_frac"));
  p.config.mode = meta(c, "mode");
  p.config.decorated = meta(c, "decorated") == "true";

  for (const auto& [tname, t] : c.tensors) {
    const auto slash = tname.rfind('/');
    if (slash == std::string::npos) throw Error(ErrorCode::InvalidArgument, "unexpected tensor '" + tname + "' in patch");
    const std::string layer = tname.substr(0, slash);
    const std::string field = tname.substr(slash + 1);
    if (t.shape.size() != 1) throw Error(ErrorCode::Misaligned, "patch tensor '" + tname + "' is not a vector");
    PatchLayer& pl = p.layers[layer];
    if (field == "shape") {
      if (t.data.size() != 2) throw Error(ErrorCode::Misaligned, "layer '" + layer + "': shape must have 2 entries");
      pl.rows = to_index(t.data[0], layer);
      pl.cols = to_index(t.data[1], layer);
    } else if (field == "indices") {
      pl.indices.clear();
      for (double v : t.data) pl.indices.push_back(to_index(v, layer));
    } else if (field == "decorator") {
      pl.decorator = t.data;
    } else if (field == "finetuned") {
      pl.finetuned = t.data;
    } else if (field == "threshold") {
      if (t.data.size() != 1) throw Error(ErrorCode::Misaligned, "layer '" + layer + "': threshold must be scalar");
      pl.threshold = t.data[0];
    } else {
      throw Error(ErrorCode::InvalidArgument, "unexpected tensor '" + tname + "' in patch");
    }
  }
  if (std::to_string(p.layers.size()) != meta(c, "layers")) {
    throw Error(ErrorCode::Misaligned, "patch layer count disagrees with metadata");
  }
  for (const auto& [name, layer] : p.layers) {
    for (const char* field : {"/shape", "/indices", "/decorator", "/finetuned", "/threshold"}) {
      if (!c.contains(name + field)) throw Error(ErrorCode::Misaligned, "layer '" + name + "' lacks " + field);
    }
    layer.validate(name);
  }
  return p;
}

std::uint64_t write_task_patch(const TaskPatch& patch, std::ostream& sink) {
  return write_checkpoint(patch_to_checkpoint(patch), sink);
}

TaskPatch read_task_patch(std::istream& source) { return patch_from_checkpoint(read_checkpoint(source)); }

void save_task_patch(const TaskPatch& patch, const std::filesystem::path& path) {
  save_checkpoint(patch_to_checkpoint(patch), path);
}

TaskPatch load_task_patch(const std::filesystem::path& path) { return patch_from_checkpoint(load_checkpoint(path)); }

bool bit_equal(const TaskPatch& a, const TaskPatch& b) {
  return bit_equal(patch_to_checkpoint(a), patch_to_checkpoint(b));
}

}  // namespace model_tailor
