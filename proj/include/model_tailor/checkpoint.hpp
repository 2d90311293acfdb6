#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "model_tailor/linalg.hpp"

namespace model_tailor {

// .mtw container
//
//   "MTWT" | u32 LE version | u64 LE header length | JSON header | payloads
//
// The header is compact JSON with sorted keys:
//   {"crc32": <crc of the header serialized without this key>,
//    "metadata": {string: string},
//    "tensors": {name: {"crc32", "dtype", "nbytes", "offset", "shape"}}}
// Payload offsets are relative to the first 64-byte aligned file position
// after the header; every payload starts on a 64-byte boundary and the gaps
// are zero-filled. Values are little-endian.

inline constexpr char kMagic[4] = {'M', 'T', 'W', 'T'};
inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr std::size_t kPayloadAlignment = 64;

enum class DType { F32, F64 };

std::size_t dtype_width(DType dtype);
const char* dtype_name(DType dtype);

/// A tensor is held in double precision regardless of its storage dtype; f32
/// tensors are widened on load and narrowed again on save.
struct Tensor {
  std::vector<std::uint64_t> shape;
  DType dtype = DType::F64;
  std::vector<double> data;

  [[nodiscard]] std::uint64_t numel() const;

  static Tensor from_matrix(const linalg::Matrix& m, DType dtype = DType::F64);
  static Tensor vector(std::vector<double> values, DType dtype = DType::F64);
  /// Requires a rank-2 tensor.
  [[nodiscard]] linalg::Matrix to_matrix() const;
};

struct Checkpoint {
  std::uint32_t format_version = kFormatVersion;
  std::map<std::string, Tensor> tensors;
  std::map<std::string, std::string> metadata;

  /// Inserts a tensor, rejecting names already present.
  void add(const std::string& name, Tensor tensor);
  [[nodiscard]] const Tensor& at(const std::string& name) const;
  [[nodiscard]] bool contains(const std::string& name) const { return tensors.contains(name); }
};

/// Bitwise equality of tensors (distinguishes -0.0 from 0.0 and compares NaN payloads).
bool bit_equal(const Tensor& a, const Tensor& b);
bool bit_equal(const Checkpoint& a, const Checkpoint& b);

std::vector<std::uint8_t> serialize(const Checkpoint& ckpt);
Checkpoint deserialize(std::span<const std::uint8_t> bytes);

std::uint64_t write_checkpoint(const Checkpoint& ckpt, std::ostream& sink);
Checkpoint read_checkpoint(std::istream& source);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Content digest of a checkpoint's canonical serialization, used to tie task
/// patches to the pre-trained weights they were computed against.
std::string digest(const Checkpoint& ckpt);

/// Shortest decimal text that parses back to the same double.
std::string format_double(double v);
double parse_double(const std::string& text);

// Task patches

struct PatchLayer {
  std::uint64_t rows = 0;
  std::uint64_t cols = 0;
  /// Flat row-major indices of retained parameters, strictly increasing.
  std::vector<std::uint64_t> indices;
  /// Decorator (compensation) values aligned with `indices`.
  std::vector<double> decorator;
  /// Fine-tuned parameter values aligned with `indices`.
  std::vector<double> finetuned;
  /// Lowest retained fused score.
  double threshold = 0.0;

  /// Throws ErrorCode::Misaligned when the index/value lists disagree.
  void validate(const std::string& name) const;
};

struct PatchConfig {
  double rho = 0.1;
  double omega = 0.5;
  double damp_frac = 0.01;
  std::string mode = "obs";
  bool decorated = true;
};

struct TaskPatch {
  std::string task_id;
  std::string pre_digest;
  PatchConfig config;
  std::map<std::string, PatchLayer> layers;
};

Checkpoint patch_to_checkpoint(const TaskPatch& patch);
TaskPatch patch_from_checkpoint(const Checkpoint& ckpt);

std::uint64_t write_task_patch(const TaskPatch& patch, std::ostream& sink);
TaskPatch read_task_patch(std::istream& source);
void save_task_patch(const TaskPatch& patch, const std::filesystem::path& path);
TaskPatch load_task_patch(const std::filesystem::path& path);

bool bit_equal(const TaskPatch& a, const TaskPatch& b);

}  // namespace model_tailor
