#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "model_tailor/checkpoint.hpp"
#include "model_tailor/hessian.hpp"
#include "model_tailor/linalg.hpp"

namespace model_tailor::toy {

// A small tanh MLP. Layer ℓ is stored as tensor "layer<ℓ>" of shape
// [out, in + 1]; the trailing column is the bias, applied to a constant 1
// input, so every parameter is an ordinary weight entry.

struct MlpSpec {
  std::vector<std::size_t> widths{16, 32, 32, 4};
  std::uint64_t seed = 0;

  void validate() const;
  [[nodiscard]] std::size_t layers() const { return widths.size() - 1; }
};

std::string layer_name(std::size_t index);

Checkpoint init_mlp(const MlpSpec& spec);
/// Widths recovered from a checkpoint's layer tensors.
std::vector<std::size_t> widths_of(const Checkpoint& ckpt);
std::vector<std::string> layer_names(const Checkpoint& ckpt);

/// Batch forward pass; rows of `inputs` are samples.
linalg::Matrix forward(const Checkpoint& ckpt, const linalg::Matrix& inputs);

enum class Split : std::uint8_t { Train = 0, Eval = 1 };

struct TaskShape {
  std::size_t d_in = 16;
  std::size_t d_out = 4;
  std::size_t teacher_hidden = 32;
  double noise = 0.05;
};

struct TaskDataset {
  std::string task_id;
  std::uint64_t seed = 0;
  linalg::Matrix inputs;   // N × d_in
  linalg::Matrix targets;  // N × d_out
  std::vector<Split> split;

  [[nodiscard]] std::size_t size() const noexcept { return inputs.rows(); }
  /// Rows carrying the given tag, in order.
  [[nodiscard]] std::vector<std::size_t> rows(Split tag) const;
};

/// Every fifth row (index ≡ 4 mod 5) is held out for evaluation.
TaskDataset gen_task(const std::string& task_id, std::uint64_t seed, std::size_t n, const TaskShape& shape = {});

Checkpoint dataset_to_checkpoint(const TaskDataset& data);
TaskDataset dataset_from_checkpoint(const Checkpoint& ckpt);

struct TrainConfig {
  double learning_rate = 0.05;
  std::size_t epochs = 100;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;

  void validate() const;
};

struct TrainResult {
  Checkpoint model;
  /// Training-split MSE measured after each epoch.
  std::vector<double> epoch_losses;
};

/// Minibatch SGD on mean squared error over the training split.
TrainResult train(const Checkpoint& init, const TaskDataset& data, const TrainConfig& cfg);

/// Mean squared error over the given rows (all rows when `rows` is empty).
double mse(const Checkpoint& ckpt, const TaskDataset& data, const std::vector<std::size_t>& rows);

/// 100 / (1 + MSE) on the evaluation split (every row if the split is empty).
double evaluate(const Checkpoint& ckpt, const TaskDataset& data);

/// Per-layer inputs (with the ones row) for the first `n_calib` training rows.
CalibrationSet capture_activations(const Checkpoint& ckpt, const TaskDataset& data, std::size_t n_calib);

/// Deterministic engine seeded from a label and a number.
std::mt19937_64 make_engine(const std::string& label, std::uint64_t seed);
/// Standard normal draw, Box-Muller on the raw engine output.
double standard_normal(std::mt19937_64& rng);

}  // namespace model_tailor::toy
