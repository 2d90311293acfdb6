#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "model_tailor/checkpoint.hpp"
#include "model_tailor/hessian.hpp"
#include "model_tailor/linalg.hpp"

namespace model_tailor {

enum class DecorateMode {
  /// Sequential OBS eliminations against a per-row copy of H⁻¹.
  ObsIterative,
  /// One constrained least-squares solve per row.
  ExactLs,
};

DecorateMode parse_mode(const std::string& text);
const char* mode_name(DecorateMode mode);

struct FusionConfig {
  /// Fraction of each layer's fine-tuned parameters kept as the patch.
  double rho = 0.1;
  /// Weight of the normalized salience score; 1 − ω goes to sensitivity.
  double omega = 0.5;
  double damp_frac = kDefaultDampFrac;
  DecorateMode mode = DecorateMode::ObsIterative;
  /// When false the patch decorator is left at zero.
  bool decorate = true;
  std::size_t workers = 1;

  void validate() const;
};

struct LayerScores {
  std::string layer;
  linalg::Matrix s_delta;
  linalg::Matrix s_eps;
  linalg::Matrix s_fused;
  std::pair<double, double> delta_bounds{0.0, 0.0};
  std::pair<double, double> eps_bounds{0.0, 0.0};
};

struct LayerPatch {
  std::string layer;
  std::size_t rows = 0;
  std::size_t cols = 0;
  /// Row-major keep mask (1 = fine-tuned value retained).
  std::vector<std::uint8_t> mask;
  /// Dense decorator, zero wherever the mask is zero.
  linalg::Matrix decorator;
  /// Lowest retained fused score.
  double threshold = 0.0;

  [[nodiscard]] bool kept(std::size_t r, std::size_t c) const { return mask[r * cols + c] != 0; }
  [[nodiscard]] std::size_t retained() const;
};

/// max(1, round(ρ·n)), capped at n.
std::size_t retained_budget(double rho, std::size_t n);

/// |w_sft − w_pre| elementwise.
linalg::Matrix salience(const linalg::Matrix& w_sft, const linalg::Matrix& w_pre);

/// (w_sft − w_pre)²_ij / (2·[H⁻¹]_jj): second-order loss increase of reverting
/// one entry while the rest of its row compensates.
linalg::Matrix sensitivity(const linalg::Matrix& w_sft, const linalg::Matrix& w_pre, std::span<const double> hinv_diag);

/// Min-max normalizes each score over the layer (a constant map normalizes to
/// zero) and blends them as ω·s̃_Δ + (1 − ω)·s̃_ε.
LayerScores fuse_scores(const linalg::Matrix& s_delta, const linalg::Matrix& s_eps, double omega);

/// Keeps the retained_budget(ρ, n) highest fused scores; ties go to the lower
/// row-major index.
LayerPatch select_mask(const LayerScores& scores, double rho);

/// Fills patch.decorator. Removed columns of each row are eliminated in
/// ascending `removal_priority` (ties by column index); with no priority the
/// column order is used. Rows are processed on up to `workers` threads.
LayerPatch decorate(const linalg::Matrix& w_sft, const linalg::Matrix& w_pre, LayerPatch patch,
                    const HessianState& hstate, DecorateMode mode, const linalg::Matrix* removal_priority = nullptr,
                    std::size_t workers = 1);

/// M ⊙ (w_sft + C) + (1 − M) ⊙ w_pre. Where C is zero the fine-tuned value is
/// copied unchanged.
linalg::Matrix fuse_layer(const linalg::Matrix& w_sft, const linalg::Matrix& w_pre, const LayerPatch& patch);

/// Serializable form of a decorated layer patch.
PatchLayer to_patch_layer(const LayerPatch& patch, const linalg::Matrix& w_sft);

struct TailorResult {
  Checkpoint fused;
  TaskPatch patch;
  std::map<std::string, LayerScores> scores;
  std::map<std::string, LayerPatch> layers;
  std::map<std::string, double> damping;
};

/// Runs the full per-layer pipeline on every rank-2 tensor of `sft`.
TailorResult tailor_model(const Checkpoint& pre, const Checkpoint& sft, const CalibrationSet& calib,
                          const FusionConfig& cfg, const std::string& task_id = "");

}  // namespace model_tailor
