#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "model_tailor/checkpoint.hpp"
#include "model_tailor/linalg.hpp"

namespace model_tailor {

/// Inputs seen by one linear layer on the target task: a d_col × N matrix whose
/// columns are samples. Layers with a bias carry a trailing row of ones.
struct CalibrationRecord {
  std::string layer;
  linalg::Matrix x;

  [[nodiscard]] std::size_t samples() const noexcept { return x.cols(); }
};

using CalibrationSet = std::map<std::string, CalibrationRecord>;

inline constexpr double kDefaultDampFrac = 0.01;
inline constexpr const char* kCalibPrefix = "calib/";

/// Layer Hessian of the squared reconstruction loss, H = (2/N)·X·Xᵀ + λI, with
/// its inverse maintained through coordinate eliminations.
struct HessianState {
  std::string layer;
  linalg::Matrix h;
  linalg::Matrix hinv;
  double damping = 0.0;
  std::vector<bool> eliminated;

  [[nodiscard]] std::size_t dim() const noexcept { return h.rows(); }
  [[nodiscard]] std::size_t eliminated_count() const;
};

/// λ = damp_frac · mean(diag((2/N)·X·Xᵀ)).
HessianState build_hessian(const CalibrationRecord& rec, double damp_frac = kDefaultDampFrac);

/// State for an explicitly given SPD matrix (no damping applied).
HessianState hessian_from_matrix(std::string layer, const linalg::Matrix& h);

/// Removes coordinate m from the live set, downdating the inverse.
HessianState eliminate(HessianState state, std::size_t m);
void eliminate_inplace(HessianState& state, std::size_t m);

/// Diagonal of the current inverse; eliminated coordinates are absent.
std::vector<std::optional<double>> inv_diag(const HessianState& state);

Checkpoint calibration_to_checkpoint(const CalibrationSet& records);
CalibrationSet calibration_from_checkpoint(const Checkpoint& ckpt);

}  // namespace model_tailor
