#include "model_tailor/hessian.hpp"

#include <algorithm>
#include <cmath>

#include "model_tailor/error.hpp"

namespace model_tailor {

std::size_t HessianState::eliminated_count() const {
  return static_cast<std::size_t>(std::count(eliminated.begin(), eliminated.end(), true));
}

HessianState build_hessian(const CalibrationRecord& rec, double damp_frac) {
  if (!(damp_frac >= 0.0) || !std::isfinite(damp_frac)) {
    throw Error(ErrorCode::InvalidArgument, "damp_frac must be a finite non-negative number");
  }
  const auto& x = rec.x;
  const std::size_t d = x.rows();
  const std::size_t n = x.cols();
  if (n == 0 || d == 0) throw Error(ErrorCode::Shape, "calibration record '" + rec.layer + "' is empty");
  if (!linalg::all_finite(x)) throw Error(ErrorCode::InvalidArgument, "calibration record '" + rec.layer + "' has non-finite entries");

  const double scale = 2.0 / static_cast<double>(n);
  linalg::Matrix h(d, d);
  for (std::size_t i = 0; i < d; ++i) {
    const auto xi = x.row(i);
    for (std::size_t j = 0; j <= i; ++j) {
      const auto xj = x.row(j);
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k) s += xi[k] * xj[k];
      h(i, j) = scale * s;
      h(j, i) = h(i, j);
    }
  }
  double mean_diag = 0.0;
  for (std::size_t i = 0; i < d; ++i) mean_diag += h(i, i);
  mean_diag /= static_cast<double>(d);
  const double lambda = damp_frac * mean_diag;
  for (std::size_t i = 0; i < d; ++i) h(i, i) += lambda;

  HessianState st;
  st.layer = rec.layer;
  st.hinv = linalg::sym_inverse(h);
  st.h = std::move(h);
  st.damping = lambda;
  st.eliminated.assign(d, false);
  return st;
}

HessianState hessian_from_matrix(std::string layer, const linalg::Matrix& h) {
  HessianState st;
  st.layer = std::move(layer);
  st.hinv = linalg::sym_inverse(h);
  st.h = linalg::symmetrize(h);
  st.eliminated.assign(h.rows(), false);
  return st;
}

void eliminate_inplace(HessianState& state, std::size_t m) {
  if (m >= state.dim()) throw Error(ErrorCode::InvalidArgument, "eliminate index out of range");
  if (state.eliminated[m]) {
    throw Error(ErrorCode::AlreadyEliminated, "coordinate " + std::to_string(m) + " already eliminated");
  }
  linalg::obs_downdate_inplace(state.hinv, m);
  state.eliminated[m] = true;
}

HessianState eliminate(HessianState state, std::size_t m) {
  eliminate_inplace(state, m);
  return state;
}

std::vector<std::optional<double>> inv_diag(const HessianState& state) {
  std::vector<std::optional<double>> out(state.dim());
  for (std::size_t i = 0; i < state.dim(); ++i) {
    if (!state.eliminated[i]) out[i] = state.hinv(i, i);
  }
  return out;
}

Checkpoint calibration_to_checkpoint(const CalibrationSet& records) {
  Checkpoint c;
  c.metadata["kind"] = "calibration";
  for (const auto& [name, rec] : records) c.add(kCalibPrefix + name, Tensor::from_matrix(rec.x));
  return c;
}

CalibrationSet calibration_from_checkpoint(const Checkpoint& ckpt) {
  CalibrationSet out;
  const std::string prefix = kCalibPrefix;
  for (const auto& [name, t] : ckpt.tensors) {
    if (!name.starts_with(prefix)) continue;
    CalibrationRecord rec{name.substr(prefix.size()), t.to_matrix()};
    if (rec.samples() == 0) throw Error(ErrorCode::Shape, "calibration record '" + rec.layer + "' has no samples");
    out.emplace(rec.layer, std::move(rec));
  }
  return out;
}

}  // namespace model_tailor
