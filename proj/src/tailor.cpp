#include "model_tailor/tailor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <optional>

#include "model_tailor/error.hpp"
#include "model_tailor/parallel.hpp"

namespace model_tailor {

using linalg::Matrix;

std::size_t default_workers() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("MODEL_TAILOR_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) n = static_cast<std::size_t>(v);
  }
  return n;
}

DecorateMode parse_mode(const std::string& text) {
  if (text == "obs" || text == "obs-iterative") return DecorateMode::ObsIterative;
  if (text == "exact" || text == "exact-ls") return DecorateMode::ExactLs;
  throw Error(ErrorCode::InvalidArgument, "unknown decorate mode '" + text + "' (expected obs or exact)");
}

const char* mode_name(DecorateMode mode) { return mode == DecorateMode::ObsIterative ? "obs" : "exact"; }

void FusionConfig::validate() const {
  if (!(rho > 0.0 && rho <= 1.0)) throw Error(ErrorCode::InvalidArgument, "rho must lie in (0, 1]");
  if (!(omega >= 0.0 && omega <= 1.0)) throw Error(ErrorCode::InvalidArgument, "omega must lie in [0, 1]");
  if (!(damp_frac >= 0.0) || !std::isfinite(damp_frac)) {
    throw Error(ErrorCode::InvalidArgument, "damp_frac must be non-negative");
  }
}

std::size_t LayerPatch::retained() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

std::size_t retained_budget(double rho, std::size_t n) {
  if (!(rho > 0.0 && rho <= 1.0)) throw Error(ErrorCode::InvalidArgument, "rho must lie in (0, 1]");
  if (n == 0) return 0;
  const auto r = static_cast<std::size_t>(std::llround(rho * static_cast<double>(n)));
  return std::clamp<std::size_t>(r, 1, n);
}

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw Error(ErrorCode::Shape, std::string(what) + ": shape mismatch");
}

std::pair<double, double> bounds(const Matrix& m) {
  if (m.size() == 0) return {0.0, 0.0};
  const auto [lo, hi] = std::minmax_element(m.data().begin(), m.data().end());
  return {*lo, *hi};
}

Matrix normalize(const Matrix& m, std::pair<double, double> b) {
  Matrix out(m.rows(), m.cols());
  const double span = b.second - b.first;
  if (!(span > 0.0)) return out;
  for (std::size_t i = 0; i < m.size(); ++i) out.data()[i] = (m.data()[i] - b.first) / span;
  return out;
}

/// Removed columns of row r, ordered for elimination.
std::vector<std::size_t> removal_order(const LayerPatch& patch, std::size_t r, const Matrix* priority) {
  std::vector<std::size_t> cols;
  for (std::size_t c = 0; c < patch.cols; ++c) {
    if (!patch.kept(r, c)) cols.push_back(c);
  }
  if (priority != nullptr) {
    std::sort(cols.begin(), cols.end(), [&](std::size_t a, std::size_t b) {
      const double pa = (*priority)(r, a);
      const double pb = (*priority)(r, b);
      return pa != pb ? pa < pb : a < b;
    });
  }
  return cols;
}

void decorate_row_obs(const Matrix& w_sft, const Matrix& w_pre, LayerPatch& patch, const HessianState& hs,
                      const Matrix* priority, std::size_t r) {
  const auto removed = removal_order(patch, r, priority);
  if (removed.empty()) return;
  Matrix k = hs.hinv;
  std::vector<double> acc(patch.cols, 0.0);
  for (std::size_t m : removed) {
    // Current deviation of coordinate m from its pre-trained value, including
    // compensation it received from earlier eliminations in this row.
    const double dev = (w_sft(r, m) - w_pre(r, m)) + acc[m];
    if (dev != 0.0) {
      const double pivot = k(m, m);
      if (!(pivot > linalg::kPivotFloor)) {
        throw Error(ErrorCode::SingularPivot, "layer '" + patch.layer + "' row " + std::to_string(r) +
                                                  " column " + std::to_string(m));
      }
      const double coef = dev / pivot;
      for (std::size_t j = 0; j < patch.cols; ++j) acc[j] -= coef * k(j, m);
    }
    linalg::obs_downdate_inplace(k, m);
  }
  for (std::size_t c = 0; c < patch.cols; ++c) {
    if (patch.kept(r, c)) patch.decorator(r, c) = acc[c];
  }
}

void decorate_row_exact(const Matrix& w_sft, const Matrix& w_pre, LayerPatch& patch, const HessianState& hs,
                        std::size_t r) {
  std::vector<std::size_t> kept;
  std::vector<std::size_t> removed;
  for (std::size_t c = 0; c < patch.cols; ++c) (patch.kept(r, c) ? kept : removed).push_back(c);
  if (kept.empty() || removed.empty()) return;
  bool any = false;
  std::vector<double> fixed(removed.size());
  for (std::size_t i = 0; i < removed.size(); ++i) {
    fixed[i] = w_pre(r, removed[i]) - w_sft(r, removed[i]);
    any = any || fixed[i] != 0.0;
  }
  if (!any) return;
  // Stationarity of ½ΔᵀHΔ in the kept block: H_SS Δ_S = −H_SR Δ_R.
  std::vector<double> rhs(kept.size());
  for (std::size_t i = 0; i < kept.size(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < removed.size(); ++j) s += hs.h(kept[i], removed[j]) * fixed[j];
    rhs[i] = -s;
  }
  const auto sol = linalg::spd_solve(linalg::principal_submatrix(hs.h, kept), rhs);
  for (std::size_t i = 0; i < kept.size(); ++i) patch.decorator(r, kept[i]) = sol[i];
}

}  // namespace

Matrix salience(const Matrix& w_sft, const Matrix& w_pre) {
  require_same_shape(w_sft, w_pre, "salience");
  Matrix out(w_sft.rows(), w_sft.cols());
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = std::abs(w_sft.data()[i] - w_pre.data()[i]);
  return out;
}

Matrix sensitivity(const Matrix& w_sft, const Matrix& w_pre, std::span<const double> hinv_diag) {
  require_same_shape(w_sft, w_pre, "sensitivity");
  if (hinv_diag.size() != w_sft.cols()) throw Error(ErrorCode::Shape, "sensitivity: inverse diagonal length mismatch");
  for (std::size_t j = 0; j < hinv_diag.size(); ++j) {
    if (!(hinv_diag[j] > 0.0)) {
      throw Error(ErrorCode::Definiteness, "sensitivity: non-positive inverse diagonal at " + std::to_string(j));
    }
  }
  Matrix out(w_sft.rows(), w_sft.cols());
  for (std::size_t r = 0; r < out.rows(); ++r) {
    for (std::size_t c = 0; c < out.cols(); ++c) {
      const double d = w_sft(r, c) - w_pre(r, c);
      out(r, c) = d * d / (2.0 * hinv_diag[c]);
    }
  }
  return out;
}

LayerScores fuse_scores(const Matrix& s_delta, const Matrix& s_eps, double omega) {
  require_same_shape(s_delta, s_eps, "fuse_scores");
  if (!(omega >= 0.0 && omega <= 1.0)) throw Error(ErrorCode::InvalidArgument, "omega must lie in [0, 1]");
  LayerScores s;
  s.s_delta = s_delta;
  s.s_eps = s_eps;
  s.delta_bounds = bounds(s_delta);
  s.eps_bounds = bounds(s_eps);
  const Matrix nd = normalize(s_delta, s.delta_bounds);
  const Matrix ne = normalize(s_eps, s.eps_bounds);
  s.s_fused = Matrix(s_delta.rows(), s_delta.cols());
  for (std::size_t i = 0; i < nd.size(); ++i) {
    const double v = omega * nd.data()[i] + (1.0 - omega) * ne.data()[i];
    s.s_fused.data()[i] = std::clamp(v, 0.0, 1.0);
  }
  return s;
}

LayerPatch select_mask(const LayerScores& scores, double rho) {
  const Matrix& f = scores.s_fused;
  const std::size_t n = f.size();
  const std::size_t budget = retained_budget(rho, n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  const auto v = f.data();
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(budget), order.end(),
                    [&](std::size_t a, std::size_t b) { return v[a] != v[b] ? v[a] > v[b] : a < b; });
  LayerPatch p;
  p.layer = scores.layer;
  p.rows = f.rows();
  p.cols = f.cols();
  p.mask.assign(n, 0);
  p.decorator = Matrix(f.rows(), f.cols());
  p.threshold = budget > 0 ? v[order[budget - 1]] : 0.0;
  for (std::size_t i = 0; i < budget; ++i) p.mask[order[i]] = 1;
  return p;
}

LayerPatch decorate(const Matrix& w_sft, const Matrix& w_pre, LayerPatch patch, const HessianState& hstate,
                    DecorateMode mode, const Matrix* removal_priority, std::size_t workers) {
  require_same_shape(w_sft, w_pre, "decorate");
  if (patch.rows != w_sft.rows() || patch.cols != w_sft.cols() || patch.mask.size() != w_sft.size()) {
    throw Error(ErrorCode::Shape, "decorate: patch does not match the layer shape");
  }
  if (hstate.dim() != w_sft.cols()) throw Error(ErrorCode::Shape, "decorate: Hessian dimension != column count");
  if (hstate.eliminated_count() != 0) throw Error(ErrorCode::InvalidArgument, "decorate expects a fresh Hessian state");
  if (removal_priority != nullptr) require_same_shape(*removal_priority, w_sft, "decorate priority");
  patch.decorator = Matrix(patch.rows, patch.cols);
  parallel_for(patch.rows, workers, [&](std::size_t r) {
    if (mode == DecorateMode::ObsIterative) {
      decorate_row_obs(w_sft, w_pre, patch, hstate, removal_priority, r);
    } else {
      decorate_row_exact(w_sft, w_pre, patch, hstate, r);
    }
  });
  return patch;
}

Matrix fuse_layer(const Matrix& w_sft, const Matrix& w_pre, const LayerPatch& patch) {
  require_same_shape(w_sft, w_pre, "fuse_layer");
  if (patch.mask.size() != w_sft.size() || patch.decorator.rows() != w_sft.rows() ||
      patch.decorator.cols() != w_sft.cols()) {
    throw Error(ErrorCode::Shape, "fuse_layer: patch does not match the layer shape");
  }
  Matrix out(w_sft.rows(), w_sft.cols());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double c = patch.decorator.data()[i];
    if (patch.mask[i] != 0) {
      out.data()[i] = c == 0.0 ? w_sft.data()[i] : w_sft.data()[i] + c;
    } else {
      if (c != 0.0) {
        throw Error(ErrorCode::InvariantViolation, "layer '" + patch.layer + "': decorator non-zero outside the mask");
      }
      out.data()[i] = w_pre.data()[i];
    }
  }
  return out;
}

PatchLayer to_patch_layer(const LayerPatch& patch, const Matrix& w_sft) {
  PatchLayer pl;
  pl.rows = patch.rows;
  pl.cols = patch.cols;
  pl.threshold = patch.threshold;
  for (std::size_t i = 0; i < patch.mask.size(); ++i) {
    if (patch.mask[i] == 0) continue;
    pl.indices.push_back(i);
    pl.decorator.push_back(patch.decorator.data()[i]);
    pl.finetuned.push_back(w_sft.data()[i]);
  }
  return pl;
}

TailorResult tailor_model(const Checkpoint& pre, const Checkpoint& sft, const CalibrationSet& calib,
                          const FusionConfig& cfg, const std::string& task_id) {
  cfg.validate();
  if (pre.tensors.size() != sft.tensors.size()) throw Error(ErrorCode::Shape, "pre and sft hold different tensor sets");
  std::vector<std::string> names;
  for (const auto& [name, t] : sft.tensors) {
    auto it = pre.tensors.find(name);
    if (it == pre.tensors.end()) throw Error(ErrorCode::Shape, "tensor '" + name + "' missing from pre");
    if (it->second.shape != t.shape) throw Error(ErrorCode::Shape, "tensor '" + name + "' shape differs between pre and sft");
    if (t.shape.size() != 2) throw Error(ErrorCode::Shape, "tensor '" + name + "' is not a rank-2 layer");
    auto rec = calib.find(name);
    if (rec == calib.end()) throw Error(ErrorCode::MissingCalibration, "no calibration record for layer '" + name + "'");
    if (rec->second.x.rows() != t.shape[1]) {
      throw Error(ErrorCode::Shape, "calibration for '" + name + "' has " + std::to_string(rec->second.x.rows()) +
                                        " rows, layer has " + std::to_string(t.shape[1]) + " columns");
    }
    names.push_back(name);
  }

  struct Work {
    Matrix w_pre;
    Matrix w_sft;
    std::optional<HessianState> hessian;
    LayerScores scores;
    LayerPatch patch;
  };
  std::vector<Work> work(names.size());

  parallel_for(names.size(), cfg.workers, [&](std::size_t i) {
    const auto& name = names[i];
    Work& w = work[i];
    w.w_pre = pre.at(name).to_matrix();
    w.w_sft = sft.at(name).to_matrix();
    w.hessian = build_hessian(calib.at(name), cfg.damp_frac);
    std::vector<double> diag;
    for (const auto& d : inv_diag(*w.hessian)) diag.push_back(*d);
    w.scores = fuse_scores(salience(w.w_sft, w.w_pre), sensitivity(w.w_sft, w.w_pre, diag), cfg.omega);
    w.scores.layer = name;
    w.patch = select_mask(w.scores, cfg.rho);
    w.patch.layer = name;
  });

  TailorResult res;
  res.fused = sft;
  res.patch.task_id = task_id;
  if (res.patch.task_id.empty()) {
    auto it = sft.metadata.find("task_id");
    if (it != sft.metadata.end()) res.patch.task_id = it->second;
  }
  res.patch.pre_digest = digest(pre);
  res.patch.config = {cfg.rho, cfg.omega, cfg.damp_frac, mode_name(cfg.mode), cfg.decorate};

  for (std::size_t i = 0; i < names.size(); ++i) {
    Work& w = work[i];
    if (cfg.decorate) {
      w.patch = decorate(w.w_sft, w.w_pre, std::move(w.patch), *w.hessian, cfg.mode, &w.scores.s_fused, cfg.workers);
    }
    auto& t = res.fused.tensors.at(names[i]);
    t.data = fuse_layer(w.w_sft, w.w_pre, w.patch).values();
    res.patch.layers.emplace(names[i], to_patch_layer(w.patch, w.w_sft));
    res.damping.emplace(names[i], w.hessian->damping);
    res.scores.emplace(names[i], std::move(w.scores));
    res.layers.emplace(names[i], std::move(w.patch));
  }
  return res;
}

}  // namespace model_tailor
