// Acceptance suite: one line per criterion, non-zero exit if any fails.

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "model_tailor/checkpoint.hpp"
#include "model_tailor/error.hpp"
#include "model_tailor/hessian.hpp"
#include "model_tailor/metrics.hpp"
#include "model_tailor/multitask.hpp"
#include "model_tailor/scenario.hpp"
#include "model_tailor/tailor.hpp"
#include "model_tailor/toymodel.hpp"
#include "support/oracles.hpp"

using namespace model_tailor;
using linalg::Matrix;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Matrix gaussian(std::mt19937_64& rng, std::size_t r, std::size_t c) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(r, c);
  for (double& v : m.data()) v = n(rng);
  return m;
}

std::vector<double> inv_diag_values(const HessianState& s) {
  std::vector<double> d;
  for (const auto& v : inv_diag(s)) d.push_back(*v);
  return d;
}

// AC1 ------------------------------------------------------------------------

Outcome ac1() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(101);
  std::uniform_int_distribution<std::size_t> dcol(2, 16);
  std::uniform_int_distribution<std::size_t> drow(1, 8);
  std::uniform_real_distribution<double> rho_d(0.1, 0.9);
  double worst = 0.0;
  std::size_t entries = 0;
  for (int layer = 0; layer < 200; ++layer) {
    const std::size_t d = dcol(rng);
    const std::size_t rows = drow(rng);
    const auto hs = build_hessian({"l", gaussian(rng, d, 3 * d)}, kDefaultDampFrac);
    const Matrix w_pre = gaussian(rng, rows, d);
    Matrix w_sft = w_pre;
    const Matrix noise = gaussian(rng, rows, d);
    for (std::size_t i = 0; i < w_sft.size(); ++i) w_sft.data()[i] += 0.1 * noise.data()[i];
    const auto scores =
        fuse_scores(salience(w_sft, w_pre), sensitivity(w_sft, w_pre, inv_diag_values(hs)), 0.5);
    const auto mask = select_mask(scores, rho_d(rng));
    const auto obs = decorate(w_sft, w_pre, mask, hs, DecorateMode::ObsIterative, &scores.s_fused);
    const auto exact = decorate(w_sft, w_pre, mask, hs, DecorateMode::ExactLs);
    for (std::size_t i = 0; i < obs.decorator.size(); ++i) {
      if (!mask.mask[i]) continue;
      const double e = exact.decorator.data()[i];
      const double o = obs.decorator.data()[i];
      if (e == 0.0 && o == 0.0) continue;
      worst = std::max(worst, std::abs(o - e) / std::abs(e));
      ++entries;
    }
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-7 && secs < 5.0,
          fmt("200 layers, %zu decorated entries, max relative error %.3g (tol 1e-7), %.2f s (limit 5 s)", entries,
              worst, secs)};
}

// AC2 ------------------------------------------------------------------------

Outcome ac2() {
  std::mt19937_64 rng(202);
  std::uniform_int_distribution<std::size_t> dim(2, 12);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t d = dim(rng);
    const std::size_t n = 3 * d;
    const Matrix x = gaussian(rng, d, n);
    const auto hs = build_hessian({"l", x}, 1e-8);
    const Matrix w_pre = gaussian(rng, 1, d);
    const Matrix w_sft = gaussian(rng, 1, d);
    const std::size_t m = rng() % d;
    const double s_eps = sensitivity(w_sft, w_pre, inv_diag_values(hs))(0, m);
    // Optimal compensation from the KKT oracle, then the realized increase of
    // the reconstruction loss (1/N)||(w - w_sft) X||^2.
    const auto delta = oracle::constrained_min(hs.h, {m}, {w_pre(0, m) - w_sft(0, m)});
    std::vector<double> a(d), b(d);
    for (std::size_t j = 0; j < d; ++j) {
      b[j] = w_sft(0, j);
      a[j] = w_sft(0, j) + delta[j];
    }
    const double realized = oracle::row_reconstruction_loss(a, b, x);
    worst = std::max(worst, oracle::rel_err(s_eps, realized));
  }
  return {worst <= 1e-6, fmt("100 single removals at damping 1e-8, max relative error %.3g (tol 1e-6)", worst)};
}

// AC3 ------------------------------------------------------------------------

Outcome ac3() {
  std::mt19937_64 rng(303);
  const Matrix h = oracle::random_spd(rng, 8);
  const auto base = hessian_from_matrix("l", h);
  double worst_oracle = 0.0;
  double worst_perm = 0.0;
  std::size_t sequences = 0;

  std::function<void(std::vector<std::size_t>&, const HessianState&)> walk = [&](std::vector<std::size_t>& seq,
                                                                                 const HessianState& st) {
    if (!seq.empty()) {
      ++sequences;
      std::vector<std::size_t> keep;
      for (std::size_t i = 0; i < 8; ++i)
        if (std::find(seq.begin(), seq.end(), i) == seq.end()) keep.push_back(i);
      const Matrix want = oracle::delete_and_invert(h, seq);
      const Matrix got = linalg::principal_submatrix(st.hinv, keep);
      worst_oracle = std::max(worst_oracle, linalg::max_abs_diff(got, want) / linalg::max_abs(want));

      std::vector<std::size_t> perm = seq;
      std::sort(perm.begin(), perm.end());
      do {
        HessianState s = base;
        for (std::size_t m : perm) eliminate_inplace(s, m);
        worst_perm = std::max(worst_perm, linalg::max_abs_diff(s.hinv, st.hinv));
      } while (std::next_permutation(perm.begin(), perm.end()));
    }
    if (seq.size() == 3) return;
    for (std::size_t m = 0; m < 8; ++m) {
      if (st.eliminated[m]) continue;
      seq.push_back(m);
      walk(seq, eliminate(st, m));
      seq.pop_back();
    }
  };
  std::vector<std::size_t> seq;
  walk(seq, base);
  return {worst_oracle <= 1e-7 && worst_perm <= 1e-9 && sequences == 8 + 56 + 336,
          fmt("%zu sequences, max relative error vs delete-and-invert %.3g (tol 1e-7), max order spread %.3g (tol 1e-9)",
              sequences, worst_oracle, worst_perm)};
}

// AC4 ------------------------------------------------------------------------

Outcome ac4() {
  std::vector<std::string> failures;
  const auto a = toy::gen_task("A", 404, 400);
  const auto b = toy::gen_task("B", 404, 400);
  const auto pre = toy::train(toy::init_mlp({{16, 20, 4}, 404}), a, {0.05, 20, 32, 404}).model;
  const auto sft = toy::train(pre, b, {0.02, 5, 32, 405}).model;
  const auto calib = toy::capture_activations(sft, b, 63);

  FusionConfig full;
  full.rho = 1.0;
  if (serialize(tailor_model(pre, sft, calib, full).fused) != serialize(sft)) failures.push_back("rho=1");
  for (auto mode : {DecorateMode::ObsIterative, DecorateMode::ExactLs}) {
    FusionConfig cfg;
    cfg.mode = mode;
    if (serialize(tailor_model(pre, pre, calib, cfg).fused) != serialize(pre)) failures.push_back("sft=pre");
  }

  // Orthogonal calibration inputs give a diagonal Hessian; rows decouple.
  std::mt19937_64 rng(406);
  bool c_zero = true;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t d = 2 + rng() % 10;
    const Matrix w_pre = gaussian(rng, 4, d);
    const Matrix w_sft = gaussian(rng, 4, d);
    const auto scores = fuse_scores(salience(w_sft, w_pre), salience(w_sft, w_pre), 0.5);
    const auto mask = select_mask(scores, 0.3);
    for (auto mode : {DecorateMode::ObsIterative, DecorateMode::ExactLs}) {
      const auto p = decorate(w_sft, w_pre, mask, hessian_from_matrix("l", Matrix::identity(d)), mode, &scores.s_fused);
      for (double c : p.decorator.data()) c_zero = c_zero && c == 0.0;
    }
  }
  Checkpoint one;
  one.add("w", Tensor::from_matrix(gaussian(rng, 3, 4)));
  Checkpoint two;
  two.add("w", Tensor::from_matrix(gaussian(rng, 3, 4)));
  CalibrationSet eye;
  eye["w"] = {"w", Matrix::identity(4)};
  FusionConfig undamped;
  undamped.damp_frac = 0.0;
  undamped.rho = 0.5;
  for (const auto& [_, l] : tailor_model(one, two, eye, undamped).layers)
    for (double c : l.decorator.data()) c_zero = c_zero && c == 0.0;
  if (!c_zero) failures.push_back("C under H = I");

  std::string detail = "rho=1 gives sft bytes; sft=pre gives pre bytes; C == 0 under identity Hessian";
  if (!failures.empty()) {
    detail = "failed:";
    for (const auto& f : failures) detail += " " + f;
  }
  return {failures.empty(), detail};
}

// AC5 ------------------------------------------------------------------------

std::vector<std::size_t> kept(const LayerPatch& p) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < p.mask.size(); ++i)
    if (p.mask[i]) out.push_back(i);
  return out;
}

Outcome ac5() {
  std::mt19937_64 rng(505);
  std::size_t cases = 0;
  std::size_t bad = 0;
  for (std::size_t n : {1, 2, 3, 4, 5, 7, 10, 11, 16, 33, 64, 100, 257, 1000}) {
    for (double rho : {0.001, 0.01, 0.05, 0.1, 0.15, 0.25, 1.0 / 3.0, 0.5, 0.75, 0.9, 0.99, 1.0}) {
      // quantized scores produce plenty of ties
      Matrix f(1, n);
      for (double& v : f.data()) v = static_cast<double>(rng() % 7) / 6.0;
      LayerScores s;
      s.s_fused = f;
      const auto p = select_mask(s, rho);
      const auto budget = static_cast<std::size_t>(std::max(1.0, std::floor(rho * static_cast<double>(n) + 0.5)));
      const auto want = oracle::top_k_full_sort(f.values(), std::min(budget, n));
      ++cases;
      if (p.retained() != std::min(budget, n) || kept(p) != want) ++bad;
    }
  }
  std::size_t endpoint_bad = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t r = 1 + rng() % 8;
    const std::size_t c = 1 + rng() % 16;
    const Matrix sd = oracle::random_matrix(rng, r, c, 0.0, 3.0);
    const Matrix se = oracle::random_matrix(rng, r, c, 0.0, 9.0);
    const double rho = 0.05 + 0.9 * static_cast<double>(rng() % 1000) / 1000.0;
    const auto k = retained_budget(rho, r * c);
    endpoint_bad += kept(select_mask(fuse_scores(sd, se, 1.0), rho)) != oracle::top_k_full_sort(sd.values(), k);
    endpoint_bad += kept(select_mask(fuse_scores(sd, se, 0.0), rho)) != oracle::top_k_full_sort(se.values(), k);
  }
  return {bad == 0 && endpoint_bad == 0,
          fmt("%zu (n, rho) grid cases, %zu mismatches; 200 omega-endpoint rankings, %zu mismatches", cases, bad,
              endpoint_bad)};
}

// AC6 ------------------------------------------------------------------------

Outcome ac6() {
  const double h = metrics::hscore(std::vector<double>{92.94}, std::vector<double>{94.40});
  std::mt19937_64 rng(606);
  std::uniform_real_distribution<double> u(1e-3, 100.0);
  std::size_t bad = 0;
  for (int i = 0; i < 1000; ++i) {
    const double a = u(rng);
    const double b = u(rng);
    const double ab = metrics::hscore_of_means(a, b);
    const double ba = metrics::hscore_of_means(b, a);
    const double lo = std::min(a, b) * (1.0 - 1e-15);
    const double hi = (a + b) / 2.0 * (1.0 + 1e-15);
    if (ab != ba || ab < lo || ab > hi) ++bad;
  }
  return {std::abs(h - 93.67) <= 0.01 && bad == 0,
          fmt("hscore(92.94, 94.40) = %.4f (anchor 93.67 +/- 0.01); 1000 random pairs, %zu property violations", h,
              bad)};
}

// AC7 / AC8 ------------------------------------------------------------------

struct ScenarioRun {
  ScenarioConfig cfg;
  TrainedModels models;
  std::map<std::string, toy::TaskDataset> data;
  std::map<std::string, CalibrationSet> calib;
};

ScenarioRun prepare(const ScenarioConfig& cfg) {
  ScenarioRun r;
  r.cfg = cfg;
  r.models = run_training(cfg);
  for (const auto& id : cfg.origin_tasks) r.data.emplace(id, scenario_dataset(cfg, id));
  for (const auto& id : cfg.target_tasks) {
    r.data.emplace(id, scenario_dataset(cfg, id));
    const auto& sft = r.models.sft.at(id);
    r.calib.emplace(id, toy::capture_activations(sft, r.data.at(id), default_calibration_samples(cfg, sft)));
  }
  return r;
}

Outcome ac7(const ScenarioRun& run, double train_secs) {
  const auto t0 = Clock::now();
  const std::string a = run.cfg.origin_tasks.front();
  const std::string b = run.cfg.target_tasks.front();
  FusionConfig cfg = run.cfg.fusion;
  cfg.rho = 0.1;
  cfg.omega = 0.5;
  cfg.workers = 1;
  const auto& pre = run.models.pre;
  const auto& sft = run.models.sft.at(b);
  const auto fused = tailor_model(pre, sft, run.calib.at(b), cfg, b).fused;
  FusionConfig plain = cfg;
  plain.decorate = false;
  const auto undecorated = tailor_model(pre, sft, run.calib.at(b), plain, b).fused;

  const auto& da = run.data.at(a);
  const auto& db = run.data.at(b);
  const double pre_a = toy::evaluate(pre, da), pre_b = toy::evaluate(pre, db);
  const double sft_a = toy::evaluate(sft, da), sft_b = toy::evaluate(sft, db);
  const double fus_a = toy::evaluate(fused, da), fus_b = toy::evaluate(fused, db);
  const double und_b = toy::evaluate(undecorated, db);
  const double secs = train_secs + seconds_since(t0);
  const bool ok_a = sft_a < pre_a;
  const bool ok_b = fus_a > sft_a;
  const bool ok_c = fus_b > pre_b;
  const bool ok_d = fus_b >= und_b;
  return {ok_a && ok_b && ok_c && ok_d && secs < 60.0,
          fmt("%s-score pre %.2f sft %.2f fused %.2f; %s-score pre %.2f sft %.2f fused %.2f no-decorator %.2f; "
              "(a)%s (b)%s (c)%s (d)%s; %.1f s (limit 60 s)",
              a.c_str(), pre_a, sft_a, fus_a, b.c_str(), pre_b, sft_b, fus_b, und_b, ok_a ? "ok" : "FAIL",
              ok_b ? "ok" : "FAIL", ok_c ? "ok" : "FAIL", ok_d ? "ok" : "FAIL", secs)};
}

Outcome ac8(const ScenarioRun& run) {
  if (run.cfg.target_tasks.size() < 2) return {false, "scenario needs two target tasks"};
  FusionConfig cfg = run.cfg.fusion;
  cfg.rho = 0.05;
  std::vector<TaskPatch> patches;
  std::map<std::string, toy::TaskDataset> data;
  for (std::size_t i = 0; i < 2; ++i) {
    const auto& id = run.cfg.target_tasks[i];
    patches.push_back(tailor_model(run.models.pre, run.models.sft.at(id), run.calib.at(id), cfg, id).patch);
    data.emplace(id, run.data.at(id));
  }
  const auto rep = stitch_report(run.models.pre, patches, data, run.cfg.averaging);
  bool ok = rep.comparisons.size() == 2;
  std::string detail;
  for (const auto& c : rep.comparisons) {
    ok = ok && c.stitched_better;
    detail += fmt("on %s: stitched %.2f vs fused:%s %.2f; ", c.eval_task.c_str(), c.stitched_score,
                  c.fusion_task.c_str(), c.single_score);
  }
  return {ok, detail + "two 5% patches"};
}

// AC9 ------------------------------------------------------------------------

Checkpoint random_checkpoint(std::mt19937_64& rng) {
  Checkpoint c;
  const int tensors = static_cast<int>(rng() % 6);
  for (int t = 0; t < tensors; ++t) {
    Tensor x;
    const int rank = static_cast<int>(rng() % 4);
    for (int r = 0; r < rank; ++r) x.shape.push_back(rng() % 6);
    x.dtype = rng() % 2 ? DType::F64 : DType::F32;
    for (std::uint64_t i = 0; i < x.numel(); ++i) {
      const double v = std::bit_cast<double>(rng());
      x.data.push_back(x.dtype == DType::F32 ? static_cast<double>(static_cast<float>(v)) : v);
    }
    c.tensors["t/" + std::to_string(rng() % 100000)] = std::move(x);
  }
  const int meta = static_cast<int>(rng() % 4);
  for (int m = 0; m < meta; ++m) c.metadata["k" + std::to_string(rng() % 100)] = "v\"\\\n" + std::to_string(rng());
  return c;
}

TaskPatch random_patch(std::mt19937_64& rng) {
  TaskPatch p;
  p.task_id = "task" + std::to_string(rng() % 100);
  p.pre_digest = std::to_string(rng());
  p.config.rho = static_cast<double>(rng() % 1000 + 1) / 1000.0;
  p.config.omega = std::bit_cast<double>(rng() >> 12 | 0x3fe0000000000000ULL) - 0.5;
  p.config.mode = rng() % 2 ? "obs" : "exact";
  p.config.decorated = rng() % 2;
  const int layers = static_cast<int>(rng() % 4);
  for (int l = 0; l < layers; ++l) {
    PatchLayer pl;
    pl.rows = 1 + rng() % 6;
    pl.cols = 1 + rng() % 6;
    for (std::uint64_t i = 0; i < pl.rows * pl.cols; ++i) {
      if (rng() % 3 != 0) continue;
      pl.indices.push_back(i);
      pl.decorator.push_back(std::bit_cast<double>(rng()));
      pl.finetuned.push_back(std::bit_cast<double>(rng()));
    }
    pl.threshold = static_cast<double>(rng() % 1000) / 999.0;
    p.layers["layer" + std::to_string(l)] = pl;
  }
  return p;
}

ErrorCode code_of(const std::vector<std::uint8_t>& bytes) {
  try {
    deserialize(bytes);
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::Io;  // sentinel: accepted
}

Outcome ac9() {
  std::mt19937_64 rng(909);
  std::size_t roundtrip_bad = 0;
  std::size_t determinism_bad = 0;
  for (int i = 0; i < 500; ++i) {
    const Checkpoint c = random_checkpoint(rng);
    const auto bytes = serialize(c);
    const auto back = deserialize(bytes);
    roundtrip_bad += !bit_equal(back, c);
    determinism_bad += serialize(back) != bytes || serialize(c) != bytes;

    const TaskPatch p = random_patch(rng);
    std::stringstream ss;
    write_task_patch(p, ss);
    const std::string first = ss.str();
    const TaskPatch pb = read_task_patch(ss);
    roundtrip_bad += !bit_equal(pb, p);
    std::stringstream again;
    write_task_patch(pb, again);
    determinism_bad += again.str() != first;
  }

  // One instance of every corruption class.
  Checkpoint c;
  c.add("a", Tensor::vector({1.0, 2.0, 3.0}));
  c.add("b", Tensor::vector({4.0, 5.0}));
  const auto good = serialize(c);
  std::uint64_t hlen = 0;
  for (int i = 0; i < 8; ++i) hlen |= static_cast<std::uint64_t>(good[8 + i]) << (8 * i);
  std::vector<std::string> class_fail;
  auto expect = [&](const char* what, std::vector<std::uint8_t> b, ErrorCode want) {
    if (code_of(b) != want) class_fail.emplace_back(what);
  };
  {
    auto b = good;
    b[1] = 'X';
    expect("magic", b, ErrorCode::BadMagic);
  }
  {
    auto b = good;
    b[4] = 7;
    expect("version", b, ErrorCode::VersionMismatch);
  }
  expect("truncation", std::vector<std::uint8_t>(good.begin(), good.end() - 1), ErrorCode::Truncated);
  {
    auto b = good;
    b.back() ^= 0x10;
    expect("payload checksum", b, ErrorCode::PayloadChecksum);
  }
  {
    auto b = good;
    b[16] = ' ';  // header no longer canonical JSON
    expect("header", b, ErrorCode::HeaderCorrupt);
  }
  {
    // Second tensor's offset moved onto the first payload; the header crc is
    // recomputed so only the overlap is wrong.
    const std::string text(reinterpret_cast<const char*>(good.data() + 16), hlen);
    auto h = nlohmann::json::parse(text);
    h.erase("crc32");
    h["tensors"]["b"]["offset"] = 0;
    const std::string body = h.dump();
    h["crc32"] = ::crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()));
    const std::string patched = h.dump();
    std::vector<std::uint8_t> b(good.begin(), good.begin() + 8);
    for (int i = 0; i < 8; ++i) b.push_back(static_cast<std::uint8_t>(patched.size() >> (8 * i)));
    b.insert(b.end(), patched.begin(), patched.end());
    while (b.size() % 64) b.push_back(0);
    b.insert(b.end(), good.begin() + static_cast<std::ptrdiff_t>((16 + hlen + 63) / 64 * 64), good.end());
    expect("offset overlap", b, ErrorCode::OffsetOverlap);
  }

  std::size_t header_bytes = 0;
  std::size_t accepted = 0;
  const std::size_t end = (16 + hlen + 63) / 64 * 64;
  for (std::size_t i = 0; i < end; ++i) {
    for (int bit = 0; bit < 8; ++bit) {
      auto b = good;
      b[i] ^= static_cast<std::uint8_t>(1u << bit);
      ++header_bytes;
      accepted += code_of(b) == ErrorCode::Io;
    }
  }
  const bool ok = roundtrip_bad == 0 && determinism_bad == 0 && class_fail.empty() && accepted == 0;
  std::string classes = class_fail.empty() ? "all corruption classes raise their codes" : "class failures:";
  for (const auto& f : class_fail) classes += " " + f;
  return {ok, fmt("500 checkpoints + 500 patches: %zu round-trip and %zu determinism failures; %s; "
                  "%zu single-bit header corruptions, %zu accepted",
                  roundtrip_bad, determinism_bad, classes.c_str(), header_bytes, accepted)};
}

// AC10 -----------------------------------------------------------------------

Outcome ac10(const ScenarioConfig& cfg) {
  const auto t0 = Clock::now();
  const auto one = run_pipeline(cfg, 1);
  const auto two = run_pipeline(cfg, 2);
  const auto eight = run_pipeline(cfg, 8);
  std::size_t bytes = 0;
  for (const auto& [_, b] : one) bytes += b.size();
  return {one == two && one == eight,
          fmt("%zu artifacts (%zu bytes) identical for 1, 2 and 8 workers: %s; %.1f s", one.size(), bytes,
              (one == two && one == eight) ? "yes" : "no", seconds_since(t0))};
}

}  // namespace

int main() {
  int failed = 0;
  auto report = [&](const char* id, const char* title, const std::function<Outcome()>& fn) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("[%s] %s %s: %s\n", o.pass ? "PASS" : "FAIL", id, title, o.detail.c_str());
    std::fflush(stdout);
    failed += !o.pass;
  };

  report("AC1", "OBS matches constrained least squares", ac1);
  report("AC2", "sensitivity equals realized loss increase", ac2);
  report("AC3", "downdate matches delete-and-invert", ac3);
  report("AC4", "fusion identities", ac4);
  report("AC5", "mask budget and tie-break", ac5);
  report("AC6", "H-score anchor and properties", ac6);

  ScenarioConfig cfg;
  std::optional<ScenarioRun> run;
  double train_secs = 0.0;
  std::string setup_error;
  try {
    cfg = load_scenario(MT_DEFAULT_SCENARIO);
    const auto t0 = Clock::now();
    run = prepare(cfg);
    train_secs = seconds_since(t0);
  } catch (const std::exception& e) {
    setup_error = e.what();
  }
  auto scenario = [&](auto fn) -> std::function<Outcome()> {
    return [&, fn] { return run ? fn() : Outcome{false, "scenario setup failed: " + setup_error}; };
  };
  report("AC7", "end-to-end forgetting mitigation", scenario([&] { return ac7(*run, train_secs); }));
  report("AC8", "multi-task stitching", scenario([&] { return ac8(*run); }));
  report("AC9", "serialization", ac9);
  report("AC10", "determinism under parallelism", scenario([&] { return ac10(cfg); }));

  std::printf("%d of 10 criteria failed\n", failed);
  return failed == 0 ? 0 : 1;
}
