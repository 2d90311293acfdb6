// model_tailor: command-line front end for the toy fusion pipeline.
//
//   model_tailor train     --config cfg.json --out dir
//   model_tailor data      --task B --out dir
//   model_tailor calibrate --sft dir/sft_B.mtw --task B --out dir
//   model_tailor tailor    --pre dir/pre.mtw --sft dir/sft_B.mtw --calib dir/calib_B.mtw --out dir
//   model_tailor stitch    --pre dir/pre.mtw --patch dir/patch_B.mtw --patch dir/patch_C.mtw --out dir
//   model_tailor eval      --model pre=dir/pre.mtw --model fused=dir/fused_B.mtw --origin A --target B
//   model_tailor inspect   --patch dir/patch_B.mtw
//
// Exit codes: 0 success, 2 validation error, 3 numerical error, 4 I/O error.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "json.hpp"
#include "model_tailor/checkpoint.hpp"
#include "model_tailor/error.hpp"
#include "model_tailor/hessian.hpp"
#include "model_tailor/metrics.hpp"
#include "model_tailor/multitask.hpp"
#include "model_tailor/parallel.hpp"
#include "model_tailor/scenario.hpp"
#include "model_tailor/tailor.hpp"
#include "model_tailor/toymodel.hpp"

namespace fs = std::filesystem;
namespace mt = model_tailor;
using nlohmann::json;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitIo = 4;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

mt::ScenarioConfig load_config(const Common& c) {
  mt::ScenarioConfig cfg = c.config.empty() ? mt::ScenarioConfig{} : mt::load_scenario(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (!c.out.empty()) cfg.out_dir = c.out;
  cfg.validate();
  return cfg;
}

fs::path prepare_out(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw mt::Error(mt::ErrorCode::Io, "cannot create output directory '" + dir + "'");
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw mt::Error(mt::ErrorCode::Io, "cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw mt::Error(mt::ErrorCode::Io, "short write to '" + path.string() + "'");
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

std::string task_of(const mt::Checkpoint& c, const std::string& fallback) {
  if (!fallback.empty()) return fallback;
  auto it = c.metadata.find("task_id");
  if (it == c.metadata.end()) throw mt::Error(mt::ErrorCode::InvalidArgument, "checkpoint has no task_id; pass --task");
  return it->second;
}

mt::toy::TaskDataset dataset_for(const mt::ScenarioConfig& cfg, const std::string& task, const std::string& data_path) {
  if (!data_path.empty()) return mt::toy::dataset_from_checkpoint(mt::load_checkpoint(data_path));
  if (task.empty()) throw mt::Error(mt::ErrorCode::InvalidArgument, "need --task or --data");
  return mt::scenario_dataset(cfg, task);
}

json histogram(const mt::linalg::Matrix& m, std::size_t bins) {
  std::vector<std::uint64_t> counts(bins, 0);
  for (double v : m.data()) {
    auto b = static_cast<std::size_t>(std::floor(std::clamp(v, 0.0, 1.0) * static_cast<double>(bins)));
    counts[std::min(b, bins - 1)]++;
  }
  return {{"range", {0.0, 1.0}}, {"counts", counts}};
}

// ---------------------------------------------------------------------------

int cmd_train(const Common& common, std::optional<std::size_t> pre_epochs, std::optional<std::size_t> ft_epochs) {
  auto cfg = load_config(common);
  if (pre_epochs) cfg.pretrain.epochs = *pre_epochs;
  if (ft_epochs) cfg.finetune.epochs = *ft_epochs;
  const auto dir = prepare_out(cfg.out_dir);
  const auto models = mt::run_training(cfg);
  mt::save_checkpoint(models.pre, dir / "pre.mtw");
  for (const auto& [id, sft] : models.sft) mt::save_checkpoint(sft, dir / ("sft_" + id + ".mtw"));
  write_json(dir / "curves.json", models.curves);
  std::cout << "wrote pre.mtw, " << models.sft.size() << " fine-tuned checkpoints and curves.json to " << dir << "\n";
  return 0;
}

int cmd_data(const Common& common, const std::string& task) {
  const auto cfg = load_config(common);
  const auto dir = prepare_out(cfg.out_dir);
  mt::save_checkpoint(mt::toy::dataset_to_checkpoint(mt::scenario_dataset(cfg, task)), dir / ("data_" + task + ".mtw"));
  return 0;
}

int cmd_calibrate(const Common& common, const std::string& sft_path, const std::string& task_flag,
                  const std::string& data_path, std::optional<std::size_t> n_flag) {
  const auto cfg = load_config(common);
  const auto sft = mt::load_checkpoint(sft_path);
  const auto data = dataset_for(cfg, task_flag.empty() && data_path.empty() ? task_of(sft, "") : task_flag, data_path);
  const std::size_t widest = mt::widest_dcol(sft);
  const std::size_t n = n_flag.value_or(mt::default_calibration_samples(cfg, sft));
  if (n < widest) {
    std::cerr << "warning: " << n << " calibration samples is below the widest layer input (" << widest
              << "); the layer Hessians will lean on damping\n";
  }
  const auto dir = prepare_out(cfg.out_dir);
  auto ckpt = mt::calibration_to_checkpoint(mt::toy::capture_activations(sft, data, n));
  ckpt.metadata["task_id"] = data.task_id;
  ckpt.metadata["samples"] = std::to_string(n);
  mt::save_checkpoint(ckpt, dir / ("calib_" + data.task_id + ".mtw"));
  return 0;
}

int cmd_tailor(const Common& common, const std::string& pre_path, const std::string& sft_path,
               const std::string& calib_path, std::optional<double> rho, std::optional<double> omega,
               std::optional<std::string> mode, bool no_decorate, std::optional<double> damp, const std::string& task) {
  const auto cfg = load_config(common);
  mt::FusionConfig f = cfg.fusion;
  if (rho) f.rho = *rho;
  if (omega) f.omega = *omega;
  if (mode) f.mode = mt::parse_mode(*mode);
  if (damp) f.damp_frac = *damp;
  if (no_decorate) f.decorate = false;
  f.workers = mt::default_workers();
  f.validate();

  const auto pre = mt::load_checkpoint(pre_path);
  const auto sft = mt::load_checkpoint(sft_path);
  const auto calib = mt::calibration_from_checkpoint(mt::load_checkpoint(calib_path));
  const std::string id = task_of(sft, task);
  const auto res = mt::tailor_model(pre, sft, calib, f, id);

  json report;
  report["schema"] = "model-tailor/tailor-report@1";
  report["task_id"] = id;
  report["config"] = {{"rho", f.rho},
                      {"omega", f.omega},
                      {"damp_frac", f.damp_frac},
                      {"mode", mt::mode_name(f.mode)},
                      {"decorate", f.decorate}};
  report["layers"] = json::object();
  for (const auto& [name, lp] : res.layers) {
    const auto& sc = res.scores.at(name);
    double c_abs_max = 0.0;
    double c_sq = 0.0;
    for (double v : lp.decorator.data()) {
      c_abs_max = std::max(c_abs_max, std::abs(v));
      c_sq += v * v;
    }
    report["layers"][name] = {{"parameters", lp.mask.size()},
                              {"budget", mt::retained_budget(f.rho, lp.mask.size())},
                              {"retained", lp.retained()},
                              {"threshold", lp.threshold},
                              {"damping", res.damping.at(name)},
                              {"salience_bounds", {sc.delta_bounds.first, sc.delta_bounds.second}},
                              {"sensitivity_bounds", {sc.eps_bounds.first, sc.eps_bounds.second}},
                              {"decorator_max_abs", c_abs_max},
                              {"decorator_l2", std::sqrt(c_sq)}};
  }

  const auto dir = prepare_out(cfg.out_dir);
  mt::save_checkpoint(res.fused, dir / ("fused_" + id + ".mtw"));
  mt::save_task_patch(res.patch, dir / ("patch_" + id + ".mtw"));
  write_json(dir / ("report_" + id + ".json"), report);
  return 0;
}

int cmd_stitch(const Common& common, const std::string& pre_path, const std::vector<std::string>& patch_paths,
               const std::string& averaging, bool with_report) {
  const auto cfg = load_config(common);
  const auto pre = mt::load_checkpoint(pre_path);
  std::vector<mt::TaskPatch> patches;
  for (const auto& p : patch_paths) patches.push_back(mt::load_task_patch(p));
  const auto avg = averaging.empty() ? cfg.averaging : mt::parse_averaging(averaging);
  const auto stitched = mt::stitch(patches, pre, avg);
  const auto dir = prepare_out(cfg.out_dir);
  mt::save_checkpoint(stitched, dir / "stitched.mtw");
  if (with_report) {
    std::map<std::string, mt::toy::TaskDataset> datasets;
    for (const auto& t : cfg.origin_tasks) datasets.emplace(t, mt::scenario_dataset(cfg, t));
    for (const auto& p : patches) datasets.emplace(p.task_id, mt::scenario_dataset(cfg, p.task_id));
    auto j = mt::to_json(mt::stitch_report(pre, patches, datasets, avg));
    j["averaging"] = mt::averaging_name(avg);
    write_json(dir / "stitch_report.json", j);
  }
  return 0;
}

int cmd_eval(const Common& common, const std::vector<std::string>& models, const std::vector<std::string>& origin,
             const std::vector<std::string>& target, const std::vector<std::string>& data_files) {
  const auto cfg = load_config(common);
  if (target.empty()) throw mt::Error(mt::ErrorCode::InvalidArgument, "target task set is empty");
  if (origin.empty()) throw mt::Error(mt::ErrorCode::InvalidArgument, "origin task set is empty");
  if (models.empty()) throw mt::Error(mt::ErrorCode::InvalidArgument, "no --model given");

  std::map<std::string, mt::toy::TaskDataset> datasets;
  for (const auto& path : data_files) {
    auto d = mt::toy::dataset_from_checkpoint(mt::load_checkpoint(path));
    datasets.emplace(d.task_id, std::move(d));
  }
  std::vector<std::string> tasks = origin;
  tasks.insert(tasks.end(), target.begin(), target.end());
  for (const auto& t : tasks) {
    if (!datasets.contains(t)) datasets.emplace(t, mt::scenario_dataset(cfg, t));
  }

  std::vector<mt::metrics::EvalReport> reports;
  for (const auto& spec : models) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw mt::Error(mt::ErrorCode::InvalidArgument, "--model expects name=path, got '" + spec + "'");
    }
    const auto ckpt = mt::load_checkpoint(spec.substr(eq + 1));
    std::map<std::string, double> scores;
    for (const auto& t : tasks) scores[t] = mt::toy::evaluate(ckpt, datasets.at(t));
    reports.push_back(mt::metrics::build_report(spec.substr(0, eq), scores, origin, target));
  }
  const auto j = mt::metrics::comparison_json(reports);
  if (common.out.empty()) {
    std::cout << j.dump(2) << "\n";
  } else {
    write_json(prepare_out(common.out) / "eval_report.json", j);
  }
  return 0;
}

int cmd_inspect(const Common& common, const std::string& patch_path, const std::string& pre_path,
                const std::string& sft_path, const std::string& calib_path, std::size_t bins) {
  if (bins == 0) throw mt::Error(mt::ErrorCode::InvalidArgument, "--bins must be positive");
  const auto patch = mt::load_task_patch(patch_path);
  const bool with_scores = !pre_path.empty() || !sft_path.empty() || !calib_path.empty();
  if (with_scores && (pre_path.empty() || sft_path.empty() || calib_path.empty())) {
    throw mt::Error(mt::ErrorCode::InvalidArgument, "score histograms need --pre, --sft and --calib together");
  }
  json j;
  j["schema"] = "model-tailor/inspect@1";
  j["task_id"] = patch.task_id;
  j["config"] = {{"rho", patch.config.rho},
                 {"omega", patch.config.omega},
                 {"damp_frac", patch.config.damp_frac},
                 {"mode", patch.config.mode},
                 {"decorate", patch.config.decorated}};
  j["layers"] = json::object();
  for (const auto& [name, pl] : patch.layers) {
    const std::uint64_t n = pl.rows * pl.cols;
    double max_abs = 0.0;
    double sum_abs = 0.0;
    double sq = 0.0;
    std::size_t nonzero = 0;
    for (double c : pl.decorator) {
      max_abs = std::max(max_abs, std::abs(c));
      sum_abs += std::abs(c);
      sq += c * c;
      nonzero += c != 0.0;
    }
    j["layers"][name] = {
        {"shape", {pl.rows, pl.cols}},
        {"parameters", n},
        {"retained", pl.indices.size()},
        {"density", n == 0 ? 0.0 : static_cast<double>(pl.indices.size()) / static_cast<double>(n)},
        {"threshold", pl.threshold},
        {"decorator",
         {{"nonzero", nonzero},
          {"max_abs", max_abs},
          {"mean_abs", pl.decorator.empty() ? 0.0 : sum_abs / static_cast<double>(pl.decorator.size())},
          {"l2", std::sqrt(sq)}}}};
  }
  if (with_scores) {
    const auto pre = mt::load_checkpoint(pre_path);
    const auto sft = mt::load_checkpoint(sft_path);
    const auto calib = mt::calibration_from_checkpoint(mt::load_checkpoint(calib_path));
    for (const auto& [name, pl] : patch.layers) {
      if (!calib.contains(name)) throw mt::Error(mt::ErrorCode::MissingCalibration, "no calibration for '" + name + "'");
      const auto w_pre = pre.at(name).to_matrix();
      const auto w_sft = sft.at(name).to_matrix();
      const auto hs = mt::build_hessian(calib.at(name), patch.config.damp_frac);
      std::vector<double> diag;
      for (const auto& d : mt::inv_diag(hs)) diag.push_back(*d);
      const auto sc = mt::fuse_scores(mt::salience(w_sft, w_pre), mt::sensitivity(w_sft, w_pre, diag), patch.config.omega);
      auto norm = [](const mt::linalg::Matrix& m, std::pair<double, double> b) {
        mt::linalg::Matrix out(m.rows(), m.cols());
        const double span = b.second - b.first;
        if (span > 0.0) {
          for (std::size_t i = 0; i < m.size(); ++i) out.data()[i] = (m.data()[i] - b.first) / span;
        }
        return out;
      };
      j["layers"][name]["histograms"] = {{"fused", histogram(sc.s_fused, bins)},
                                         {"salience", histogram(norm(sc.s_delta, sc.delta_bounds), bins)},
                                         {"sensitivity", histogram(norm(sc.s_eps, sc.eps_bounds), bins)}};
    }
  }
  if (common.out.empty()) {
    std::cout << j.dump(2) << "\n";
  } else {
    write_json(prepare_out(common.out) / ("inspect_" + patch.task_id + ".json"), j);
  }
  return 0;
}

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "Scenario config (JSON)");
  sub->add_option("--seed", c.seed, "Override the scenario seed");
  sub->add_option("--out", c.out, "Output directory");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse patch fusion of fine-tuned checkpoints into their pre-trained parent"};
  app.require_subcommand(1);

  Common common;
  std::optional<std::size_t> pre_epochs;
  std::optional<std::size_t> ft_epochs;
  std::string pre;
  std::string sft;
  std::string calib;
  std::string task;
  std::string data;
  std::optional<std::size_t> n_calib;
  std::optional<double> rho;
  std::optional<double> omega;
  std::optional<double> damp;
  std::optional<std::string> mode;
  bool no_decorate = false;
  std::vector<std::string> patches;
  std::string averaging;
  bool stitch_report = false;
  std::vector<std::string> models;
  std::vector<std::string> origin;
  std::vector<std::string> target;
  std::vector<std::string> data_files;
  std::string patch;
  std::size_t bins = 10;

  auto* train = app.add_subcommand("train", "Pretrain on the origin tasks and fine-tune on each target");
  add_common(train, common);
  train->add_option("--pretrain-epochs", pre_epochs);
  train->add_option("--finetune-epochs", ft_epochs);

  auto* data_cmd = app.add_subcommand("data", "Write a task dataset as .mtw");
  add_common(data_cmd, common);
  data_cmd->add_option("--task", task)->required();

  auto* cal = app.add_subcommand("calibrate", "Capture per-layer calibration inputs");
  add_common(cal, common);
  cal->add_option("--sft", sft, "Fine-tuned checkpoint")->required();
  cal->add_option("--task", task, "Task id (regenerated from the config)");
  cal->add_option("--data", data, "Dataset .mtw instead of --task");
  cal->add_option("--n", n_calib, "Calibration sample count");

  auto* tl = app.add_subcommand("tailor", "Fuse a fine-tuned checkpoint into its parent");
  add_common(tl, common);
  tl->add_option("--pre", pre)->required();
  tl->add_option("--sft", sft)->required();
  tl->add_option("--calib", calib)->required();
  tl->add_option("--rho", rho, "Retained fraction per layer");
  tl->add_option("--omega", omega, "Salience weight in the fused score");
  tl->add_option("--mode", mode, "obs or exact")->check(CLI::IsMember({"obs", "exact"}));
  tl->add_option("--damp", damp, "Hessian damping fraction");
  tl->add_option("--task", task, "Task id (defaults to the sft metadata)");
  tl->add_flag("--no-decorate", no_decorate, "Skip compensation of retained parameters");

  auto* st = app.add_subcommand("stitch", "Combine task patches onto one pre-trained checkpoint");
  add_common(st, common);
  st->add_option("--pre", pre)->required();
  st->add_option("--patch", patches)->required();
  st->add_option("--averaging", averaging, "all or selected")->check(CLI::IsMember({"all", "selected"}));
  st->add_flag("--report", stitch_report, "Also write stitch_report.json");

  auto* ev = app.add_subcommand("eval", "Score checkpoints and report Avg / H-score");
  add_common(ev, common);
  ev->add_option("--model", models, "name=path (repeatable)")->required();
  ev->add_option("--origin", origin, "Origin task ids");
  ev->add_option("--target", target, "Target task ids");
  ev->add_option("--data", data_files, "Dataset .mtw files (default: regenerate from config)");

  auto* ins = app.add_subcommand("inspect", "Summarize a task patch");
  add_common(ins, common);
  ins->add_option("--patch", patch)->required();
  ins->add_option("--pre", pre);
  ins->add_option("--sft", sft);
  ins->add_option("--calib", calib);
  ins->add_option("--bins", bins);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitValidation;
  }

  try {
    if (train->parsed()) return cmd_train(common, pre_epochs, ft_epochs);
    if (data_cmd->parsed()) return cmd_data(common, task);
    if (cal->parsed()) return cmd_calibrate(common, sft, task, data, n_calib);
    if (tl->parsed()) return cmd_tailor(common, pre, sft, calib, rho, omega, mode, no_decorate, damp, task);
    if (st->parsed()) return cmd_stitch(common, pre, patches, averaging, stitch_report);
    if (ev->parsed()) return cmd_eval(common, models, origin, target, data_files);
    if (ins->parsed()) return cmd_inspect(common, patch, pre, sft, calib, bins);
  } catch (const mt::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    switch (mt::classify(e.code())) {
      case mt::ErrorClass::Numerical: return kExitNumerical;
      case mt::ErrorClass::Io: return kExitIo;
      case mt::ErrorClass::Validation: return kExitValidation;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  }
  return kExitValidation;
}
