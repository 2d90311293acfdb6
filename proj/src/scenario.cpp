#include "model_tailor/scenario.hpp"

#include <fstream>

#include "model_tailor/error.hpp"

namespace model_tailor {

using nlohmann::json;

namespace {

toy::TrainConfig parse_train(const json& j, const toy::TrainConfig& base) {
  toy::TrainConfig t = base;
  t.learning_rate = j.value("learning_rate", t.learning_rate);
  t.epochs = j.value("epochs", t.epochs);
  t.batch_size = j.value("batch_size", t.batch_size);
  return t;
}

json train_json(const toy::TrainConfig& t) {
  return {{"learning_rate", t.learning_rate}, {"epochs", t.epochs}, {"batch_size", t.batch_size}};
}

std::string join(const std::vector<std::string>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + v[i];
  return s;
}

}  // namespace

void ScenarioConfig::validate() const {
  if (version != kScenarioVersion) throw Error(ErrorCode::InvalidArgument, "unsupported scenario version");
  toy::MlpSpec{widths, seed}.validate();
  if (widths.front() != task_shape.d_in || widths.back() != task_shape.d_out) {
    throw Error(ErrorCode::InvalidArgument, "model widths must start at d_in and end at d_out");
  }
  if (samples < 5) throw Error(ErrorCode::InvalidArgument, "need at least 5 samples per task");
  if (origin_tasks.empty() || target_tasks.empty()) {
    throw Error(ErrorCode::InvalidArgument, "scenario needs origin and target tasks");
  }
  pretrain.validate();
  finetune.validate();
  fusion.validate();
  if (calib_multiple == 0) throw Error(ErrorCode::InvalidArgument, "calibration multiple must be positive");
  if (!(stitch_rho > 0.0 && stitch_rho <= 1.0)) throw Error(ErrorCode::InvalidArgument, "stitch rho must lie in (0, 1]");
}

ScenarioConfig parse_scenario(const json& j) {
  ScenarioConfig c;
  try {
    c.version = j.value("version", c.version);
    c.seed = j.value("seed", c.seed);
    if (j.contains("model")) c.widths = j["model"].value("widths", c.widths);
    if (j.contains("tasks")) {
      const auto& t = j["tasks"];
      c.origin_tasks = t.value("origin", c.origin_tasks);
      c.target_tasks = t.value("targets", c.target_tasks);
      c.samples = t.value("samples", c.samples);
      c.task_shape.teacher_hidden = t.value("teacher_hidden", c.task_shape.teacher_hidden);
      c.task_shape.noise = t.value("noise", c.task_shape.noise);
    }
    c.task_shape.d_in = c.widths.empty() ? 0 : c.widths.front();
    c.task_shape.d_out = c.widths.empty() ? 0 : c.widths.back();
    if (j.contains("pretrain")) c.pretrain = parse_train(j["pretrain"], c.pretrain);
    if (j.contains("finetune")) c.finetune = parse_train(j["finetune"], c.finetune);
    if (j.contains("calibration")) c.calib_multiple = j["calibration"].value("multiple", c.calib_multiple);
    if (j.contains("fusion")) {
      const auto& f = j["fusion"];
      c.fusion.rho = f.value("rho", c.fusion.rho);
      c.fusion.omega = f.value("omega", c.fusion.omega);
      c.fusion.damp_frac = f.value("damp_frac", c.fusion.damp_frac);
      c.fusion.mode = parse_mode(f.value("mode", std::string(mode_name(c.fusion.mode))));
      c.fusion.decorate = f.value("decorate", c.fusion.decorate);
    }
    if (j.contains("stitch")) {
      c.stitch_rho = j["stitch"].value("rho", c.stitch_rho);
      c.averaging = parse_averaging(j["stitch"].value("averaging", std::string(averaging_name(c.averaging))));
    }
    c.out_dir = j.value("out", c.out_dir);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, std::string("scenario config: ") + e.what());
  }
  c.validate();
  return c;
}

ScenarioConfig load_scenario(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open scenario config '" + path.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, "scenario config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return parse_scenario(j);
}

json to_json(const ScenarioConfig& c) {
  return {{"version", c.version},
          {"seed", c.seed},
          {"model", {{"widths", c.widths}}},
          {"tasks",
           {{"origin", c.origin_tasks},
            {"targets", c.target_tasks},
            {"samples", c.samples},
            {"teacher_hidden", c.task_shape.teacher_hidden},
            {"noise", c.task_shape.noise}}},
          {"pretrain", train_json(c.pretrain)},
          {"finetune", train_json(c.finetune)},
          {"calibration", {{"multiple", c.calib_multiple}}},
          {"fusion",
           {{"rho", c.fusion.rho},
            {"omega", c.fusion.omega},
            {"damp_frac", c.fusion.damp_frac},
            {"mode", mode_name(c.fusion.mode)},
            {"decorate", c.fusion.decorate}}},
          {"stitch", {{"rho", c.stitch_rho}, {"averaging", averaging_name(c.averaging)}}},
          {"out", c.out_dir}};
}

toy::TaskDataset scenario_dataset(const ScenarioConfig& cfg, const std::string& task_id) {
  return toy::gen_task(task_id, cfg.seed, cfg.samples, cfg.task_shape);
}

TrainedModels run_training(const ScenarioConfig& cfg) {
  cfg.validate();
  TrainedModels out;

  // Pretraining sees the origin tasks pooled into one dataset.
  toy::TaskDataset origin;
  for (const auto& id : cfg.origin_tasks) {
    const auto d = scenario_dataset(cfg, id);
    if (origin.task_id.empty()) {
      origin = d;
      continue;
    }
    origin.task_id += "+" + id;
    std::vector<double> xs(origin.inputs.values());
    xs.insert(xs.end(), d.inputs.values().begin(), d.inputs.values().end());
    std::vector<double> ys(origin.targets.values());
    ys.insert(ys.end(), d.targets.values().begin(), d.targets.values().end());
    const std::size_t n = origin.size() + d.size();
    origin.inputs = linalg::Matrix(n, d.inputs.cols(), std::move(xs));
    origin.targets = linalg::Matrix(n, d.targets.cols(), std::move(ys));
    origin.split.insert(origin.split.end(), d.split.begin(), d.split.end());
  }

  const Checkpoint init = toy::init_mlp({cfg.widths, cfg.seed});
  toy::TrainConfig pre_cfg = cfg.pretrain;
  pre_cfg.seed = cfg.seed;
  auto pre = toy::train(init, origin, pre_cfg);
  out.pre = std::move(pre.model);
  out.pre.metadata["stage"] = "pre";
  out.pre.metadata["task_id"] = join(cfg.origin_tasks);
  out.curves["pre"] = pre.epoch_losses;
  const std::string pre_digest = digest(out.pre);

  for (const auto& id : cfg.target_tasks) {
    toy::TrainConfig ft = cfg.finetune;
    ft.seed = cfg.seed + 1;
    auto sft = toy::train(out.pre, scenario_dataset(cfg, id), ft);
    sft.model.metadata["stage"] = "sft";
    sft.model.metadata["task_id"] = id;
    sft.model.metadata["parent_digest"] = pre_digest;
    out.curves["sft_" + id] = sft.epoch_losses;
    out.sft.emplace(id, std::move(sft.model));
  }
  return out;
}

std::size_t widest_dcol(const Checkpoint& ckpt) {
  std::size_t w = 0;
  for (const auto& [_, t] : ckpt.tensors) {
    if (t.shape.size() == 2) w = std::max<std::size_t>(w, t.shape[1]);
  }
  return w;
}

std::size_t default_calibration_samples(const ScenarioConfig& cfg, const Checkpoint& ckpt) {
  return cfg.calib_multiple * widest_dcol(ckpt);
}

std::map<std::string, std::vector<std::uint8_t>> run_pipeline(const ScenarioConfig& cfg, std::size_t workers) {
  std::map<std::string, std::vector<std::uint8_t>> files;
  auto models = run_training(cfg);
  files["pre.mtw"] = serialize(models.pre);
  const std::string curves = models.curves.dump(2);
  files["curves.json"] = std::vector<std::uint8_t>(curves.begin(), curves.end());

  FusionConfig fusion = cfg.fusion;
  fusion.workers = workers;
  FusionConfig stitch_fusion = fusion;
  stitch_fusion.rho = cfg.stitch_rho;
  std::vector<TaskPatch> stitch_patches;
  for (const auto& [id, sft] : models.sft) {
    files["sft_" + id + ".mtw"] = serialize(sft);
    const auto data = scenario_dataset(cfg, id);
    const auto calib = toy::capture_activations(sft, data, default_calibration_samples(cfg, sft));
    files["calib_" + id + ".mtw"] = serialize(calibration_to_checkpoint(calib));
    auto res = tailor_model(models.pre, sft, calib, fusion, id);
    files["fused_" + id + ".mtw"] = serialize(res.fused);
    files["patch_" + id + ".mtw"] = serialize(patch_to_checkpoint(res.patch));
    stitch_patches.push_back(tailor_model(models.pre, sft, calib, stitch_fusion, id).patch);
  }
  files["stitched.mtw"] = serialize(stitch(stitch_patches, models.pre, cfg.averaging));
  return files;
}

}  // namespace model_tailor
