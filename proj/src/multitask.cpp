#include "model_tailor/multitask.hpp"

#include <algorithm>

#include "model_tailor/error.hpp"

namespace model_tailor {

Averaging parse_averaging(const std::string& text) {
  if (text == "all") return Averaging::All;
  if (text == "selected") return Averaging::Selected;
  throw Error(ErrorCode::InvalidArgument, "averaging must be 'all' or 'selected', got '" + text + "'");
}

const char* averaging_name(Averaging a) { return a == Averaging::All ? "all" : "selected"; }

AggregatePatch aggregate(std::span<const TaskPatch> patches, Averaging averaging) {
  if (patches.empty()) throw Error(ErrorCode::InvalidArgument, "stitching needs at least one patch");
  std::vector<const TaskPatch*> ordered;
  for (const auto& p : patches) ordered.push_back(&p);
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const TaskPatch* a, const TaskPatch* b) { return a->task_id < b->task_id; });

  AggregatePatch agg;
  std::map<std::string, std::vector<double>> c_sum;
  std::map<std::string, std::vector<double>> theta_sum;
  std::map<std::string, std::vector<std::uint32_t>> selected;
  for (const TaskPatch* p : ordered) {
    agg.task_ids.push_back(p->task_id);
    for (const auto& [name, pl] : p->layers) {
      pl.validate(name);
      auto [it, fresh] = agg.layers.try_emplace(name);
      AggregateLayer& layer = it->second;
      const std::size_t n = pl.rows * pl.cols;
      if (fresh) {
        layer.rows = pl.rows;
        layer.cols = pl.cols;
        layer.mask.assign(n, 0);
        c_sum[name].assign(n, 0.0);
        theta_sum[name].assign(n, 0.0);
        selected[name].assign(n, 0);
      } else if (layer.rows != pl.rows || layer.cols != pl.cols) {
        throw Error(ErrorCode::Shape, "patches disagree on the shape of layer '" + name + "'");
      }
      ++layer.members;
      auto& cs = c_sum[name];
      auto& ts = theta_sum[name];
      auto& sel = selected[name];
      for (std::size_t k = 0; k < pl.indices.size(); ++k) {
        const auto i = pl.indices[k];
        layer.mask[i] = 1;
        cs[i] += pl.decorator[k];
        ts[i] += pl.finetuned[k];
        ++sel[i];
      }
    }
  }
  for (auto& [name, layer] : agg.layers) {
    const auto& cs = c_sum[name];
    const auto& ts = theta_sum[name];
    const auto& sel = selected[name];
    const std::size_t n = layer.mask.size();
    layer.decorator.assign(n, 0.0);
    layer.finetuned.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      if (sel[i] == 0) continue;
      const double divisor = averaging == Averaging::All ? static_cast<double>(layer.members) : sel[i];
      layer.decorator[i] = cs[i] / divisor;
      layer.finetuned[i] = ts[i] / static_cast<double>(sel[i]);
    }
  }
  return agg;
}

Checkpoint apply_aggregate(const AggregatePatch& agg, const Checkpoint& pre) {
  Checkpoint out = pre;
  for (const auto& [name, layer] : agg.layers) {
    auto it = out.tensors.find(name);
    if (it == out.tensors.end()) throw Error(ErrorCode::Shape, "patched layer '" + name + "' missing from pre");
    auto& t = it->second;
    if (t.shape != std::vector<std::uint64_t>{layer.rows, layer.cols}) {
      throw Error(ErrorCode::Shape, "patched layer '" + name + "' shape differs from pre");
    }
    for (std::size_t i = 0; i < layer.mask.size(); ++i) {
      if (layer.mask[i] == 0) continue;
      const double c = layer.decorator[i];
      t.data[i] = c == 0.0 ? layer.finetuned[i] : layer.finetuned[i] + c;
    }
  }
  return out;
}

namespace {

void check_against_pre(const TaskPatch& patch, const Checkpoint& pre, const std::string& pre_digest) {
  if (patch.pre_digest != pre_digest) {
    throw Error(ErrorCode::Provenance, "patch '" + patch.task_id + "' was built against a different pre-trained checkpoint");
  }
  for (const auto& [name, pl] : patch.layers) {
    auto it = pre.tensors.find(name);
    if (it == pre.tensors.end()) throw Error(ErrorCode::Shape, "patch layer '" + name + "' missing from pre");
    if (it->second.shape != std::vector<std::uint64_t>{pl.rows, pl.cols}) {
      throw Error(ErrorCode::Shape, "patch layer '" + name + "' shape differs from pre");
    }
  }
}

}  // namespace

Checkpoint apply_patch(const TaskPatch& patch, const Checkpoint& pre) {
  check_against_pre(patch, pre, digest(pre));
  return apply_aggregate(aggregate(std::span(&patch, 1)), pre);
}

Checkpoint stitch(std::span<const TaskPatch> patches, const Checkpoint& pre, Averaging averaging) {
  if (patches.empty()) throw Error(ErrorCode::InvalidArgument, "stitching needs at least one patch");
  const std::string d = digest(pre);
  for (const auto& p : patches) check_against_pre(p, pre, d);
  return apply_aggregate(aggregate(patches, averaging), pre);
}

StitchReport stitch_report(const Checkpoint& pre, std::span<const TaskPatch> patches,
                           const std::map<std::string, toy::TaskDataset>& datasets, Averaging averaging) {
  StitchReport rep;
  for (const auto& [task, _] : datasets) rep.tasks.push_back(task);
  const Checkpoint stitched = stitch(patches, pre, averaging);

  std::map<std::string, Checkpoint> singles;
  for (const auto& p : patches) singles.emplace(p.task_id, apply_patch(p, pre));

  for (const auto& [task, data] : datasets) {
    rep.scores["pre"][task] = toy::evaluate(pre, data);
    rep.scores["stitched"][task] = toy::evaluate(stitched, data);
    for (const auto& [id, ckpt] : singles) rep.scores["fused:" + id][task] = toy::evaluate(ckpt, data);
  }
  for (const auto& [fusion_task, _] : singles) {
    for (const auto& [eval_task, __] : singles) {
      if (fusion_task == eval_task || !datasets.contains(eval_task)) continue;
      StitchComparison c;
      c.fusion_task = fusion_task;
      c.eval_task = eval_task;
      c.single_score = rep.scores["fused:" + fusion_task][eval_task];
      c.stitched_score = rep.scores["stitched"][eval_task];
      c.stitched_better = c.stitched_score > c.single_score;
      rep.comparisons.push_back(c);
    }
  }
  return rep;
}

nlohmann::json to_json(const StitchReport& report) {
  nlohmann::json j;
  j["schema"] = "model-tailor/stitch-report@1";
  j["tasks"] = report.tasks;
  j["scores"] = report.scores;
  j["score_definition"] = "100 / (1 + eval MSE)";
  j["comparisons"] = nlohmann::json::array();
  for (const auto& c : report.comparisons) {
    j["comparisons"].push_back({{"fusion_task", c.fusion_task},
                                {"eval_task", c.eval_task},
                                {"single_score", c.single_score},
                                {"stitched_score", c.stitched_score},
                                {"stitched_better", c.stitched_better}});
  }
  return j;
}

}  // namespace model_tailor
