#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "model_tailor/checkpoint.hpp"
#include "model_tailor/toymodel.hpp"

namespace model_tailor {

enum class Averaging {
  /// Σ C_i / m over every task covering the layer.
  All,
  /// Σ C_i / (number of tasks selecting the parameter).
  Selected,
};

Averaging parse_averaging(const std::string& text);
const char* averaging_name(Averaging a);

struct AggregateLayer {
  std::uint64_t rows = 0;
  std::uint64_t cols = 0;
  std::vector<std::uint8_t> mask;
  std::vector<double> decorator;
  /// Mean fine-tuned value over the tasks selecting each parameter.
  std::vector<double> finetuned;
  /// Number of patches that cover this layer (the divisor m).
  std::size_t members = 0;
};

struct AggregatePatch {
  std::vector<std::string> task_ids;
  std::map<std::string, AggregateLayer> layers;
};

/// Union of masks with averaged decorators. Patches are combined in task-id
/// order, so the result does not depend on the order they are passed in. A
/// patch that omits a layer does not count towards that layer's m.
AggregatePatch aggregate(std::span<const TaskPatch> patches, Averaging averaging = Averaging::All);

/// M ⊙ (θ̄ + C) + (1 − M) ⊙ Θ_pre, layer by layer.
Checkpoint apply_aggregate(const AggregatePatch& agg, const Checkpoint& pre);

/// Single-task fusion rebuilt from a patch; equals the tailor output bit for bit.
Checkpoint apply_patch(const TaskPatch& patch, const Checkpoint& pre);

/// Verifies provenance and shapes of every patch against `pre`, then stitches.
Checkpoint stitch(std::span<const TaskPatch> patches, const Checkpoint& pre, Averaging averaging = Averaging::All);

struct StitchComparison {
  std::string fusion_task;  // the single-task fusion being compared
  std::string eval_task;    // the task it is scored on
  double single_score = 0.0;
  double stitched_score = 0.0;
  bool stitched_better = false;
};

struct StitchReport {
  std::vector<std::string> tasks;
  /// model label ("pre", "fused:<task>", "stitched") → task → score
  std::map<std::string, std::map<std::string, double>> scores;
  std::vector<StitchComparison> comparisons;
};

StitchReport stitch_report(const Checkpoint& pre, std::span<const TaskPatch> patches,
                           const std::map<std::string, toy::TaskDataset>& datasets,
                           Averaging averaging = Averaging::All);

nlohmann::json to_json(const StitchReport& report);

}  // namespace model_tailor
