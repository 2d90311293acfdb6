#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace model_tailor::metrics {

inline constexpr const char* kEvalReportSchema = "model-tailor/eval-report@1";

/// Arithmetic mean; throws on an empty list.
double avg(std::span<const double> scores);

/// Harmonic mean of the origin-group mean and the target-group mean.
double hscore(std::span<const double> origin_scores, std::span<const double> target_scores);
double hscore_of_means(double origin_mean, double target_mean);

struct GroupScores {
  double origin = 0.0;
  double target = 0.0;
};

struct Retention {
  double origin_pct = 0.0;  // fused origin / pre origin × 100
  double target_pct = 0.0;  // fused target / sft target × 100
};

Retention retention(const GroupScores& pre, const GroupScores& sft, const GroupScores& fused);

struct EvalReport {
  std::string model;
  std::map<std::string, double> scores;
  std::vector<std::string> origin_tasks;
  std::vector<std::string> target_tasks;
  double origin_mean = 0.0;
  double target_mean = 0.0;
  double avg = 0.0;
  double hscore = 0.0;
};

/// Avg pools every listed task; the H-score uses the two group means.
EvalReport build_report(const std::string& model, const std::map<std::string, double>& scores,
                        const std::vector<std::string>& origin_tasks, const std::vector<std::string>& target_tasks);

nlohmann::json to_json(const EvalReport& report);

/// Full comparison document: one report per model plus retention of "fused"
/// models against the "pre" and "sft" entries when both are present.
nlohmann::json comparison_json(const std::vector<EvalReport>& reports);

}  // namespace model_tailor::metrics
