#include "model_tailor/metrics.hpp"

#include <cmath>
#include <numeric>

#include "model_tailor/error.hpp"

namespace model_tailor::metrics {

double avg(std::span<const double> scores) {
  if (scores.empty()) throw Error(ErrorCode::InvalidArgument, "avg of an empty list");
  return std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(scores.size());
}

double hscore_of_means(double a, double b) {
  if (!(a > 0.0) || !(b > 0.0)) throw Error(ErrorCode::InvalidArgument, "H-score needs positive group means");
  return 2.0 * a * b / (a + b);
}

double hscore(std::span<const double> origin_scores, std::span<const double> target_scores) {
  return hscore_of_means(avg(origin_scores), avg(target_scores));
}

Retention retention(const GroupScores& pre, const GroupScores& sft, const GroupScores& fused) {
  for (double v : {pre.origin, pre.target, sft.origin, sft.target, fused.origin, fused.target}) {
    if (!(v >= 0.0)) throw Error(ErrorCode::InvalidArgument, "scores must be non-negative");
  }
  if (pre.origin == 0.0 || sft.target == 0.0) throw Error(ErrorCode::InvalidArgument, "retention denominator is zero");
  return {fused.origin / pre.origin * 100.0, fused.target / sft.target * 100.0};
}

EvalReport build_report(const std::string& model, const std::map<std::string, double>& scores,
                        const std::vector<std::string>& origin_tasks, const std::vector<std::string>& target_tasks) {
  if (origin_tasks.empty()) throw Error(ErrorCode::InvalidArgument, "origin task set is empty");
  if (target_tasks.empty()) throw Error(ErrorCode::InvalidArgument, "target task set is empty");
  EvalReport r;
  r.model = model;
  r.origin_tasks = origin_tasks;
  r.target_tasks = target_tasks;
  std::vector<double> origin;
  std::vector<double> target;
  auto lookup = [&](const std::string& t) {
    auto it = scores.find(t);
    if (it == scores.end()) throw Error(ErrorCode::InvalidArgument, "no score for task '" + t + "'");
    r.scores[t] = it->second;
    return it->second;
  };
  for (const auto& t : origin_tasks) origin.push_back(lookup(t));
  for (const auto& t : target_tasks) target.push_back(lookup(t));
  std::vector<double> pooled = origin;
  pooled.insert(pooled.end(), target.begin(), target.end());
  r.origin_mean = avg(origin);
  r.target_mean = avg(target);
  r.avg = avg(pooled);
  r.hscore = hscore_of_means(r.origin_mean, r.target_mean);
  return r;
}

nlohmann::json to_json(const EvalReport& r) {
  return {{"model", r.model},
          {"scores", r.scores},
          {"origin_tasks", r.origin_tasks},
          {"target_tasks", r.target_tasks},
          {"origin_mean", r.origin_mean},
          {"target_mean", r.target_mean},
          {"avg", r.avg},
          {"hscore", r.hscore}};
}

nlohmann::json comparison_json(const std::vector<EvalReport>& reports) {
  nlohmann::json j;
  j["schema"] = kEvalReportSchema;
  j["score_definition"] = "100 / (1 + eval MSE); a surrogate performance number, higher is better";
  j["avg_definition"] = "arithmetic mean over origin and target tasks pooled";
  j["hscore_definition"] = "harmonic mean of the origin-group mean and the target-group mean";
  j["models"] = nlohmann::json::array();
  const EvalReport* pre = nullptr;
  const EvalReport* sft = nullptr;
  for (const auto& r : reports) {
    j["models"].push_back(to_json(r));
    if (r.model == "pre") pre = &r;
    if (r.model == "sft") sft = &r;
  }
  j["retention"] = nlohmann::json::object();
  if (pre != nullptr && sft != nullptr) {
    for (const auto& r : reports) {
      if (&r == pre || &r == sft) continue;
      const auto ret = retention({pre->origin_mean, pre->target_mean}, {sft->origin_mean, sft->target_mean},
                                 {r.origin_mean, r.target_mean});
      j["retention"][r.model] = {{"origin_pct", ret.origin_pct}, {"target_pct", ret.target_pct}};
    }
  }
  return j;
}

}  // namespace model_tailor::metrics
