#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "model_tailor/checkpoint.hpp"
#include "model_tailor/multitask.hpp"
#include "model_tailor/tailor.hpp"
#include "model_tailor/toymodel.hpp"

namespace model_tailor {

inline constexpr int kScenarioVersion = 1;

/// Everything needed to reproduce the toy forgetting scenario: pretrain on the
/// origin tasks, fine-tune a copy on each target task, then tailor.
struct ScenarioConfig {
  int version = kScenarioVersion;
  std::uint64_t seed = 7;
  std::vector<std::size_t> widths{16, 32, 32, 4};
  toy::TaskShape task_shape;
  std::size_t samples = 2000;
  std::vector<std::string> origin_tasks{"A"};
  std::vector<std::string> target_tasks{"B", "C"};
  toy::TrainConfig pretrain{0.05, 150, 32, 0};
  toy::TrainConfig finetune{0.02, 20, 32, 0};
  /// Calibration samples = multiple × widest layer input (with bias).
  std::size_t calib_multiple = 3;
  FusionConfig fusion;
  double stitch_rho = 0.05;
  Averaging averaging = Averaging::All;
  std::string out_dir = "out";

  void validate() const;
};

ScenarioConfig parse_scenario(const nlohmann::json& j);
ScenarioConfig load_scenario(const std::filesystem::path& path);
nlohmann::json to_json(const ScenarioConfig& cfg);

toy::TaskDataset scenario_dataset(const ScenarioConfig& cfg, const std::string& task_id);

struct TrainedModels {
  Checkpoint pre;
  std::map<std::string, Checkpoint> sft;
  /// {"pre": [...], "sft_<task>": [...]} per-epoch training losses.
  nlohmann::json curves;
};

TrainedModels run_training(const ScenarioConfig& cfg);

/// Widest layer input dimension, bias row included.
std::size_t widest_dcol(const Checkpoint& ckpt);
std::size_t default_calibration_samples(const ScenarioConfig& cfg, const Checkpoint& ckpt);

/// Runs train → calibrate → tailor for every target → stitch and returns the
/// serialized artifacts keyed by file name.
std::map<std::string, std::vector<std::uint8_t>> run_pipeline(const ScenarioConfig& cfg, std::size_t workers);

}  // namespace model_tailor
