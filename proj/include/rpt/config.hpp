#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "rpt/attacks.hpp"
#include "rpt/defense.hpp"
#include "rpt/model.hpp"
#include "rpt/pretrain.hpp"
#include "rpt/synth.hpp"
#include "rpt/trainer.hpp"

namespace rpt {

enum class TrainMethod { standard, adversarial, augmented };

std::string method_name(TrainMethod m);

struct AttackSelection {
  std::vector<AttackKind> kinds{AttackKind::word_substitution, AttackKind::viper, AttackKind::bug, AttackKind::uat};
  double noise_budget = 0.25;
  UatConfig uat;
};

struct AnalysisConfig {
  bool enabled = true;
  int max_samples = 400;
  int resamples = 10000;
};

/// Clean and triggered test samples interleaved, one sample per batch.
struct MixedConfig {
  bool enabled = true;
  std::vector<int> steps{5, 10};
};

struct SweepConfig {
  std::vector<float> learning_rates{0.01f, 0.03f, 0.1f};
  bool layer_sweep = true;
  std::vector<int> layer_counts{1, 2, 3};
  std::vector<int> steps{5, 10};
  bool normalization_variants = true;
  std::vector<int> dynamic_batch_sizes{2, 4};
  /// Dev samples (clean, plus their triggered copies) scored per sweep setting.
  int dev_samples = 100;
};

struct ExperimentConfig {
  ModelConfig model;
  SyntheticTaskSpec data;
  PretrainConfig pretrain;
  TrainConfig train;
  std::vector<TrainMethod> methods{TrainMethod::standard};
  AdvConfig adv;
  DefenseConfig defense;
  bool defense_enabled = true;
  AttackSelection attacks;
  AnalysisConfig analysis;
  MixedConfig mixed;
  SweepConfig sweep;
  std::uint64_t seed = 1;
  std::string output_dir = "out";
  // Optional precomputed inputs; they must exist when the config is loaded.
  std::optional<std::string> lm_path;
  std::optional<std::string> prefix_path;
  std::optional<std::string> test_set_path;

  /// Desk-scale defaults used by run-all.
  static ExperimentConfig defaults();

  /// Cross-field checks that must pass before any compute starts.
  void validate() const;
};

/// Parses a JSON document. Unknown keys at any level raise ConfigError naming the key path.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::filesystem::path& path);
std::string config_to_json(const ExperimentConfig& cfg);

}  // namespace rpt
