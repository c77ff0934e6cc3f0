#ifndef GROUNDCAP_CONFIG_HPP_
#define GROUNDCAP_CONFIG_HPP_

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "groundcap/captioner.hpp"
#include "groundcap/matcher.hpp"
#include "groundcap/objectives.hpp"

namespace groundcap {

struct OptimizerConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 5.0;
};

struct MatcherTraining {
  MatcherConfig model;
  double lr = 2e-4;
  int epochs = 20;
  int batch_size = 32;
  int patience = 5;
};

struct Stage1Training {
  Stage1Config loss;
  double lr = 5e-4;
  double lr_decay = 0.8;
  int decay_every = 3;
  int epochs = 10;
  int batch_size = 32;
  std::string teacher_run;  // matcher run for distillation
};

struct Stage2Training {
  RewardConfig reward;
  double lr = 5e-5;
  int epochs = 10;
  int batch_size = 32;
  std::string init_run;  // stage-1 run
};

// Everything a run depends on. Model widths default to the desk scale;
// feature_dim and vocab_size are filled from the dataset when left at 0.
struct ExperimentConfig {
  std::string name = "run";
  std::string dataset;
  std::uint64_t seed = 1;
  MatcherTraining matcher;
  CaptionerConfig captioner;
  Stage1Training stage1;
  Stage2Training stage2;
  OptimizerConfig optimizer;
  int max_len = 18;  // decoded length bound, BOS and EOS included
  int beam = 1;

  void validate() const;
};

ExperimentConfig desk_config();
ExperimentConfig paper_config();

nlohmann::json to_json(const ExperimentConfig& cfg);
// Keys missing from `j` keep their desk defaults; unknown keys are rejected.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);

// Applies "a.b.c=value" overrides; values parse as JSON when possible and
// as strings otherwise. The key must already exist in `j`.
void apply_overrides(nlohmann::json& j, const std::vector<std::string>& overrides);

ExperimentConfig load_experiment_config(const std::filesystem::path& path,
                                        const std::vector<std::string>& overrides = {});

// SHA-256 of the canonical JSON dump.
std::string config_hash(const ExperimentConfig& cfg);

// Learning rate of stage-1 epoch e (0-based).
double stage1_lr(const Stage1Training& cfg, int epoch);

}  // namespace groundcap

#endif  // GROUNDCAP_CONFIG_HPP_
