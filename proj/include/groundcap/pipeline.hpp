#ifndef GROUNDCAP_PIPELINE_HPP_
#define GROUNDCAP_PIPELINE_HPP_

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "groundcap/config.hpp"
#include "groundcap/eval.hpp"

namespace groundcap {

// Environment variable that relocates the run root (default ./runs).
inline constexpr const char* kRunRootEnv = "GROUNDCAP_RUN_ROOT";

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A prerequisite stage has not produced its checkpoint yet.
class DependencyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::filesystem::path run_root();
std::filesystem::path run_dir(const std::string& name);

// ckpt-best.bin, then ckpt-last.bin, then ckpt-0.bin; empty when none exist.
std::filesystem::path resolve_checkpoint(const std::filesystem::path& dir);
// "matcher" or "captioner", from the checkpoint header.
std::string checkpoint_tag(const std::filesystem::path& ckpt);

// Exclusive lock file guarding a run directory.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path path_;
};

void generate_data(const std::filesystem::path& config, const std::filesystem::path& out);

std::filesystem::path train_matcher_run(const ExperimentConfig& cfg);
std::filesystem::path train_captioner_xe_run(const ExperimentConfig& cfg);
std::filesystem::path train_captioner_scst_run(const ExperimentConfig& cfg);

struct EvaluateOptions {
  std::string split = "val";
  int beam = 1;
  bool grounding = true;  // attention accuracy and F1
};

// Writes report-<split>.json/.csv into the run directory.
MetricsReport evaluate_run(const std::filesystem::path& dir, const EvaluateOptions& opts);

// Writes attention-<model>-<split>.json and returns its path.
std::filesystem::path export_attention(const std::filesystem::path& dir, const std::string& split,
                                       const std::string& model);

// One stage-1 run per lambda1, each evaluated on `split`. Returns the CSV path
// (sweep-lambda1.csv under the run root, named after the base run).
std::filesystem::path sweep_lambda1(const ExperimentConfig& base, const std::vector<double>& lambdas,
                                    const std::string& split = "val");

std::string sweep_run_name(const std::string& base, double lambda1);

}  // namespace groundcap

#endif  // GROUNDCAP_PIPELINE_HPP_
