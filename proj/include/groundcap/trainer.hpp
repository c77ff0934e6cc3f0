#ifndef GROUNDCAP_TRAINER_HPP_
#define GROUNDCAP_TRAINER_HPP_

#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "groundcap/captioner.hpp"
#include "groundcap/config.hpp"
#include "groundcap/datagen.hpp"
#include "groundcap/eval.hpp"
#include "groundcap/matcher.hpp"
#include "groundcap/params.hpp"

namespace groundcap {

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <class P>
struct Adam {
  P m, v;
  long step = 0;

  static Adam zeros(const P& params) { return {zeros_like(params), zeros_like(params), 0}; }

  void update(P& params, const P& grad, double lr, const OptimizerConfig& opt) {
    ++step;
    const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(step));
    auto p = params.tensors();
    auto g = grad.tensors();
    auto mm = m.tensors();
    auto vv = v.tensors();
    for (size_t i = 0; i < p.size(); ++i) {
      auto& mi = *mm[i].second;
      auto& vi = *vv[i].second;
      const auto& gi = *g[i].second;
      mi = opt.beta1 * mi + (1.0 - opt.beta1) * gi;
      vi = opt.beta2 * vi + (1.0 - opt.beta2) * gi.cwiseProduct(gi);
      p[i].second->array() -=
          lr * (mi.array() / c1) / ((vi.array() / c2).sqrt() + opt.eps);
    }
  }
};

MatcherConfig resolve_matcher_config(const ExperimentConfig& cfg, const Dataset& ds);
CaptionerConfig resolve_captioner_config(const ExperimentConfig& cfg, const Dataset& ds);

struct MatcherState {
  MatcherConfig model;
  MatcherParams params;
  MatcherParams best;
  Adam<MatcherParams> adam;
  int epoch = 0;  // completed epochs
  Rng rng;
  nlohmann::json history = nlohmann::json::array();
  double best_val = INFINITY;
  int best_epoch = 0;
  int since_best = 0;
  bool stopped = false;
};

struct CaptionerState {
  CaptionerConfig model;
  CaptionerParams params;
  Adam<CaptionerParams> adam;
  int epoch = 0;
  Rng rng;
  nlohmann::json history = nlohmann::json::array();
};

void save_matcher_checkpoint(const std::filesystem::path& path, const MatcherState& state,
                             const ExperimentConfig& cfg, bool best_only = false);
MatcherState load_matcher_checkpoint(const std::filesystem::path& path,
                                     ExperimentConfig* cfg = nullptr);
void save_captioner_checkpoint(const std::filesystem::path& path, const CaptionerState& state,
                               const ExperimentConfig& cfg);
CaptionerState load_captioner_checkpoint(const std::filesystem::path& path,
                                         ExperimentConfig* cfg = nullptr);

MatcherState init_matcher_state(const Dataset& ds, const ExperimentConfig& cfg);
CaptionerState init_captioner_state(const Dataset& ds, const ExperimentConfig& cfg);

struct MatcherValidation {
  double loss = 0;
  RecallAtK recall;
};

// Triplet loss over fixed batches of the split's first captions and R@1 on
// the full image-caption score matrix.
MatcherValidation validate_matcher(const Dataset& ds, const MatcherParams& params,
                                   const MatcherConfig& model, const std::string& split,
                                   int batch_size);

using MatcherEpochHook = std::function<void(const MatcherState&)>;

// Trains until cfg.matcher.epochs or early stopping; state.best holds the
// parameters with the lowest validation loss.
MatcherState train_matcher(const Dataset& ds, const ExperimentConfig& cfg,
                           MatcherState* resume = nullptr, const MatcherEpochHook& hook = {});

using TeacherStore = std::map<std::string, Matrix>;

// Matcher attention for every caption of `split`, keyed by caption id.
TeacherStore precompute_teacher_attention(const Dataset& ds, const MatcherParams& params,
                                          const MatcherConfig& model,
                                          const std::string& split = "train");

std::vector<AttentionDump> matcher_attention_dumps(const Dataset& ds, const MatcherParams& params,
                                                   const MatcherConfig& model,
                                                   const std::string& split);

struct CaptionerEvaluation {
  MetricsReport report;
  double cross_entropy = 0;  // mean NLL per predicted token, EOS included
  std::vector<Decoded> decoded;
  std::vector<GeneratedCaption> generated;
  std::vector<AttentionDump> teacher_forced;
};

// Decodes every scene of the split (greedy when beam == 1) and runs the
// teacher-forced pass over its captions.
CaptionerEvaluation evaluate_captioner(const Dataset& ds, const CaptionerParams& params,
                                       const CaptionerConfig& model, const std::string& split,
                                       int max_len, int beam = 1);

using CaptionerEpochHook = std::function<void(const CaptionerState&)>;

// Teacher attention is required for the pos-scan / scan sources with a
// nonzero weight; ground-truth indicators are built from the dataset.
CaptionerState train_stage1(const Dataset& ds, const ExperimentConfig& cfg,
                            const TeacherStore* teacher, CaptionerState* resume = nullptr,
                            const CaptionerEpochHook& hook = {});

struct RewardLogRow {
  int epoch = 0;
  int batch = 0;
  double cider = 0;
  double matcher = 0;
  double gap = 0;  // mean sample reward minus mean baseline reward
};

using RewardHook = std::function<void(const RewardLogRow&)>;

// `init` is the stage-1 parameter set; `matcher` may be null when the reward
// has no matcher term.
CaptionerState train_stage2_scst(const Dataset& ds, const ExperimentConfig& cfg,
                                 const CaptionerParams& init, const MatcherParams* matcher,
                                 const MatcherConfig& matcher_model,
                                 CaptionerState* resume = nullptr,
                                 const CaptionerEpochHook& hook = {},
                                 const RewardHook& reward_hook = {});

}  // namespace groundcap

#endif  // GROUNDCAP_TRAINER_HPP_
