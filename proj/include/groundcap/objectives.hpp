#ifndef GROUNDCAP_OBJECTIVES_HPP_
#define GROUNDCAP_OBJECTIVES_HPP_

#include <functional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "groundcap/captioner.hpp"
#include "groundcap/cider.hpp"
#include "groundcap/datagen.hpp"
#include "groundcap/matcher.hpp"

namespace groundcap {

inline constexpr double kLogFloor = 1e-12;

enum class Supervision { kNone, kPosScan, kScan, kGroundTruth };
enum class GtLossForm { kNll, kKl };

const char* supervision_name(Supervision s);
Supervision supervision_from_name(const std::string& name);

struct Stage1Config {
  double lambda1 = 0.1;
  Supervision supervision = Supervision::kPosScan;
  double lambda1_gt = 0.1;
  GtLossForm gt_form = GtLossForm::kNll;

  void validate() const;
};

nlohmann::json to_json(const Stage1Config& cfg);
Stage1Config stage1_config_from_json(const nlohmann::json& j);

// KL(beta || alpha) with both arguments floored at kLogFloor inside the logs.
double kl_attention_term(const Eigen::Ref<const Vector>& beta,
                         const Eigen::Ref<const Vector>& alpha);
// d KL / d beta.
Vector kl_attention_grad(const Eigen::Ref<const Vector>& beta,
                         const Eigen::Ref<const Vector>& alpha);

// gamma(t, i) = 1 iff region i overlaps a ground-truth box of token t with
// IoU > 0.5. Rows of tokens without grounding are zero. n x k.
Matrix build_gamma(const SceneRecord& scene, const CaptionRecord& caption);

struct Stage1Item {
  const Matrix* features = nullptr;
  std::span<const int> tokens;                  // content tokens
  const std::vector<bool>* noun_mask = nullptr;
  const Matrix* teacher = nullptr;              // alpha or gamma, n x k
};

struct Stage1Loss {
  double loss = 0;         // mean over captions
  double nll = 0;          // summed token NLL over the batch
  double supervision = 0;  // summed weighted supervision term over the batch
  int tokens = 0;          // predicted positions, EOS included
  CaptionerParams grad;
  std::vector<Matrix> beta;  // per caption, content rows only
};

Stage1Loss stage1_batch_loss(const std::vector<Stage1Item>& items, const CaptionerParams& params,
                             const CaptionerConfig& cap_cfg, const Stage1Config& cfg,
                             bool with_grad);

// Single-caption loss: sum over steps of NLL plus the supervision term.
Stage1Loss stage1_loss(const Matrix& features, std::span<const int> tokens,
                       const std::vector<bool>& noun_mask, const CaptionerParams& params,
                       const Matrix* teacher, const CaptionerConfig& cap_cfg,
                       const Stage1Config& cfg);

enum class MatcherReward { kNone, kScan, kPosScan };

const char* matcher_reward_name(MatcherReward m);
MatcherReward matcher_reward_from_name(const std::string& name);

struct RewardConfig {
  bool use_cider = true;
  double lambda2 = 1.0;
  MatcherReward matcher = MatcherReward::kNone;
  std::string matcher_run;  // run holding the frozen matcher checkpoint

  void validate() const;
};

nlohmann::json to_json(const RewardConfig& cfg);
RewardConfig reward_config_from_json(const nlohmann::json& j);

struct RewardBreakdown {
  double cider = 0;
  double matcher = 0;  // unweighted S or S_pos
  double total = 0;
};

// CIDEr-D plus lambda2 times the frozen matcher's score. Captions without a
// noun under POS-SCAN (or empty captions) get a matcher term of 0 and are
// counted in noun_free_warnings().
class RewardModel {
 public:
  RewardModel(RewardConfig cfg, const CiderD* cider, const MatcherParams* matcher,
              MatcherConfig matcher_cfg, std::set<int> nouns);

  std::vector<RewardBreakdown> score(const std::vector<const Matrix*>& features,
                                     const std::vector<const CiderD::Prepared*>& refs,
                                     const std::vector<std::vector<int>>& captions) const;
  RewardBreakdown score_one(const Matrix& features, const CiderD::Prepared& refs,
                            const std::vector<int>& caption) const;

  long noun_free_warnings() const { return warnings_; }
  const RewardConfig& config() const { return cfg_; }

 private:
  RewardConfig cfg_;
  const CiderD* cider_;
  const MatcherParams* matcher_;
  MatcherConfig matcher_cfg_;
  std::set<int> nouns_;
  mutable long warnings_ = 0;
};

// Reward of a content-token sequence for image `item` of the batch.
using RewardFn = std::function<std::vector<RewardBreakdown>(
    const std::vector<std::vector<int>>& sampled)>;

struct ScstStep {
  CaptionerParams grad;
  double loss = 0;  // surrogate -(r_s - r_b) log p(y_s), batch mean
  double mean_sample_reward = 0;
  double mean_baseline_reward = 0;
  double mean_cider = 0;     // sampled captions
  double mean_matcher = 0;   // sampled captions, unweighted
  std::vector<Decoded> samples, baselines;
};

// Self-critical gradient for a batch of images: samples and greedy baselines
// are decoded, rewards come from `sample_rewards` / `baseline_rewards`
// (called with content tokens), and the estimator is averaged over images.
ScstStep scst_batch(const std::vector<const Matrix*>& features, const CaptionerParams& params,
                    const CaptionerConfig& cap_cfg, int max_len, Rng& rng,
                    const RewardFn& rewards);

// -(r_s - r_b) * d log p(y_s) / d params for one image.
CaptionerParams scst_gradient(const Matrix& features, const CaptionerParams& params,
                              const CaptionerConfig& cap_cfg, int max_len, Rng& rng,
                              const std::function<double(const std::vector<int>&)>& reward);

// d log p(targets) / d params where targets follow BOS.
CaptionerParams log_prob_gradient(const Matrix& features, const std::vector<int>& targets,
                                  const CaptionerParams& params, const CaptionerConfig& cap_cfg);

}  // namespace groundcap

#endif  // GROUNDCAP_OBJECTIVES_HPP_
