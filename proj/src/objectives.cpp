#include "groundcap/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "groundcap/eval.hpp"
#include "groundcap/params.hpp"

namespace groundcap {

using nlohmann::json;

const char* supervision_name(Supervision s) {
  switch (s) {
    case Supervision::kNone: return "none";
    case Supervision::kPosScan: return "pos-scan";
    case Supervision::kScan: return "scan";
    case Supervision::kGroundTruth: return "ground-truth";
  }
  return "none";
}

Supervision supervision_from_name(const std::string& name) {
  if (name == "none") return Supervision::kNone;
  if (name == "pos-scan") return Supervision::kPosScan;
  if (name == "scan") return Supervision::kScan;
  if (name == "ground-truth") return Supervision::kGroundTruth;
  throw ConfigError("unknown supervision source '" + name + "'");
}

void Stage1Config::validate() const {
  if (!(lambda1 >= 0)) throw ConfigError("lambda1 must be >= 0");
  if (!(lambda1_gt >= 0)) throw ConfigError("lambda1_gt must be >= 0");
}

json to_json(const Stage1Config& c) {
  return {{"lambda1", c.lambda1},
          {"supervision", supervision_name(c.supervision)},
          {"lambda1_gt", c.lambda1_gt},
          {"gt_form", c.gt_form == GtLossForm::kNll ? "nll" : "kl"}};
}

Stage1Config stage1_config_from_json(const json& j) {
  Stage1Config c;
  c.lambda1 = j.value("lambda1", c.lambda1);
  c.supervision = supervision_from_name(j.value("supervision", std::string("pos-scan")));
  c.lambda1_gt = j.value("lambda1_gt", c.lambda1_gt);
  const std::string form = j.value("gt_form", std::string("nll"));
  if (form == "nll") {
    c.gt_form = GtLossForm::kNll;
  } else if (form == "kl") {
    c.gt_form = GtLossForm::kKl;
  } else {
    throw ConfigError("unknown gt_form '" + form + "'");
  }
  return c;
}

double kl_attention_term(const Eigen::Ref<const Vector>& beta,
                         const Eigen::Ref<const Vector>& alpha) {
  if (beta.size() != alpha.size()) throw std::invalid_argument("attention rows differ in length");
  double kl = 0;
  for (Eigen::Index i = 0; i < beta.size(); ++i) {
    kl += beta[i] * (std::log(std::max(beta[i], kLogFloor)) -
                     std::log(std::max(alpha[i], kLogFloor)));
  }
  return kl;
}

Vector kl_attention_grad(const Eigen::Ref<const Vector>& beta,
                         const Eigen::Ref<const Vector>& alpha) {
  if (beta.size() != alpha.size()) throw std::invalid_argument("attention rows differ in length");
  Vector g(beta.size());
  for (Eigen::Index i = 0; i < beta.size(); ++i) {
    g[i] = std::log(std::max(beta[i], kLogFloor)) - std::log(std::max(alpha[i], kLogFloor)) +
           (beta[i] > kLogFloor ? 1.0 : 0.0);
  }
  return g;
}

Matrix build_gamma(const SceneRecord& scene, const CaptionRecord& caption) {
  Matrix gamma = Matrix::Zero(caption.length(), scene.num_regions());
  for (const auto& [token, boxes] : caption.grounding) {
    if (token < 0 || token >= caption.length()) continue;
    for (int i = 0; i < scene.num_regions(); ++i) {
      for (const auto& box : boxes) {
        if (iou(scene.boxes[static_cast<size_t>(i)], box) > 0.5) {
          gamma(token, i) = 1.0;
          break;
        }
      }
    }
  }
  return gamma;
}

namespace {

// Supervision term for one attention row and its gradient (scaled by weight).
double supervision_row(const Vector& beta, const Eigen::Ref<const Vector>& teacher,
                       Supervision source, GtLossForm form, Vector* grad) {
  if (source != Supervision::kGroundTruth) {
    if (grad) *grad = kl_attention_grad(beta, teacher);
    return kl_attention_term(beta, teacher);
  }
  const double mass = teacher.sum();
  if (form == GtLossForm::kKl) {
    const Vector target = teacher / mass;
    if (grad) *grad = kl_attention_grad(beta, target);
    return kl_attention_term(beta, target);
  }
  double loss = 0;
  if (grad) *grad = Vector::Zero(beta.size());
  for (Eigen::Index i = 0; i < beta.size(); ++i) {
    if (teacher[i] == 0.0) continue;
    loss -= teacher[i] * std::log(std::max(beta[i], kLogFloor));
    if (grad && beta[i] > kLogFloor) (*grad)[i] = -teacher[i] / beta[i];
  }
  return loss;
}

}  // namespace

Stage1Loss stage1_batch_loss(const std::vector<Stage1Item>& items, const CaptionerParams& params,
                             const CaptionerConfig& cap_cfg, const Stage1Config& cfg,
                             bool with_grad) {
  if (items.empty()) throw std::invalid_argument("stage-1 batch is empty");
  const double weight =
      cfg.supervision == Supervision::kGroundTruth ? cfg.lambda1_gt : cfg.lambda1;
  const bool supervised = cfg.supervision != Supervision::kNone && weight != 0.0;

  std::vector<const Matrix*> features;
  std::vector<std::vector<int>> targets;
  for (const auto& it : items) {
    if (supervised && !it.teacher) throw std::invalid_argument("supervised loss needs a teacher");
    if (it.noun_mask && it.noun_mask->size() != it.tokens.size()) {
      throw std::invalid_argument("noun mask length differs from the caption length");
    }
    features.push_back(it.features);
    std::vector<int> t(it.tokens.begin(), it.tokens.end());
    t.push_back(cap_cfg.eos_id);
    targets.push_back(std::move(t));
  }
  const TeacherForcedBatch fwd = teacher_forced_batch(features, targets, params, cap_cfg);
  const auto batch = static_cast<Eigen::Index>(items.size());
  const double scale = 1.0 / static_cast<double>(batch);

  Stage1Loss out;
  std::vector<Matrix> d_logits, d_beta(items.size());
  if (with_grad) {
    for (const auto& st : fwd.steps) d_logits.push_back(st.log_probs.array().exp().matrix());
  }
  double total = 0;
  for (Eigen::Index b = 0; b < batch; ++b) {
    const auto ub = static_cast<size_t>(b);
    const auto& item = items[ub];
    const auto& tgt = targets[ub];
    double nll = -fwd.target_log_probs[ub].sum();
    out.nll += nll;
    out.tokens += static_cast<int>(tgt.size());
    if (with_grad) {
      for (size_t t = 0; t < fwd.steps.size(); ++t) {
        auto col = d_logits[t].col(b);
        if (t < tgt.size()) {
          col(tgt[t]) -= 1.0;
          col *= scale;
        } else {
          col.setZero();
        }
      }
    }
    const auto n = static_cast<Eigen::Index>(item.tokens.size());
    out.beta.push_back(fwd.beta[ub].topRows(n));
    double sup = 0;
    if (supervised) {
      const Matrix& teacher = *item.teacher;
      if (teacher.rows() != n || teacher.cols() != fwd.beta[ub].cols()) {
        throw std::invalid_argument("teacher attention shape does not match the caption");
      }
      if (with_grad) d_beta[ub] = Matrix::Zero(n, teacher.cols());
      for (Eigen::Index t = 0; t < n; ++t) {
        if (item.noun_mask && !(*item.noun_mask)[static_cast<size_t>(t)]) continue;
        if (cfg.supervision == Supervision::kGroundTruth && teacher.row(t).sum() == 0.0) continue;
        Vector g;
        const Vector beta = fwd.beta[ub].row(t).transpose();
        sup += supervision_row(beta, teacher.row(t).transpose(), cfg.supervision, cfg.gt_form,
                               with_grad ? &g : nullptr);
        if (with_grad) d_beta[ub].row(t) = (weight * scale) * g.transpose();
      }
      sup *= weight;
      out.supervision += sup;
    }
    total += supervised ? nll + sup : nll;
  }
  out.loss = total * scale;
  if (with_grad) {
    out.grad = teacher_forced_backward(fwd, params, d_logits,
                                       supervised ? d_beta : std::vector<Matrix>{});
  }
  return out;
}

Stage1Loss stage1_loss(const Matrix& features, std::span<const int> tokens,
                       const std::vector<bool>& noun_mask, const CaptionerParams& params,
                       const Matrix* teacher, const CaptionerConfig& cap_cfg,
                       const Stage1Config& cfg) {
  return stage1_batch_loss({Stage1Item{&features, tokens, &noun_mask, teacher}}, params, cap_cfg,
                           cfg, true);
}

const char* matcher_reward_name(MatcherReward m) {
  switch (m) {
    case MatcherReward::kNone: return "none";
    case MatcherReward::kScan: return "scan";
    case MatcherReward::kPosScan: return "pos-scan";
  }
  return "none";
}

MatcherReward matcher_reward_from_name(const std::string& name) {
  if (name == "none") return MatcherReward::kNone;
  if (name == "scan") return MatcherReward::kScan;
  if (name == "pos-scan") return MatcherReward::kPosScan;
  throw ConfigError("unknown matcher reward '" + name + "'");
}

void RewardConfig::validate() const {
  if (!(lambda2 >= 0)) throw ConfigError("lambda2 must be >= 0");
  const bool matcher_on = matcher != MatcherReward::kNone && lambda2 > 0;
  if (!use_cider && !matcher_on) throw ConfigError("reward has no enabled component");
}

json to_json(const RewardConfig& c) {
  return {{"use_cider", c.use_cider},
          {"lambda2", c.lambda2},
          {"matcher", matcher_reward_name(c.matcher)},
          {"matcher_run", c.matcher_run}};
}

RewardConfig reward_config_from_json(const json& j) {
  RewardConfig c;
  c.use_cider = j.value("use_cider", c.use_cider);
  c.lambda2 = j.value("lambda2", c.lambda2);
  c.matcher = matcher_reward_from_name(j.value("matcher", std::string("none")));
  c.matcher_run = j.value("matcher_run", c.matcher_run);
  return c;
}

RewardModel::RewardModel(RewardConfig cfg, const CiderD* cider, const MatcherParams* matcher,
                         MatcherConfig matcher_cfg, std::set<int> nouns)
    : cfg_(std::move(cfg)),
      cider_(cider),
      matcher_(matcher),
      matcher_cfg_(matcher_cfg),
      nouns_(std::move(nouns)) {
  cfg_.validate();
  if (cfg_.use_cider && !cider_) throw std::invalid_argument("CIDEr reward needs a CIDEr context");
  if (cfg_.matcher != MatcherReward::kNone && !matcher_) {
    throw std::invalid_argument("matcher reward needs a matcher");
  }
  matcher_cfg_.noun_masked = cfg_.matcher == MatcherReward::kPosScan;
}

std::vector<RewardBreakdown> RewardModel::score(
    const std::vector<const Matrix*>& features, const std::vector<const CiderD::Prepared*>& refs,
    const std::vector<std::vector<int>>& captions) const {
  const size_t n = captions.size();
  std::vector<RewardBreakdown> out(n);
  if (cfg_.use_cider) {
    for (size_t i = 0; i < n; ++i) out[i].cider = cider_->score(captions[i], *refs[i]);
  }
  if (cfg_.matcher != MatcherReward::kNone) {
    std::vector<size_t> scored;
    std::vector<std::span<const int>> spans;
    std::vector<std::vector<bool>> masks(n);
    for (size_t i = 0; i < n; ++i) {
      masks[i].resize(captions[i].size());
      bool any_noun = false;
      for (size_t t = 0; t < captions[i].size(); ++t) {
        masks[i][t] = nouns_.count(captions[i][t]) > 0;
        any_noun = any_noun || masks[i][t];
      }
      if (captions[i].empty() || (matcher_cfg_.noun_masked && !any_noun)) {
        ++warnings_;
        continue;
      }
      scored.push_back(i);
      spans.emplace_back(captions[i]);
    }
    const std::vector<Matrix> words = encode_words_batch(spans, *matcher_, nullptr);
    for (size_t j = 0; j < scored.size(); ++j) {
      const size_t i = scored[j];
      const Matrix regions = encode_regions(*features[i], *matcher_);
      out[i].matcher =
          score_pair(regions, words[j], matcher_cfg_.noun_masked ? &masks[i] : nullptr,
                     matcher_cfg_)
              .score;
    }
  }
  for (auto& r : out) {
    r.total = (cfg_.use_cider ? r.cider : 0.0) +
              (cfg_.matcher != MatcherReward::kNone ? cfg_.lambda2 * r.matcher : 0.0);
  }
  return out;
}

RewardBreakdown RewardModel::score_one(const Matrix& features, const CiderD::Prepared& refs,
                                       const std::vector<int>& caption) const {
  return score({&features}, {&refs}, {caption}).front();
}

namespace {

std::vector<int> targets_of(const Decoded& d) {
  return std::vector<int>(d.tokens.begin() + 1, d.tokens.end());
}

}  // namespace

ScstStep scst_batch(const std::vector<const Matrix*>& features, const CaptionerParams& params,
                    const CaptionerConfig& cap_cfg, int max_len, Rng& rng,
                    const RewardFn& rewards) {
  ScstStep out;
  const size_t batch = features.size();
  if (batch == 0) throw std::invalid_argument("SCST batch is empty");
  out.samples = sample_decode_batch(features, params, cap_cfg, max_len, rng);
  out.baselines = greedy_decode_batch(features, params, cap_cfg, max_len);
  std::vector<std::vector<int>> sampled, greedy, targets;
  for (size_t b = 0; b < batch; ++b) {
    sampled.push_back(out.samples[b].content(cap_cfg.bos_id, cap_cfg.eos_id));
    greedy.push_back(out.baselines[b].content(cap_cfg.bos_id, cap_cfg.eos_id));
    targets.push_back(targets_of(out.samples[b]));
  }
  const auto rs = rewards(sampled);
  const auto rb = rewards(greedy);
  const double scale = 1.0 / static_cast<double>(batch);
  std::vector<double> advantage(batch);
  for (size_t b = 0; b < batch; ++b) {
    advantage[b] = rs[b].total - rb[b].total;
    out.mean_sample_reward += rs[b].total * scale;
    out.mean_baseline_reward += rb[b].total * scale;
    out.mean_cider += rs[b].cider * scale;
    out.mean_matcher += rs[b].matcher * scale;
    out.loss -= advantage[b] * out.samples[b].log_probs.sum() * scale;
  }

  std::vector<size_t> active;
  std::vector<const Matrix*> f;
  std::vector<std::vector<int>> tg;
  for (size_t b = 0; b < batch; ++b) {
    if (advantage[b] == 0.0 || targets[b].empty()) continue;
    active.push_back(b);
    f.push_back(features[b]);
    tg.push_back(targets[b]);
  }
  if (active.empty()) {
    out.grad = zeros_like(params);
    return out;
  }
  const TeacherForcedBatch fwd = teacher_forced_batch(f, tg, params, cap_cfg);
  std::vector<Matrix> d_logits;
  for (size_t t = 0; t < fwd.steps.size(); ++t) {
    Matrix d = fwd.steps[t].log_probs.array().exp().matrix();
    for (size_t j = 0; j < active.size(); ++j) {
      auto col = d.col(static_cast<Eigen::Index>(j));
      if (t < tg[j].size()) {
        col(tg[j][t]) -= 1.0;
        col *= advantage[active[j]] * scale;
      } else {
        col.setZero();
      }
    }
    d_logits.push_back(std::move(d));
  }
  out.grad = teacher_forced_backward(fwd, params, d_logits, {});
  return out;
}

CaptionerParams scst_gradient(const Matrix& features, const CaptionerParams& params,
                              const CaptionerConfig& cap_cfg, int max_len, Rng& rng,
                              const std::function<double(const std::vector<int>&)>& reward) {
  RewardFn fn = [&](const std::vector<std::vector<int>>& caps) {
    std::vector<RewardBreakdown> r(caps.size());
    for (size_t i = 0; i < caps.size(); ++i) r[i].total = reward(caps[i]);
    return r;
  };
  return scst_batch({&features}, params, cap_cfg, max_len, rng, fn).grad;
}

CaptionerParams log_prob_gradient(const Matrix& features, const std::vector<int>& targets,
                                  const CaptionerParams& params, const CaptionerConfig& cap_cfg) {
  const TeacherForcedBatch fwd = teacher_forced_batch({&features}, {targets}, params, cap_cfg);
  std::vector<Matrix> d_logits;
  for (size_t t = 0; t < fwd.steps.size(); ++t) {
    Matrix d = -fwd.steps[t].log_probs.array().exp().matrix();
    d(targets[t], 0) += 1.0;
    d_logits.push_back(std::move(d));
  }
  return teacher_forced_backward(fwd, params, d_logits, {});
}

}  // namespace groundcap
