#include <doctest.h>

#include "groundcap/objectives.hpp"
#include "groundcap/params.hpp"
#include "oracles.hpp"

using namespace groundcap;

namespace {

CaptionerConfig toy_config(int vocab = 7) {
  CaptionerConfig c;
  c.feature_dim = 5;
  c.region_dim = 4;
  c.word_dim = 3;
  c.hidden = 4;
  c.attention_dim = 3;
  c.vocab_size = vocab;
  return c;
}

Vector random_distribution(Eigen::Index k, Rng& rng) {
  Matrix z(k, 1);
  fill_normal(z, 1.5, rng);
  return softmax(z.col(0));
}

struct Fixture {
  CaptionerConfig cfg = toy_config();
  CaptionerParams params;
  std::vector<Matrix> features;
  std::vector<std::vector<int>> tokens = {{4, 5, 6}, {3, 4}};
  std::vector<std::vector<bool>> masks = {{true, false, true}, {false, true}};
  std::vector<Matrix> teacher, gamma;

  explicit Fixture(std::uint64_t seed) {
    Rng rng(seed);
    params = CaptionerParams::init(cfg, rng);
    for (int i = 0; i < 2; ++i) {
      Matrix f(3, 5);
      fill_normal(f, 1.0, rng);
      features.push_back(f);
      Matrix t(static_cast<Eigen::Index>(tokens[static_cast<size_t>(i)].size()), 3);
      for (Eigen::Index r = 0; r < t.rows(); ++r) t.row(r) = random_distribution(3, rng).transpose();
      teacher.push_back(t);
    }
    gamma.push_back((Matrix(3, 3) << 1, 0, 0, 0, 0, 0, 0, 1, 1).finished());
    gamma.push_back((Matrix(2, 3) << 0, 0, 0, 0, 0, 1).finished());
  }

  std::vector<Stage1Item> items(bool ground_truth) const {
    std::vector<Stage1Item> out;
    for (size_t i = 0; i < 2; ++i) {
      out.push_back({&features[i], tokens[i], &masks[i], ground_truth ? &gamma[i] : &teacher[i]});
    }
    return out;
  }
};

}  // namespace

TEST_CASE("KL term is non-negative and vanishes exactly on equal rows") {
  Rng rng(41);
  for (int trial = 0; trial < 200; ++trial) {
    const Vector a = random_distribution(4, rng);
    const Vector b = random_distribution(4, rng);
    CHECK(kl_attention_term(a, b) >= 0.0);
    CHECK(kl_attention_term(a, a) == 0.0);
    if ((a - b).norm() > 1e-3) CHECK(kl_attention_term(a, b) > 0.0);
  }
  Vector onehot = Vector::Zero(3);
  onehot[1] = 1.0;
  CHECK(std::isfinite(kl_attention_term(onehot, Vector::Constant(3, 1.0 / 3.0))));
  CHECK(std::isfinite(kl_attention_term(Vector::Constant(3, 1.0 / 3.0), onehot)));
}

TEST_CASE("KL gradient matches finite differences") {
  Rng rng(42);
  const Vector beta = random_distribution(4, rng);
  const Vector alpha = random_distribution(4, rng);
  const Vector g = kl_attention_grad(beta, alpha);
  for (int i = 0; i < 4; ++i) {
    Vector up = beta, down = beta;
    up[i] += 1e-7;
    down[i] -= 1e-7;
    const double fd = (kl_attention_term(up, alpha) - kl_attention_term(down, alpha)) / 2e-7;
    CHECK(g[i] == doctest::Approx(fd).epsilon(1e-6));
  }
}

TEST_CASE("ground-truth indicators follow the IoU rule") {
  SceneRecord scene;
  scene.features = Matrix::Zero(3, 2);
  scene.boxes = {BoundingBox::make(0, 0, 10, 10), BoundingBox::make(0, 0, 10, 12),
                 BoundingBox::make(50, 50, 60, 60)};
  scene.classes = {0, -1, 1};
  CaptionRecord cap;
  cap.tokens = {4, 5, 6};
  cap.noun_mask = {true, false, true};
  cap.grounding[0] = {BoundingBox::make(0, 0, 10, 10)};
  cap.grounding[2] = {BoundingBox::make(52, 52, 60, 60)};
  const Matrix gamma = build_gamma(scene, cap);
  const Matrix expected = (Matrix(3, 3) << 1, 1, 0, 0, 0, 0, 0, 0, 1).finished();
  CHECK(same_matrix(gamma, expected));
}

TEST_CASE("stage-1 gradients match finite differences in every supervision mode") {
  Fixture fx(43);
  struct Mode {
    const char* name;
    Supervision source;
    GtLossForm form;
  };
  const Mode modes[] = {{"none", Supervision::kNone, GtLossForm::kNll},
                        {"pos-scan", Supervision::kPosScan, GtLossForm::kNll},
                        {"scan", Supervision::kScan, GtLossForm::kNll},
                        {"ground-truth", Supervision::kGroundTruth, GtLossForm::kNll},
                        {"ground-truth kl", Supervision::kGroundTruth, GtLossForm::kKl}};
  for (const auto& m : modes) {
    Stage1Config cfg;
    cfg.supervision = m.source;
    cfg.gt_form = m.form;
    cfg.lambda1 = 0.7;
    cfg.lambda1_gt = 0.5;
    const auto items = fx.items(m.source == Supervision::kGroundTruth);
    const Stage1Loss loss = stage1_batch_loss(items, fx.params, fx.cfg, cfg, true);
    std::string worst;
    const double err = oracle::gradient_error(
        fx.params, loss.grad,
        [&] { return stage1_batch_loss(items, fx.params, fx.cfg, cfg, false).loss; }, 1e-5,
        &worst);
    INFO(m.name << " worst tensor " << worst);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("stage-1 loss decomposes into NLL and the masked KL term") {
  Fixture fx(44);
  Stage1Config cfg;
  cfg.lambda1 = 0.3;
  const auto items = fx.items(false);
  const Stage1Loss loss = stage1_batch_loss(items, fx.params, fx.cfg, cfg, false);
  double nll = 0, sup = 0;
  for (size_t i = 0; i < 2; ++i) {
    const auto tf = teacher_forced_forward(fx.features[i], fx.tokens[i], fx.params, fx.cfg);
    nll -= tf.log_probs.sum();
    for (size_t t = 0; t < fx.tokens[i].size(); ++t) {
      if (!fx.masks[i][t]) continue;
      sup += kl_attention_term(tf.beta.weights.row(static_cast<Eigen::Index>(t)).transpose(),
                               fx.teacher[i].row(static_cast<Eigen::Index>(t)).transpose());
    }
  }
  CHECK(loss.nll == doctest::Approx(nll).epsilon(1e-12));
  CHECK(loss.supervision == doctest::Approx(0.3 * sup).epsilon(1e-12));
  CHECK(loss.loss == doctest::Approx((nll + 0.3 * sup) / 2).epsilon(1e-12));
  CHECK(loss.tokens == 7);

  // Teacher rows at non-noun positions are ignored.
  Fixture other(44);
  other.teacher[0].row(1) = Vector::Constant(3, 1.0 / 3.0).transpose();
  CHECK(stage1_batch_loss(other.items(false), other.params, other.cfg, cfg, false).loss ==
        loss.loss);
}

TEST_CASE("zero weight is bit-identical to the unsupervised loss") {
  Fixture fx(45);
  Stage1Config none;
  none.supervision = Supervision::kNone;
  Stage1Config zero;
  zero.lambda1 = 0.0;
  const Stage1Loss a = stage1_batch_loss(fx.items(false), fx.params, fx.cfg, none, true);
  const Stage1Loss b = stage1_batch_loss(fx.items(false), fx.params, fx.cfg, zero, true);
  CHECK(a.loss == b.loss);
  CHECK(same_params(a.grad, b.grad));
}

TEST_CASE("supervision without a teacher is rejected") {
  Fixture fx(46);
  auto items = fx.items(false);
  items[0].teacher = nullptr;
  CHECK_THROWS_AS(stage1_batch_loss(items, fx.params, fx.cfg, Stage1Config{}, false),
                  std::invalid_argument);
}

TEST_CASE("reward model combines CIDEr and the matcher score") {
  Rng rng(47);
  MatcherConfig mc;
  mc.feature_dim = 5;
  mc.embed_dim = 4;
  mc.word_dim = 3;
  mc.vocab_size = 8;
  const MatcherParams mp = MatcherParams::init(mc, rng);
  const std::vector<std::vector<TokenSeq>> corpus = {{{4, 5, 6}, {4, 6}}, {{7, 5}}};
  const CiderD cider(corpus);
  const auto refs = cider.prepare(corpus[0]);
  Matrix f(3, 5);
  fill_normal(f, 1.0, rng);

  RewardConfig rc;
  rc.matcher = MatcherReward::kPosScan;
  rc.lambda2 = 0.5;
  RewardModel model(rc, &cider, &mp, mc, {4, 7});
  const TokenSeq with_noun = {4, 5, 6};
  const RewardBreakdown r = model.score_one(f, refs, with_noun);
  MatcherConfig pos = mc;
  pos.noun_masked = true;
  const double s_pos = matching_score(f, with_noun, {true, false, false}, mp, pos);
  CHECK(r.cider == doctest::Approx(cider.score(with_noun, refs)).epsilon(1e-12));
  CHECK(r.matcher == doctest::Approx(s_pos).epsilon(1e-12));
  CHECK(r.total == doctest::Approx(r.cider + 0.5 * s_pos).epsilon(1e-12));

  const RewardBreakdown nf = model.score_one(f, refs, {5, 6});
  CHECK(nf.matcher == 0.0);
  CHECK(model.noun_free_warnings() == 1);
  (void)model.score_one(f, refs, {});
  CHECK(model.noun_free_warnings() == 2);

  rc.use_cider = false;
  rc.matcher = MatcherReward::kNone;
  CHECK_THROWS_AS(rc.validate(), ConfigError);
}

TEST_CASE("SCST estimator is unbiased for the exact policy gradient") {
  // Two decoding steps over three tokens: BOS = 0, EOS = 2, max_len = 3.
  CaptionerConfig cfg = toy_config(3);
  cfg.bos_id = 0;
  cfg.eos_id = 2;
  Rng rng(48);
  CaptionerParams p = CaptionerParams::init(cfg, rng);
  p.out_W *= 2.0;
  Matrix f(2, 5);
  fill_normal(f, 1.0, rng);
  const int max_len = 3;
  auto reward = [](const std::vector<int>& content) {
    double r = 0.3 * static_cast<double>(content.size());
    for (int t : content) r += t == 1 ? 1.0 : 0.0;
    if (content.size() == 2 && content[0] == content[1]) r -= 0.8;
    return r;
  };

  // Exact gradient of -E[(r(y) - r(greedy)) log p(y)] by enumeration.
  const Decoded greedy = greedy_decode(f, p, cfg, max_len);
  const double baseline = reward(greedy.content(cfg.bos_id, cfg.eos_id));
  CaptionerParams exact = zeros_like(p);
  std::vector<std::vector<int>> sequences;
  for (int a = 0; a < 3; ++a) {
    if (a == cfg.eos_id) {
      sequences.push_back({a});
      continue;
    }
    for (int b = 0; b < 3; ++b) sequences.push_back({a, b});
  }
  double total_prob = 0;
  for (const auto& y : sequences) {
    const double logp =
        teacher_forced_batch({&f}, {y}, p, cfg).target_log_probs[0].sum();
    const double prob = std::exp(logp);
    total_prob += prob;
    std::vector<int> content(y.begin(), y.end());
    if (content.back() == cfg.eos_id) content.pop_back();
    add_scaled(exact, log_prob_gradient(f, y, p, cfg), -prob * (reward(content) - baseline));
  }
  CHECK(total_prob == doctest::Approx(1.0).epsilon(1e-12));

  Rng dir_rng(7);
  std::vector<CaptionerParams> directions;
  for (int d = 0; d < 3; ++d) {
    CaptionerParams u = zeros_like(p);
    for (auto& [name, m] : u.tensors()) fill_normal(*m, 1.0, dir_rng);
    directions.push_back(u);
  }
  auto project = [](const CaptionerParams& a, const CaptionerParams& b) {
    double s = 0;
    auto ta = a.tensors();
    auto tb = b.tensors();
    for (size_t i = 0; i < ta.size(); ++i) s += (ta[i].second->array() * tb[i].second->array()).sum();
    return s;
  };

  const int n = 10000;
  std::vector<double> sum(3, 0.0), sum_sq(3, 0.0);
  Rng sampler(2024);
  for (int i = 0; i < n; ++i) {
    const CaptionerParams g = scst_gradient(f, p, cfg, max_len, sampler, reward);
    for (size_t d = 0; d < 3; ++d) {
      const double x = project(g, directions[d]);
      sum[d] += x;
      sum_sq[d] += x * x;
    }
  }
  for (size_t d = 0; d < 3; ++d) {
    const double mean = sum[d] / n;
    const double var = sum_sq[d] / n - mean * mean;
    const double se = std::sqrt(var / n);
    const double want = project(exact, directions[d]);
    INFO("direction " << d << " mean " << mean << " exact " << want << " se " << se);
    CHECK(std::abs(mean - want) < 3 * se);
  }
}

TEST_CASE("SCST batch gradient is zero when samples match the baseline reward") {
  CaptionerConfig cfg = toy_config(5);
  Rng rng(49);
  const CaptionerParams p = CaptionerParams::init(cfg, rng);
  Matrix f(2, 5);
  fill_normal(f, 1.0, rng);
  Rng sampler(1);
  const CaptionerParams g =
      scst_gradient(f, p, cfg, 4, sampler, [](const std::vector<int>&) { return 1.0; });
  CHECK(squared_norm(g) == 0.0);
}

TEST_CASE("stage-1 and reward configs round-trip through JSON") {
  Stage1Config s;
  s.lambda1 = 0.25;
  s.supervision = Supervision::kGroundTruth;
  s.gt_form = GtLossForm::kKl;
  const Stage1Config s2 = stage1_config_from_json(to_json(s));
  CHECK(s2.lambda1 == 0.25);
  CHECK(s2.supervision == Supervision::kGroundTruth);
  CHECK(s2.gt_form == GtLossForm::kKl);
  CHECK_THROWS_AS(supervision_from_name("oracle"), ConfigError);
  RewardConfig r;
  r.matcher = MatcherReward::kScan;
  r.matcher_run = "m";
  const RewardConfig r2 = reward_config_from_json(to_json(r));
  CHECK(r2.matcher == MatcherReward::kScan);
  CHECK(r2.matcher_run == "m");
}
