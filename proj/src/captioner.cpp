#include "groundcap/captioner.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "groundcap/datagen.hpp"
#include "groundcap/params.hpp"

namespace groundcap {

using nlohmann::json;

void CaptionerConfig::validate() const {
  if (feature_dim < 1 || region_dim < 1 || word_dim < 1 || hidden < 1 || attention_dim < 1) {
    throw ConfigError("captioner dimensions must be >= 1");
  }
  if (vocab_size < 1) throw ConfigError("captioner vocab_size must be >= 1");
  if (bos_id < 0 || bos_id >= vocab_size || eos_id < 0 || eos_id >= vocab_size) {
    throw ConfigError("captioner BOS/EOS ids must lie inside the vocabulary");
  }
}

json to_json(const CaptionerConfig& c) {
  return {{"feature_dim", c.feature_dim}, {"region_dim", c.region_dim},
          {"word_dim", c.word_dim},       {"hidden", c.hidden},
          {"attention_dim", c.attention_dim}, {"vocab_size", c.vocab_size},
          {"bos_id", c.bos_id},           {"eos_id", c.eos_id}};
}

CaptionerConfig captioner_config_from_json(const json& j) {
  CaptionerConfig c;
  c.feature_dim = j.value("feature_dim", c.feature_dim);
  c.region_dim = j.value("region_dim", c.region_dim);
  c.word_dim = j.value("word_dim", c.word_dim);
  c.hidden = j.value("hidden", c.hidden);
  c.attention_dim = j.value("attention_dim", c.attention_dim);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.bos_id = j.value("bos_id", c.bos_id);
  c.eos_id = j.value("eos_id", c.eos_id);
  return c;
}

CaptionerParams CaptionerParams::zeros(const CaptionerConfig& cfg) {
  const int h = cfg.hidden;
  CaptionerParams p;
  p.region_weight = Matrix::Zero(cfg.region_dim, cfg.feature_dim);
  p.region_bias = Matrix::Zero(cfg.region_dim, 1);
  p.word_embedding = Matrix::Zero(cfg.vocab_size, cfg.word_dim);
  p.att_W = Matrix::Zero(4 * h, h + cfg.region_dim + cfg.word_dim);
  p.att_U = Matrix::Zero(4 * h, h);
  p.att_b = Matrix::Zero(4 * h, 1);
  p.lang_W = Matrix::Zero(4 * h, cfg.region_dim + h);
  p.lang_U = Matrix::Zero(4 * h, h);
  p.lang_b = Matrix::Zero(4 * h, 1);
  p.attn_w = Matrix::Zero(cfg.attention_dim, 1);
  p.attn_Wv = Matrix::Zero(cfg.attention_dim, cfg.region_dim);
  p.attn_Wh = Matrix::Zero(cfg.attention_dim, h);
  p.out_W = Matrix::Zero(cfg.vocab_size, h);
  p.out_b = Matrix::Zero(cfg.vocab_size, 1);
  return p;
}

CaptionerParams CaptionerParams::init(const CaptionerConfig& cfg, Rng& rng) {
  cfg.validate();
  CaptionerParams p = zeros(cfg);
  auto fan = [](const Matrix& m) { return 1.0 / std::sqrt(static_cast<double>(m.cols())); };
  fill_uniform(p.region_weight, std::sqrt(6.0 / (cfg.feature_dim + cfg.region_dim)), rng);
  fill_uniform(p.word_embedding, 0.1, rng);
  for (auto* m : {&p.att_W, &p.att_U, &p.lang_W, &p.lang_U}) {
    fill_uniform(*m, 1.0 / std::sqrt(static_cast<double>(cfg.hidden)), rng);
  }
  fill_uniform(p.attn_w, fan(p.attn_Wh), rng);
  fill_uniform(p.attn_Wv, fan(p.attn_Wv), rng);
  fill_uniform(p.attn_Wh, fan(p.attn_Wh), rng);
  fill_uniform(p.out_W, fan(p.out_W), rng);
  return p;
}

std::vector<std::pair<const char*, Matrix*>> CaptionerParams::tensors() {
  return {{"region_weight", &region_weight}, {"region_bias", &region_bias},
          {"word_embedding", &word_embedding}, {"att_W", &att_W}, {"att_U", &att_U},
          {"att_b", &att_b}, {"lang_W", &lang_W}, {"lang_U", &lang_U},
          {"lang_b", &lang_b}, {"attn_w", &attn_w}, {"attn_Wv", &attn_Wv},
          {"attn_Wh", &attn_Wh}, {"out_W", &out_W}, {"out_b", &out_b}};
}

std::vector<std::pair<const char*, const Matrix*>> CaptionerParams::tensors() const {
  std::vector<std::pair<const char*, const Matrix*>> out;
  for (auto& [name, m] : const_cast<CaptionerParams*>(this)->tensors()) out.emplace_back(name, m);
  return out;
}

DecoderState init_state_batch(const std::vector<const Matrix*>& features,
                              const CaptionerParams& params) {
  const auto h = params.att_U.cols();
  const auto batch = static_cast<Eigen::Index>(features.size());
  DecoderState s;
  s.h1 = Matrix::Zero(h, batch);
  s.c1 = Matrix::Zero(h, batch);
  s.h2 = Matrix::Zero(h, batch);
  s.c2 = Matrix::Zero(h, batch);
  s.mean.resize(params.region_weight.rows(), batch);
  for (Eigen::Index b = 0; b < batch; ++b) {
    const Matrix& f = *features[static_cast<size_t>(b)];
    if (f.cols() != params.region_weight.cols()) {
      throw std::invalid_argument("region feature dimension does not match the captioner");
    }
    if (f.rows() < 1) throw std::invalid_argument("an image needs at least one region");
    Matrix v = f * params.region_weight.transpose();
    v.rowwise() += params.region_bias.col(0).transpose();
    s.mean.col(b) = v.colwise().mean().transpose();
    s.keys.push_back(v * params.attn_Wv.transpose());
    s.projected.push_back(std::move(v));
  }
  return s;
}

DecoderState init_state(const Matrix& features, const CaptionerParams& params) {
  return init_state_batch({&features}, params);
}

void step_batch(DecoderState& s, const std::vector<int>& prev_tokens,
                const CaptionerParams& params, StepCache& cache) {
  const auto batch = static_cast<Eigen::Index>(s.batch());
  const auto h = params.att_U.cols();
  const auto d2 = params.region_weight.rows();
  const auto wd = params.word_embedding.cols();
  const int vocab = static_cast<int>(params.word_embedding.rows());
  if (static_cast<Eigen::Index>(prev_tokens.size()) != batch) {
    throw std::invalid_argument("one previous token per image is required");
  }
  Matrix x1(h + d2 + wd, batch);
  for (Eigen::Index b = 0; b < batch; ++b) {
    const int tok = prev_tokens[static_cast<size_t>(b)];
    if (tok < 0 || tok >= vocab) throw std::out_of_range("token id outside the vocabulary");
    x1.col(b) << s.h2.col(b), s.mean.col(b), params.word_embedding.row(tok).transpose();
  }
  cache.inputs = prev_tokens;
  lstm_forward(params.att_W, params.att_U, params.att_b, x1, s.h1, s.c1, cache.att, s.h1, s.c1);

  const Matrix query = params.attn_Wh * s.h1;  // d_a x B
  Matrix x2(d2 + h, batch);
  cache.act.resize(static_cast<size_t>(batch));
  cache.beta.resize(static_cast<size_t>(batch));
  for (Eigen::Index b = 0; b < batch; ++b) {
    const auto ub = static_cast<size_t>(b);
    Matrix act = s.keys[ub];
    act.rowwise() += query.col(b).transpose();
    act = act.array().tanh().matrix();
    const Vector z = act * params.attn_w.col(0);
    cache.beta[ub] = softmax(z);
    x2.col(b) << s.projected[ub].transpose() * cache.beta[ub], s.h1.col(b);
    cache.act[ub] = std::move(act);
  }
  lstm_forward(params.lang_W, params.lang_U, params.lang_b, x2, s.h2, s.c2, cache.lang, s.h2,
               s.c2);
  Matrix logits = params.out_W * s.h2;
  logits.colwise() += params.out_b.col(0);
  cache.log_probs.resize(logits.rows(), batch);
  for (Eigen::Index b = 0; b < batch; ++b) cache.log_probs.col(b) = log_softmax(logits.col(b));
}

StepOutput step(DecoderState& state, int prev_token, const CaptionerParams& params) {
  if (state.batch() != 1) throw std::invalid_argument("step expects a single-image state");
  StepCache cache;
  step_batch(state, {prev_token}, params, cache);
  StepOutput out;
  out.beta = cache.beta[0];
  out.scores = cache.act[0] * params.attn_w.col(0);
  out.attended = state.projected[0].transpose() * out.beta;
  out.logits = params.out_W * state.h2.col(0) + params.out_b.col(0);
  return out;
}

TeacherForcedBatch teacher_forced_batch(const std::vector<const Matrix*>& features,
                                        const std::vector<std::vector<int>>& targets,
                                        const CaptionerParams& params,
                                        const CaptionerConfig& cfg) {
  if (features.size() != targets.size()) {
    throw std::invalid_argument("one target sequence per image is required");
  }
  TeacherForcedBatch out;
  out.targets = targets;
  for (const Matrix* f : features) out.features.push_back(*f);
  DecoderState state = init_state_batch(features, params);
  out.initial = state;
  size_t steps = 0;
  for (const auto& t : targets) steps = std::max(steps, t.size());
  const size_t batch = targets.size();
  out.steps.resize(steps);
  std::vector<int> prev(batch, cfg.bos_id);
  for (size_t t = 0; t < steps; ++t) {
    step_batch(state, prev, params, out.steps[t]);
    for (size_t b = 0; b < batch; ++b) {
      prev[b] = t < targets[b].size() ? targets[b][t] : cfg.eos_id;
    }
  }
  for (size_t b = 0; b < batch; ++b) {
    const auto n = static_cast<Eigen::Index>(targets[b].size());
    Vector lp(n);
    Matrix beta(n, out.initial.projected[b].rows());
    for (Eigen::Index t = 0; t < n; ++t) {
      const auto& st = out.steps[static_cast<size_t>(t)];
      lp[t] = st.log_probs(targets[b][static_cast<size_t>(t)], static_cast<Eigen::Index>(b));
      beta.row(t) = st.beta[b].transpose();
    }
    out.target_log_probs.push_back(std::move(lp));
    out.beta.push_back(std::move(beta));
  }
  return out;
}

CaptionerParams teacher_forced_backward(const TeacherForcedBatch& fwd,
                                        const CaptionerParams& params,
                                        const std::vector<Matrix>& d_logits,
                                        const std::vector<Matrix>& d_beta) {
  CaptionerParams g = zeros_like(params);
  const auto batch = static_cast<Eigen::Index>(fwd.targets.size());
  const auto h = params.att_U.cols();
  const auto d2 = params.region_weight.rows();
  const auto wd = params.word_embedding.cols();
  if (d_logits.size() != fwd.steps.size()) {
    throw std::invalid_argument("one logit gradient per decoding step is required");
  }

  std::vector<Matrix> d_keys, d_proj;
  for (Eigen::Index b = 0; b < batch; ++b) {
    const auto& v = fwd.initial.projected[static_cast<size_t>(b)];
    d_keys.push_back(Matrix::Zero(v.rows(), params.attn_w.rows()));
    d_proj.push_back(Matrix::Zero(v.rows(), v.cols()));
  }
  Matrix d_mean = Matrix::Zero(d2, batch);
  Matrix dh1 = Matrix::Zero(h, batch), dc1 = Matrix::Zero(h, batch);
  Matrix dh2 = Matrix::Zero(h, batch), dc2 = Matrix::Zero(h, batch);
  Matrix dx, dh_prev, dc_prev;

  for (size_t t = fwd.steps.size(); t-- > 0;) {
    const StepCache& st = fwd.steps[t];
    const Matrix& dl = d_logits[t];
    const Matrix h2 = st.lang.o.array() * st.lang.tanh_c.array();
    g.out_W.noalias() += dl * h2.transpose();
    g.out_b.col(0) += dl.rowwise().sum();
    dh2.noalias() += params.out_W.transpose() * dl;

    lstm_backward(st.lang, params.lang_W, params.lang_U, dh2, dc2, g.lang_W, g.lang_U, g.lang_b,
                  dx, dh_prev, dc_prev);
    dh2 = dh_prev;
    dc2 = dc_prev;
    const Matrix d_hat = dx.topRows(d2);
    dh1 += dx.bottomRows(h);

    const Matrix h1 = st.att.o.array() * st.att.tanh_c.array();
    Matrix d_query(params.attn_w.rows(), batch);
    for (Eigen::Index b = 0; b < batch; ++b) {
      const auto ub = static_cast<size_t>(b);
      const Matrix& v = fwd.initial.projected[ub];
      const Vector& beta = st.beta[ub];
      Vector db = v * d_hat.col(b);
      if (ub < d_beta.size() && d_beta[ub].size() > 0 &&
          t < static_cast<size_t>(d_beta[ub].rows())) {
        db += d_beta[ub].row(static_cast<Eigen::Index>(t)).transpose();
      }
      d_proj[ub].noalias() += beta * d_hat.col(b).transpose();
      const Vector dz = softmax_backward(beta, db);
      const Matrix& act = st.act[ub];
      g.attn_w.col(0).noalias() += act.transpose() * dz;
      const Matrix d_pre =
          ((dz * params.attn_w.col(0).transpose()).array() * (1.0 - act.array().square()))
              .matrix();
      d_keys[ub] += d_pre;
      d_query.col(b) = d_pre.colwise().sum().transpose();
    }
    g.attn_Wh.noalias() += d_query * h1.transpose();
    dh1.noalias() += params.attn_Wh.transpose() * d_query;

    lstm_backward(st.att, params.att_W, params.att_U, dh1, dc1, g.att_W, g.att_U, g.att_b, dx,
                  dh_prev, dc_prev);
    dh1 = dh_prev;
    dc1 = dc_prev;
    dh2 += dx.topRows(h);
    d_mean += dx.middleRows(h, d2);
    for (Eigen::Index b = 0; b < batch; ++b) {
      g.word_embedding.row(st.inputs[static_cast<size_t>(b)]) += dx.col(b).tail(wd).transpose();
    }
  }

  for (Eigen::Index b = 0; b < batch; ++b) {
    const auto ub = static_cast<size_t>(b);
    const Matrix& v = fwd.initial.projected[ub];
    g.attn_Wv.noalias() += d_keys[ub].transpose() * v;
    Matrix dv = d_proj[ub] + d_keys[ub] * params.attn_Wv;
    dv.rowwise() += d_mean.col(b).transpose() / static_cast<double>(v.rows());
    g.region_weight.noalias() += dv.transpose() * fwd.features[ub];
    g.region_bias.col(0) += dv.colwise().sum().transpose();
  }
  return g;
}

TeacherForcedResult teacher_forced_forward(const Matrix& features, std::span<const int> tokens,
                                           const CaptionerParams& params,
                                           const CaptionerConfig& cfg) {
  std::vector<int> target(tokens.begin(), tokens.end());
  target.push_back(cfg.eos_id);
  TeacherForcedBatch fwd = teacher_forced_batch({&features}, {target}, params, cfg);
  TeacherForcedResult out;
  out.log_probs = fwd.target_log_probs[0];
  out.beta.role = AttentionRole::kCaptioner;
  out.beta.weights = fwd.beta[0];
  return out;
}

std::vector<int> Decoded::content(int bos_id, int eos_id) const {
  std::vector<int> out;
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (i == 0 && tokens[i] == bos_id) continue;
    if (i + 1 == tokens.size() && tokens[i] == eos_id) continue;
    out.push_back(tokens[i]);
  }
  return out;
}

Matrix Decoded::content_beta(int eos_id) const {
  const Eigen::Index n = beta.weights.rows() - (finished(eos_id) ? 1 : 0);
  return beta.weights.topRows(std::max<Eigen::Index>(n, 0));
}

namespace {

std::vector<Decoded> decode_batch(const std::vector<const Matrix*>& features,
                                  const CaptionerParams& params, const CaptionerConfig& cfg,
                                  int max_len, Rng* rng) {
  const size_t batch = features.size();
  std::vector<Decoded> out(batch);
  if (batch == 0) return out;
  DecoderState state = init_state_batch(features, params);
  std::vector<std::vector<double>> lps(batch);
  std::vector<std::vector<Vector>> betas(batch);
  std::vector<int> prev(batch, cfg.bos_id);
  std::vector<bool> done(batch, false);
  for (auto& d : out) d.tokens.push_back(cfg.bos_id);
  StepCache cache;
  for (int t = 0; t + 1 < max_len; ++t) {
    step_batch(state, prev, params, cache);
    bool all_done = true;
    for (size_t b = 0; b < batch; ++b) {
      if (done[b]) continue;
      const auto col = cache.log_probs.col(static_cast<Eigen::Index>(b));
      int tok;
      if (rng) {
        const Vector p = col.array().exp();
        std::discrete_distribution<int> pick(p.data(), p.data() + p.size());
        tok = pick(*rng);
      } else {
        tok = argmax(col);
      }
      out[b].tokens.push_back(tok);
      lps[b].push_back(col[tok]);
      betas[b].push_back(cache.beta[b]);
      prev[b] = tok;
      if (tok == cfg.eos_id) {
        done[b] = true;
      } else {
        all_done = false;
      }
    }
    if (all_done) break;
  }
  for (size_t b = 0; b < batch; ++b) {
    const auto n = static_cast<Eigen::Index>(lps[b].size());
    out[b].log_probs = Eigen::Map<const Vector>(lps[b].data(), n);
    out[b].beta.role = AttentionRole::kCaptioner;
    out[b].beta.weights.resize(n, state.projected[b].rows());
    for (Eigen::Index t = 0; t < n; ++t) {
      out[b].beta.weights.row(t) = betas[b][static_cast<size_t>(t)].transpose();
    }
  }
  return out;
}

}  // namespace

std::vector<Decoded> greedy_decode_batch(const std::vector<const Matrix*>& features,
                                         const CaptionerParams& params,
                                         const CaptionerConfig& cfg, int max_len) {
  return decode_batch(features, params, cfg, max_len, nullptr);
}

std::vector<Decoded> sample_decode_batch(const std::vector<const Matrix*>& features,
                                         const CaptionerParams& params,
                                         const CaptionerConfig& cfg, int max_len, Rng& rng) {
  return decode_batch(features, params, cfg, max_len, &rng);
}

Decoded greedy_decode(const Matrix& features, const CaptionerParams& params,
                      const CaptionerConfig& cfg, int max_len) {
  return decode_batch({&features}, params, cfg, max_len, nullptr).front();
}

Decoded sample_decode(const Matrix& features, const CaptionerParams& params,
                      const CaptionerConfig& cfg, int max_len, Rng& rng) {
  return decode_batch({&features}, params, cfg, max_len, &rng).front();
}

namespace {

struct Hypothesis {
  std::vector<int> tokens;
  std::vector<double> log_probs;
  std::vector<Vector> betas;
  double score = 0;
  bool finished = false;
  DecoderState state;
};

}  // namespace

Decoded beam_search(const Matrix& features, const CaptionerParams& params,
                    const CaptionerConfig& cfg, int beam_size, int max_len) {
  if (beam_size < 1) throw std::invalid_argument("beam_size must be >= 1");
  std::vector<Hypothesis> beam(1);
  beam[0].tokens = {cfg.bos_id};
  beam[0].state = init_state(features, params);
  for (int t = 0; t + 1 < max_len; ++t) {
    struct Candidate {
      double score;
      int hyp;
      int token;  // -1 keeps a finished hypothesis
    };
    std::vector<Candidate> pool;
    std::vector<StepCache> caches(beam.size());
    std::vector<DecoderState> next_states(beam.size());
    for (size_t i = 0; i < beam.size(); ++i) {
      if (beam[i].finished) {
        pool.push_back({beam[i].score, static_cast<int>(i), -1});
        continue;
      }
      next_states[i] = beam[i].state;
      step_batch(next_states[i], {beam[i].tokens.back()}, params, caches[i]);
      const auto col = caches[i].log_probs.col(0);
      for (int v = 0; v < static_cast<int>(col.size()); ++v) {
        pool.push_back({beam[i].score + col[v], static_cast<int>(i), v});
      }
    }
    if (pool.size() == beam.size() &&
        std::all_of(beam.begin(), beam.end(), [](const Hypothesis& h) { return h.finished; })) {
      break;
    }
    std::stable_sort(pool.begin(), pool.end(),
                     [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
    if (pool.size() > static_cast<size_t>(beam_size)) pool.resize(static_cast<size_t>(beam_size));
    std::vector<Hypothesis> next;
    for (const auto& c : pool) {
      const Hypothesis& src = beam[static_cast<size_t>(c.hyp)];
      Hypothesis h;
      if (c.token < 0) {
        h = src;
      } else {
        const auto& cache = caches[static_cast<size_t>(c.hyp)];
        h.tokens = src.tokens;
        h.tokens.push_back(c.token);
        h.log_probs = src.log_probs;
        h.log_probs.push_back(cache.log_probs(c.token, 0));
        h.betas = src.betas;
        h.betas.push_back(cache.beta[0]);
        h.score = c.score;
        h.finished = c.token == cfg.eos_id;
        h.state = next_states[static_cast<size_t>(c.hyp)];
      }
      next.push_back(std::move(h));
    }
    beam = std::move(next);
  }
  const Hypothesis* best = &beam[0];
  for (const auto& h : beam) {
    if (h.score > best->score) best = &h;
  }
  Decoded out;
  out.tokens = best->tokens;
  out.log_probs = Eigen::Map<const Vector>(best->log_probs.data(),
                                           static_cast<Eigen::Index>(best->log_probs.size()));
  out.beta.role = AttentionRole::kCaptioner;
  out.beta.weights.resize(static_cast<Eigen::Index>(best->betas.size()),
                          features.rows());
  for (size_t t = 0; t < best->betas.size(); ++t) {
    out.beta.weights.row(static_cast<Eigen::Index>(t)) = best->betas[t].transpose();
  }
  return out;
}

}  // namespace groundcap
