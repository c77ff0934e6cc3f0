#include "groundcap/matcher.hpp"

#include <algorithm>
#include <cmath>

#include "groundcap/params.hpp"

namespace groundcap {

using nlohmann::json;

void MatcherConfig::validate() const {
  if (!(temperature > 0)) throw ConfigError("matcher temperature must be > 0");
  if (!(margin > 0 && margin < 2)) throw ConfigError("matcher margin must lie in (0, 2)");
  if (embed_dim < 1 || word_dim < 1 || feature_dim < 1)
    throw ConfigError("matcher dimensions must be >= 1");
  if (vocab_size < 1) throw ConfigError("matcher vocab_size must be >= 1");
}

json to_json(const MatcherConfig& c) {
  return {{"feature_dim", c.feature_dim}, {"embed_dim", c.embed_dim},
          {"word_dim", c.word_dim},       {"vocab_size", c.vocab_size},
          {"temperature", c.temperature}, {"margin", c.margin},
          {"noun_masked", c.noun_masked}, {"normalize_over_regions", c.normalize_over_regions}};
}

MatcherConfig matcher_config_from_json(const json& j) {
  MatcherConfig c;
  c.feature_dim = j.value("feature_dim", c.feature_dim);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.word_dim = j.value("word_dim", c.word_dim);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.temperature = j.value("temperature", c.temperature);
  c.margin = j.value("margin", c.margin);
  c.noun_masked = j.value("noun_masked", c.noun_masked);
  c.normalize_over_regions = j.value("normalize_over_regions", c.normalize_over_regions);
  return c;
}

MatcherParams MatcherParams::zeros(const MatcherConfig& cfg) {
  const int h = cfg.embed_dim;
  MatcherParams p;
  p.region_weight = Matrix::Zero(h, cfg.feature_dim);
  p.region_bias = Matrix::Zero(h, 1);
  p.word_embedding = Matrix::Zero(cfg.vocab_size, cfg.word_dim);
  for (auto* W : {&p.fwd_W, &p.bwd_W}) *W = Matrix::Zero(3 * h, cfg.word_dim);
  for (auto* U : {&p.fwd_U, &p.bwd_U}) *U = Matrix::Zero(3 * h, h);
  for (auto* b : {&p.fwd_b, &p.bwd_b}) *b = Matrix::Zero(3 * h, 1);
  return p;
}

MatcherParams MatcherParams::init(const MatcherConfig& cfg, Rng& rng) {
  cfg.validate();
  MatcherParams p = zeros(cfg);
  fill_uniform(p.region_weight, std::sqrt(6.0 / (cfg.feature_dim + cfg.embed_dim)), rng);
  fill_uniform(p.word_embedding, 0.1, rng);
  const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.embed_dim));
  for (auto* m : {&p.fwd_W, &p.fwd_U, &p.fwd_b, &p.bwd_W, &p.bwd_U, &p.bwd_b}) {
    fill_uniform(*m, bound, rng);
  }
  return p;
}

std::vector<std::pair<const char*, Matrix*>> MatcherParams::tensors() {
  return {{"region_weight", &region_weight}, {"region_bias", &region_bias},
          {"word_embedding", &word_embedding}, {"fwd_W", &fwd_W},
          {"fwd_U", &fwd_U}, {"fwd_b", &fwd_b}, {"bwd_W", &bwd_W},
          {"bwd_U", &bwd_U}, {"bwd_b", &bwd_b}};
}

std::vector<std::pair<const char*, const Matrix*>> MatcherParams::tensors() const {
  std::vector<std::pair<const char*, const Matrix*>> out;
  for (auto& [name, m] : const_cast<MatcherParams*>(this)->tensors()) out.emplace_back(name, m);
  return out;
}

Matrix encode_regions(const Matrix& features, const MatcherParams& params) {
  if (features.cols() != params.region_weight.cols()) {
    throw std::invalid_argument("region feature dimension does not match the matcher");
  }
  Matrix v = features * params.region_weight.transpose();
  v.rowwise() += params.region_bias.col(0).transpose();
  return v;
}

std::vector<Matrix> encode_words_batch(const std::vector<std::span<const int>>& captions,
                                       const MatcherParams& params,
                                       WordEncoderTrace* trace) {
  const Eigen::Index h = params.fwd_U.cols();
  const Eigen::Index dim = params.word_embedding.cols();
  const int vocab = static_cast<int>(params.word_embedding.rows());
  const size_t batch = captions.size();
  int max_len = 0;
  for (const auto& c : captions) {
    for (int id : c) {
      if (id < 0 || id >= vocab) throw std::out_of_range("token id outside the matcher vocabulary");
    }
    max_len = std::max(max_len, static_cast<int>(c.size()));
  }

  std::vector<Matrix> inputs(static_cast<size_t>(max_len));
  std::vector<std::vector<bool>> active(static_cast<size_t>(max_len));
  for (int t = 0; t < max_len; ++t) {
    Matrix& x = inputs[static_cast<size_t>(t)];
    x = Matrix::Zero(dim, static_cast<Eigen::Index>(batch));
    active[static_cast<size_t>(t)].assign(batch, false);
    for (size_t b = 0; b < batch; ++b) {
      if (t < static_cast<int>(captions[b].size())) {
        x.col(static_cast<Eigen::Index>(b)) =
            params.word_embedding.row(captions[b][static_cast<size_t>(t)]).transpose();
        active[static_cast<size_t>(t)][b] = true;
      }
    }
  }

  std::vector<Matrix> fwd_h(static_cast<size_t>(max_len)), bwd_h(static_cast<size_t>(max_len));
  std::vector<GruCache> fwd_cache(static_cast<size_t>(max_len)), bwd_cache(static_cast<size_t>(max_len));
  Matrix state = Matrix::Zero(h, static_cast<Eigen::Index>(batch));
  for (int t = 0; t < max_len; ++t) {
    const auto ut = static_cast<size_t>(t);
    gru_forward(params.fwd_W, params.fwd_U, params.fwd_b, inputs[ut], state, active[ut],
                fwd_cache[ut], fwd_h[ut]);
    state = fwd_h[ut];
  }
  state.setZero();
  for (int t = max_len - 1; t >= 0; --t) {
    const auto ut = static_cast<size_t>(t);
    gru_forward(params.bwd_W, params.bwd_U, params.bwd_b, inputs[ut], state, active[ut],
                bwd_cache[ut], bwd_h[ut]);
    state = bwd_h[ut];
  }

  std::vector<Matrix> words(batch);
  for (size_t b = 0; b < batch; ++b) {
    const auto n = static_cast<Eigen::Index>(captions[b].size());
    words[b].resize(n, h);
    for (Eigen::Index t = 0; t < n; ++t) {
      const auto ut = static_cast<size_t>(t);
      const auto col = static_cast<Eigen::Index>(b);
      words[b].row(t) = 0.5 * (fwd_h[ut].col(col) + bwd_h[ut].col(col)).transpose();
    }
  }
  if (trace) {
    trace->tokens.clear();
    for (const auto& c : captions) trace->tokens.emplace_back(c.begin(), c.end());
    trace->fwd = std::move(fwd_cache);
    trace->bwd = std::move(bwd_cache);
    trace->max_len = max_len;
  }
  return words;
}

void encode_words_backward(const WordEncoderTrace& trace, const std::vector<Matrix>& d_words,
                           const MatcherParams& params, MatcherParams& grad) {
  const Eigen::Index h = params.fwd_U.cols();
  const auto batch = static_cast<Eigen::Index>(trace.tokens.size());
  const int max_len = trace.max_len;
  auto d_state_at = [&](int t) {
    Matrix d = Matrix::Zero(h, batch);
    for (Eigen::Index b = 0; b < batch; ++b) {
      const auto& dw = d_words[static_cast<size_t>(b)];
      if (t < dw.rows()) d.col(b) = 0.5 * dw.row(t).transpose();
    }
    return d;
  };
  auto scatter_embedding = [&](int t, const Matrix& dx) {
    for (Eigen::Index b = 0; b < batch; ++b) {
      const auto& toks = trace.tokens[static_cast<size_t>(b)];
      if (t < static_cast<int>(toks.size())) {
        grad.word_embedding.row(toks[static_cast<size_t>(t)]) += dx.col(b).transpose();
      }
    }
  };

  Matrix dh = Matrix::Zero(h, batch);
  Matrix dx, dh_prev;
  for (int t = max_len - 1; t >= 0; --t) {
    dh += d_state_at(t);
    gru_backward(trace.fwd[static_cast<size_t>(t)], params.fwd_W, params.fwd_U, dh,
                 grad.fwd_W, grad.fwd_U, grad.fwd_b, dx, dh_prev);
    scatter_embedding(t, dx);
    dh = dh_prev;
  }
  dh.setZero();
  for (int t = 0; t < max_len; ++t) {
    dh += d_state_at(t);
    gru_backward(trace.bwd[static_cast<size_t>(t)], params.bwd_W, params.bwd_U, dh,
                 grad.bwd_W, grad.bwd_U, grad.bwd_b, dx, dh_prev);
    scatter_embedding(t, dx);
    dh = dh_prev;
  }
}

Matrix encode_words(std::span<const int> tokens, const MatcherParams& params) {
  return encode_words_batch({tokens}, params, nullptr).front();
}

Matrix similarity_matrix(const Matrix& regions, const Matrix& words) {
  const Vector nv = regions.rowwise().norm();
  const Vector ne = words.rowwise().norm();
  Matrix denom = nv * ne.transpose();
  denom.array() += kNormEpsilon;
  return ((regions * words.transpose()).array() / denom.array()).matrix();
}

Matrix normalize_similarities(const Matrix& similarities, bool over_regions) {
  const Matrix clipped = similarities.cwiseMax(0.0);
  Matrix out = clipped;
  if (over_regions) {
    for (Eigen::Index t = 0; t < clipped.cols(); ++t) {
      out.col(t) /= clipped.col(t).norm() + kNormEpsilon;
    }
  } else {
    for (Eigen::Index i = 0; i < clipped.rows(); ++i) {
      out.row(i) /= clipped.row(i).norm() + kNormEpsilon;
    }
  }
  return out;
}

AttendedRegions attend_regions(const Matrix& normalized, const Matrix& regions,
                               double temperature) {
  if (!(temperature > 0)) throw std::invalid_argument("temperature must be > 0");
  AttendedRegions out;
  const Eigen::Index n = normalized.cols();
  out.alpha.role = AttentionRole::kMatcher;
  out.alpha.weights.resize(n, normalized.rows());
  for (Eigen::Index t = 0; t < n; ++t) {
    out.alpha.weights.row(t) = softmax(temperature * normalized.col(t)).transpose();
  }
  out.attended = out.alpha.weights * regions;
  return out;
}

double global_score(const Matrix& words, const Matrix& attended) {
  if (words.rows() < 1) throw std::invalid_argument("global score needs at least one word");
  double sum = 0;
  for (Eigen::Index t = 0; t < words.rows(); ++t) {
    sum += cosine(words.row(t).transpose(), attended.row(t).transpose());
  }
  return sum / static_cast<double>(words.rows());
}

double pos_score(const Matrix& words, const Matrix& attended,
                 const std::vector<bool>& noun_mask) {
  if (noun_mask.size() != static_cast<size_t>(words.rows())) {
    throw std::invalid_argument("noun mask length differs from the caption length");
  }
  double sum = 0;
  int count = 0;
  for (Eigen::Index t = 0; t < words.rows(); ++t) {
    if (!noun_mask[static_cast<size_t>(t)]) continue;
    sum += cosine(words.row(t).transpose(), attended.row(t).transpose());
    ++count;
  }
  if (count == 0) throw NoNounError("caption has no noun positions");
  return sum / count;
}

TripletLoss triplet_loss_hard(const Matrix& scores, double margin) {
  const Eigen::Index b = scores.rows();
  if (b < 2 || scores.cols() != b) {
    throw std::invalid_argument("triplet loss needs a square score matrix of size >= 2");
  }
  TripletLoss out;
  out.grad = Matrix::Zero(b, b);
  out.hardest_caption.resize(static_cast<size_t>(b));
  out.hardest_image.resize(static_cast<size_t>(b));
  const double inv = 1.0 / static_cast<double>(b);
  for (Eigen::Index i = 0; i < b; ++i) {
    Eigen::Index neg_cap = -1, neg_img = -1;
    for (Eigen::Index c = 0; c < b; ++c) {
      if (c != i && (neg_cap < 0 || scores(i, c) > scores(i, neg_cap))) neg_cap = c;
      if (c != i && (neg_img < 0 || scores(c, i) > scores(neg_img, i))) neg_img = c;
    }
    out.hardest_caption[static_cast<size_t>(i)] = static_cast<int>(neg_cap);
    out.hardest_image[static_cast<size_t>(i)] = static_cast<int>(neg_img);
    const double pos = scores(i, i);
    const double h1 = margin - pos + scores(i, neg_cap);
    const double h2 = margin - pos + scores(neg_img, i);
    if (h1 > 0) {
      out.loss += h1 * inv;
      out.grad(i, i) -= inv;
      out.grad(i, neg_cap) += inv;
    }
    if (h2 > 0) {
      out.loss += h2 * inv;
      out.grad(i, i) -= inv;
      out.grad(neg_img, i) += inv;
    }
  }
  return out;
}

PairTrace score_pair(const Matrix& regions, const Matrix& words,
                     const std::vector<bool>* noun_mask, const MatcherConfig& cfg) {
  PairTrace tr;
  const Eigen::Index k = regions.rows();
  const Eigen::Index n = words.rows();
  if (n < 1) throw std::invalid_argument("cannot score an empty caption");
  const Vector nv = regions.rowwise().norm();
  const Vector ne = words.rowwise().norm();
  tr.dots = regions * words.transpose();
  tr.denom = nv * ne.transpose();
  tr.denom.array() += kNormEpsilon;
  tr.sim = (tr.dots.array() / tr.denom.array()).matrix();
  tr.clipped = tr.sim.cwiseMax(0.0);
  if (cfg.normalize_over_regions) {
    tr.norms = tr.clipped.colwise().norm();  // 1 x n
    tr.normalized = tr.clipped;
    for (Eigen::Index t = 0; t < n; ++t) tr.normalized.col(t) /= tr.norms(0, t) + kNormEpsilon;
  } else {
    tr.norms = tr.clipped.rowwise().norm();  // k x 1
    tr.normalized = tr.clipped;
    for (Eigen::Index i = 0; i < k; ++i) tr.normalized.row(i) /= tr.norms(i, 0) + kNormEpsilon;
  }
  tr.alpha.resize(n, k);
  for (Eigen::Index t = 0; t < n; ++t) {
    tr.alpha.row(t) = softmax(cfg.temperature * tr.normalized.col(t)).transpose();
  }
  tr.attended = tr.alpha * regions;
  tr.local.resize(n);
  tr.weights.assign(static_cast<size_t>(n), 0.0);
  int count = 0;
  for (Eigen::Index t = 0; t < n; ++t) {
    tr.local[t] = cosine(words.row(t).transpose(), tr.attended.row(t).transpose());
    if (!noun_mask || (*noun_mask)[static_cast<size_t>(t)]) ++count;
  }
  if (noun_mask && noun_mask->size() != static_cast<size_t>(n)) {
    throw std::invalid_argument("noun mask length differs from the caption length");
  }
  if (count == 0) throw NoNounError("caption has no noun positions");
  for (Eigen::Index t = 0; t < n; ++t) {
    if (!noun_mask || (*noun_mask)[static_cast<size_t>(t)]) {
      tr.weights[static_cast<size_t>(t)] = 1.0 / count;
      tr.score += tr.local[t] / count;
    }
  }
  return tr;
}

void score_pair_backward(const PairTrace& tr, const Matrix& regions, const Matrix& words,
                         double g, const MatcherConfig& cfg, Matrix& d_regions,
                         Matrix& d_words) {
  const Eigen::Index k = regions.rows();
  const Eigen::Index n = words.rows();
  Matrix d_attended = Matrix::Zero(n, regions.cols());
  for (Eigen::Index t = 0; t < n; ++t) {
    const double w = g * tr.weights[static_cast<size_t>(t)];
    if (w == 0.0) continue;
    Vector de = Vector::Zero(words.cols());
    Vector da = Vector::Zero(regions.cols());
    cosine_backward(words.row(t).transpose(), tr.attended.row(t).transpose(), w, de, da);
    d_words.row(t) += de.transpose();
    d_attended.row(t) = da.transpose();
  }
  // a_t = sum_i alpha(t, i) v_i
  d_regions.noalias() += tr.alpha.transpose() * d_attended;
  const Matrix d_alpha = d_attended * regions.transpose();  // n x k

  Matrix d_norm(k, n);
  for (Eigen::Index t = 0; t < n; ++t) {
    d_norm.col(t) = cfg.temperature *
                    softmax_backward(tr.alpha.row(t).transpose(), d_alpha.row(t).transpose());
  }

  Matrix d_clip = Matrix::Zero(k, n);
  if (cfg.normalize_over_regions) {
    for (Eigen::Index t = 0; t < n; ++t) {
      const double nrm = tr.norms(0, t);
      if (nrm <= 0) continue;
      const double den = nrm + kNormEpsilon;
      const double proj = d_norm.col(t).dot(tr.clipped.col(t));
      d_clip.col(t) = d_norm.col(t) / den - tr.clipped.col(t) * (proj / (nrm * den * den));
    }
  } else {
    for (Eigen::Index i = 0; i < k; ++i) {
      const double nrm = tr.norms(i, 0);
      if (nrm <= 0) continue;
      const double den = nrm + kNormEpsilon;
      const double proj = d_norm.row(i).dot(tr.clipped.row(i));
      d_clip.row(i) = d_norm.row(i) / den - tr.clipped.row(i) * (proj / (nrm * den * den));
    }
  }
  const Matrix d_sim = (d_clip.array() * (tr.sim.array() > 0).cast<double>()).matrix();

  // s = dots / (|v||e| + eps)
  const Vector nv = regions.rowwise().norm();
  const Vector ne = words.rowwise().norm();
  const Matrix over = (d_sim.array() / tr.denom.array()).matrix();
  const Matrix common =
      (d_sim.array() * tr.dots.array() / tr.denom.array().square()).matrix();
  d_regions.noalias() += over * words;
  d_words.noalias() += over.transpose() * regions;
  for (Eigen::Index i = 0; i < k; ++i) {
    if (nv[i] > 0) d_regions.row(i) -= (common.row(i).dot(ne) / nv[i]) * regions.row(i);
  }
  for (Eigen::Index t = 0; t < n; ++t) {
    if (ne[t] > 0) d_words.row(t) -= (common.col(t).dot(nv) / ne[t]) * words.row(t);
  }
}

double matching_score(const Matrix& features, std::span<const int> tokens,
                      const std::vector<bool>& noun_mask, const MatcherParams& params,
                      const MatcherConfig& cfg) {
  const Matrix regions = encode_regions(features, params);
  const Matrix words = encode_words(tokens, params);
  return score_pair(regions, words, cfg.noun_masked ? &noun_mask : nullptr, cfg).score;
}

AttentionMatrix matcher_attention(const SceneRecord& scene, const CaptionRecord& caption,
                                  const MatcherParams& params, const MatcherConfig& cfg) {
  const Matrix regions = encode_regions(scene.features, params);
  const Matrix words = encode_words(caption.tokens, params);
  const Matrix normalized =
      normalize_similarities(similarity_matrix(regions, words), cfg.normalize_over_regions);
  return attend_regions(normalized, regions, cfg.temperature).alpha;
}

namespace {

struct EncodedBatch {
  std::vector<Matrix> regions;
  std::vector<Matrix> words;
  WordEncoderTrace trace;
};

EncodedBatch encode_batch(const MatcherBatch& batch, const MatcherParams& params,
                          bool keep_trace) {
  EncodedBatch enc;
  for (const Matrix* f : batch.features) enc.regions.push_back(encode_regions(*f, params));
  enc.words = encode_words_batch(batch.tokens, params, keep_trace ? &enc.trace : nullptr);
  return enc;
}

Matrix all_scores(const EncodedBatch& enc, const MatcherBatch& batch, const MatcherConfig& cfg) {
  const auto images = static_cast<Eigen::Index>(enc.regions.size());
  const auto caps = static_cast<Eigen::Index>(enc.words.size());
  Matrix scores(images, caps);
  for (Eigen::Index p = 0; p < images; ++p) {
    for (Eigen::Index c = 0; c < caps; ++c) {
      const std::vector<bool>* mask =
          cfg.noun_masked ? batch.noun_masks[static_cast<size_t>(c)] : nullptr;
      scores(p, c) = score_pair(enc.regions[static_cast<size_t>(p)],
                                enc.words[static_cast<size_t>(c)], mask, cfg)
                         .score;
    }
  }
  return scores;
}

}  // namespace

Matrix score_matrix(const MatcherBatch& batch, const MatcherParams& params,
                    const MatcherConfig& cfg) {
  return all_scores(encode_batch(batch, params, false), batch, cfg);
}

MatcherLoss matcher_batch_loss(const MatcherBatch& batch, const MatcherParams& params,
                               const MatcherConfig& cfg, bool with_grad) {
  if (batch.features.size() != batch.tokens.size()) {
    throw std::invalid_argument("matcher batch needs one caption per image");
  }
  EncodedBatch enc = encode_batch(batch, params, with_grad);
  MatcherLoss out;
  out.scores = all_scores(enc, batch, cfg);
  const TripletLoss triplet = triplet_loss_hard(out.scores, cfg.margin);
  out.loss = triplet.loss;
  if (!with_grad) return out;

  out.grad = zeros_like(params);
  std::vector<Matrix> d_regions, d_words;
  for (const auto& r : enc.regions) d_regions.push_back(Matrix::Zero(r.rows(), r.cols()));
  for (const auto& w : enc.words) d_words.push_back(Matrix::Zero(w.rows(), w.cols()));
  for (Eigen::Index p = 0; p < triplet.grad.rows(); ++p) {
    for (Eigen::Index c = 0; c < triplet.grad.cols(); ++c) {
      const double g = triplet.grad(p, c);
      if (g == 0.0) continue;
      const auto up = static_cast<size_t>(p);
      const auto uc = static_cast<size_t>(c);
      const std::vector<bool>* mask = cfg.noun_masked ? batch.noun_masks[uc] : nullptr;
      const PairTrace tr = score_pair(enc.regions[up], enc.words[uc], mask, cfg);
      score_pair_backward(tr, enc.regions[up], enc.words[uc], g, cfg, d_regions[up], d_words[uc]);
    }
  }
  for (size_t p = 0; p < d_regions.size(); ++p) {
    out.grad.region_weight.noalias() += d_regions[p].transpose() * *batch.features[p];
    out.grad.region_bias.col(0) += d_regions[p].colwise().sum().transpose();
  }
  encode_words_backward(enc.trace, d_words, params, out.grad);
  return out;
}

RecallAtK retrieval_recall(const Matrix& scores, int k) {
  RecallAtK r;
  const Eigen::Index n = scores.rows();
  if (n == 0) return r;
  for (Eigen::Index i = 0; i < n; ++i) {
    int better_caps = 0, better_imgs = 0;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      if (scores(i, j) > scores(i, i)) ++better_caps;
      if (scores(j, i) > scores(i, i)) ++better_imgs;
    }
    if (better_caps < k) r.image_to_text += 1;
    if (better_imgs < k) r.text_to_image += 1;
  }
  r.image_to_text /= static_cast<double>(n);
  r.text_to_image /= static_cast<double>(n);
  return r;
}

}  // namespace groundcap
