#ifndef GROUNDCAP_TESTS_ORACLES_HPP_
#define GROUNDCAP_TESTS_ORACLES_HPP_

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "groundcap/captioner.hpp"
#include "groundcap/datagen.hpp"
#include "groundcap/linalg.hpp"
#include "groundcap/matcher.hpp"

namespace oracle {

using groundcap::Matrix;
using groundcap::Vector;

// Worst per-tensor relative error ||g - g_fd|| / (||g|| + ||g_fd||) between an
// analytic gradient and central differences of `loss`.
template <class P, class F>
double gradient_error(P& params, const P& grad, F loss, double h = 1e-5,
                      std::string* worst_name = nullptr) {
  double worst = 0;
  auto ts = params.tensors();
  auto gs = grad.tensors();
  for (size_t k = 0; k < ts.size(); ++k) {
    Matrix& m = *ts[k].second;
    Matrix numeric(m.rows(), m.cols());
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const double orig = m.data()[i];
      m.data()[i] = orig + h;
      const double up = loss();
      m.data()[i] = orig - h;
      const double down = loss();
      m.data()[i] = orig;
      numeric.data()[i] = (up - down) / (2 * h);
    }
    const Matrix& analytic = *gs[k].second;
    const double denom = analytic.norm() + numeric.norm();
    const double err = denom < 1e-10 ? 0.0 : (analytic - numeric).norm() / denom;
    if (err > worst) {
      worst = err;
      if (worst_name) *worst_name = ts[k].first;
    }
  }
  return worst;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Scalar-loop GRU step for a single column.
inline Vector gru_step(const Matrix& W, const Matrix& U, const Matrix& b, const Vector& x,
                       const Vector& h) {
  const auto H = h.size();
  auto pre = [&](Eigen::Index row, const Vector& hh) {
    double a = b(row, 0);
    for (Eigen::Index q = 0; q < x.size(); ++q) a += W(row, q) * x[q];
    for (Eigen::Index q = 0; q < H; ++q) a += U(row, q) * hh[q];
    return a;
  };
  Vector r(H), out(H);
  for (Eigen::Index j = 0; j < H; ++j) r[j] = sigmoid(pre(H + j, h));
  const Vector rh = r.cwiseProduct(h);
  for (Eigen::Index j = 0; j < H; ++j) {
    const double z = sigmoid(pre(j, h));
    double an = b(2 * H + j, 0);
    for (Eigen::Index q = 0; q < x.size(); ++q) an += W(2 * H + j, q) * x[q];
    for (Eigen::Index q = 0; q < H; ++q) an += U(2 * H + j, q) * rh[q];
    out[j] = (1 - z) * h[j] + z * std::tanh(an);
  }
  return out;
}

// Scalar-loop LSTM step; gates ordered input, forget, candidate, output.
inline void lstm_step(const Matrix& W, const Matrix& U, const Matrix& b, const Vector& x,
                      const Vector& h, const Vector& c, Vector& h_out, Vector& c_out) {
  const auto H = h.size();
  h_out.resize(H);
  c_out.resize(H);
  auto pre = [&](Eigen::Index row) {
    double a = b(row, 0);
    for (Eigen::Index q = 0; q < x.size(); ++q) a += W(row, q) * x[q];
    for (Eigen::Index q = 0; q < H; ++q) a += U(row, q) * h[q];
    return a;
  };
  for (Eigen::Index j = 0; j < H; ++j) {
    const double i = sigmoid(pre(j));
    const double f = sigmoid(pre(H + j));
    const double g = std::tanh(pre(2 * H + j));
    const double o = sigmoid(pre(3 * H + j));
    c_out[j] = f * c[j] + i * g;
    h_out[j] = o * std::tanh(c_out[j]);
  }
}

// Bidirectional word encoder from scalar loops: (forward + backward) / 2.
inline Matrix encode_words(const std::vector<int>& tokens, const groundcap::MatcherParams& p) {
  const auto n = static_cast<Eigen::Index>(tokens.size());
  const auto H = p.fwd_U.cols();
  Matrix fwd(n, H), bwd(n, H);
  Vector h = Vector::Zero(H);
  for (Eigen::Index t = 0; t < n; ++t) {
    h = gru_step(p.fwd_W, p.fwd_U, p.fwd_b, p.word_embedding.row(tokens[t]).transpose(), h);
    fwd.row(t) = h.transpose();
  }
  h = Vector::Zero(H);
  for (Eigen::Index t = n - 1; t >= 0; --t) {
    h = gru_step(p.bwd_W, p.bwd_U, p.bwd_b, p.word_embedding.row(tokens[t]).transpose(), h);
    bwd.row(t) = h.transpose();
  }
  return (fwd + bwd) / 2.0;
}

inline double cosine(const Vector& a, const Vector& b) {
  double dot = 0, na = 0, nb = 0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / (std::sqrt(na) * std::sqrt(nb) + groundcap::kNormEpsilon);
}

// Matching score from scalar loops: clip, normalize over words per region,
// softmax(temperature * s) over regions, mean (or noun-masked mean) cosine.
inline double matching_score(const Matrix& regions, const Matrix& words,
                             const std::vector<bool>* mask, double temperature,
                             Matrix* alpha_out = nullptr) {
  const auto k = regions.rows();
  const auto n = words.rows();
  Matrix s(k, n);
  for (Eigen::Index i = 0; i < k; ++i) {
    for (Eigen::Index t = 0; t < n; ++t) {
      s(i, t) = std::max(0.0, cosine(regions.row(i).transpose(), words.row(t).transpose()));
    }
  }
  for (Eigen::Index i = 0; i < k; ++i) {
    double norm = 0;
    for (Eigen::Index t = 0; t < n; ++t) norm += s(i, t) * s(i, t);
    norm = std::sqrt(norm);
    for (Eigen::Index t = 0; t < n; ++t) s(i, t) /= norm + groundcap::kNormEpsilon;
  }
  Matrix alpha(n, k);
  double total = 0;
  int count = 0;
  for (Eigen::Index t = 0; t < n; ++t) {
    double mx = -1e300;
    for (Eigen::Index i = 0; i < k; ++i) mx = std::max(mx, temperature * s(i, t));
    double z = 0;
    for (Eigen::Index i = 0; i < k; ++i) z += std::exp(temperature * s(i, t) - mx);
    Vector a = Vector::Zero(regions.cols());
    for (Eigen::Index i = 0; i < k; ++i) {
      alpha(t, i) = std::exp(temperature * s(i, t) - mx) / z;
      a += alpha(t, i) * regions.row(i).transpose();
    }
    if (!mask || (*mask)[static_cast<size_t>(t)]) {
      total += cosine(words.row(t).transpose(), a);
      ++count;
    }
  }
  if (alpha_out) *alpha_out = alpha;
  return total / count;
}

// Exhaustive search over every negative of every anchor; the hardest
// negative is the first one reaching the largest hinge argument.
struct Triplet {
  double loss = 0;
  std::vector<int> hardest_caption, hardest_image;
};

inline Triplet triplet_loss(const Matrix& scores, double margin) {
  const auto B = scores.rows();
  Triplet out;
  for (Eigen::Index p = 0; p < B; ++p) {
    int best_c = -1, best_i = -1;
    double arg_c = -1e300, arg_i = -1e300;
    for (Eigen::Index q = 0; q < B; ++q) {
      if (q == p) continue;
      const double hc = margin - scores(p, p) + scores(p, q);
      const double hi = margin - scores(p, p) + scores(q, p);
      if (hc > arg_c) {
        arg_c = hc;
        best_c = static_cast<int>(q);
      }
      if (hi > arg_i) {
        arg_i = hi;
        best_i = static_cast<int>(q);
      }
    }
    out.hardest_caption.push_back(best_c);
    out.hardest_image.push_back(best_i);
    if (arg_c > 0) out.loss += arg_c / static_cast<double>(B);
    if (arg_i > 0) out.loss += arg_i / static_cast<double>(B);
  }
  return out;
}

// ---------------------------------------------------------------- n-grams

using Seq = std::vector<int>;
using Counts = std::map<Seq, double>;

inline Counts ngram_counts(const Seq& s, int n) {
  Counts c;
  for (size_t i = 0; i + static_cast<size_t>(n) <= s.size(); ++i) {
    c[Seq(s.begin() + static_cast<long>(i), s.begin() + static_cast<long>(i) + n)] += 1;
  }
  return c;
}

// CIDEr-D straight from the definition: df over the reference sets of the
// corpus, clipped tf-idf cosine, Gaussian length penalty, x10.
inline double cider_d(const Seq& cand, const std::vector<Seq>& refs,
                      const std::vector<std::vector<Seq>>& corpus, double sigma = 6.0) {
  const double log_n = std::log(static_cast<double>(corpus.size()));
  auto df = [&](const Seq& g) {
    double d = 0;
    for (const auto& set : corpus) {
      bool found = false;
      for (const auto& r : set) {
        if (ngram_counts(r, static_cast<int>(g.size())).count(g)) found = true;
      }
      d += found ? 1 : 0;
    }
    return d;
  };
  double score = 0;
  for (int n = 1; n <= 4; ++n) {
    const Counts cc = ngram_counts(cand, n);
    double per_n = 0;
    for (const auto& r : refs) {
      const Counts rc = ngram_counts(r, n);
      std::map<Seq, double> vc, vr;
      for (const auto& [g, tf] : cc) vc[g] = tf * (log_n - std::log(std::max(1.0, df(g))));
      for (const auto& [g, tf] : rc) vr[g] = tf * (log_n - std::log(std::max(1.0, df(g))));
      double dot = 0, nc = 0, nr = 0;
      for (const auto& [g, w] : vc) {
        nc += w * w;
        if (vr.count(g)) dot += std::min(w, vr[g]) * vr[g];
      }
      for (const auto& [g, w] : vr) nr += w * w;
      double val = 0;
      if (nc != 0 && nr != 0) val = dot / (std::sqrt(nc) * std::sqrt(nr));
      const double delta = static_cast<double>(cand.size()) - static_cast<double>(r.size());
      per_n += val * std::exp(-delta * delta / (2 * sigma * sigma));
    }
    score += per_n / static_cast<double>(refs.size());
  }
  return score / 4.0 * 10.0;
}

// Corpus BLEU-N with clipped counts and closest-reference brevity penalty.
inline double bleu(const std::vector<Seq>& cands, const std::vector<std::vector<Seq>>& refs,
                   int N) {
  double log_p = 0;
  double c_len = 0, r_len = 0;
  for (int n = 1; n <= N; ++n) {
    double match = 0, total = 0;
    for (size_t i = 0; i < cands.size(); ++i) {
      const Counts cc = ngram_counts(cands[i], n);
      for (const auto& [g, cnt] : cc) {
        double best = 0;
        for (const auto& r : refs[i]) {
          const Counts rc = ngram_counts(r, n);
          auto it = rc.find(g);
          if (it != rc.end()) best = std::max(best, it->second);
        }
        match += std::min(cnt, best);
        total += cnt;
      }
    }
    if (match == 0 || total == 0) return 0.0;
    log_p += std::log(match / total) / N;
  }
  for (size_t i = 0; i < cands.size(); ++i) {
    const double c = static_cast<double>(cands[i].size());
    double best = 1e300, best_len = 0;
    for (const auto& r : refs[i]) {
      const double d = std::abs(static_cast<double>(r.size()) - c);
      if (d < best || (d == best && static_cast<double>(r.size()) < best_len)) {
        best = d;
        best_len = static_cast<double>(r.size());
      }
    }
    c_len += c;
    r_len += best_len;
  }
  const double bp = c_len > r_len ? 1.0 : std::exp(1.0 - r_len / c_len);
  return bp * std::exp(log_p);
}

}  // namespace oracle

#endif  // GROUNDCAP_TESTS_ORACLES_HPP_
