#include "groundcap/cider.hpp"

#include <cmath>
#include <set>
#include <stdexcept>

namespace groundcap {

namespace {

constexpr int kTokenBits = 15;

std::uint64_t ngram_key(const TokenSeq& tokens, size_t start, int n) {
  std::uint64_t key = static_cast<std::uint64_t>(n) << (4 * kTokenBits);
  for (int j = 0; j < n; ++j) {
    const int t = tokens[start + static_cast<size_t>(j)];
    if (t < 0 || t >= (1 << kTokenBits)) throw std::out_of_range("token id too large for n-gram key");
    key |= static_cast<std::uint64_t>(t) << (kTokenBits * (3 - j));
  }
  return key;
}

std::array<std::map<std::uint64_t, int>, CiderD::kMaxN> ngram_counts(const TokenSeq& tokens) {
  std::array<std::map<std::uint64_t, int>, CiderD::kMaxN> counts;
  for (int n = 1; n <= CiderD::kMaxN; ++n) {
    for (size_t i = 0; i + static_cast<size_t>(n) <= tokens.size(); ++i) {
      ++counts[static_cast<size_t>(n - 1)][ngram_key(tokens, i, n)];
    }
  }
  return counts;
}

}  // namespace

CiderD::CiderD(const std::vector<std::vector<TokenSeq>>& corpus_refs, double sigma)
    : sigma_(sigma) {
  corpus_size_ = static_cast<int>(corpus_refs.size());
  log_n_ = corpus_size_ > 0 ? std::log(static_cast<double>(corpus_size_)) : 0.0;
  for (const auto& refs : corpus_refs) {
    std::set<std::uint64_t> present;
    for (const auto& ref : refs) {
      for (const auto& per_n : ngram_counts(ref)) {
        for (const auto& [key, count] : per_n) present.insert(key);
      }
    }
    for (auto key : present) df_[key] += 1.0;
  }
}

double CiderD::document_frequency(const TokenSeq& ngram) const {
  if (ngram.empty() || ngram.size() > kMaxN) return 0.0;
  auto it = df_.find(ngram_key(ngram, 0, static_cast<int>(ngram.size())));
  return it == df_.end() ? 0.0 : it->second;
}

CiderD::Vec CiderD::vectorize(const TokenSeq& tokens) const {
  Vec vec;
  vec.length = static_cast<int>(tokens.size());
  const auto counts = ngram_counts(tokens);
  for (int n = 0; n < kMaxN; ++n) {
    for (const auto& [key, tf] : counts[static_cast<size_t>(n)]) {
      auto it = df_.find(key);
      const double df = std::log(std::max(1.0, it == df_.end() ? 0.0 : it->second));
      const double w = static_cast<double>(tf) * (log_n_ - df);
      vec.weights[static_cast<size_t>(n)][key] = w;
      vec.norms[static_cast<size_t>(n)] += w * w;
    }
    vec.norms[static_cast<size_t>(n)] = std::sqrt(vec.norms[static_cast<size_t>(n)]);
  }
  return vec;
}

CiderD::Prepared CiderD::prepare(const std::vector<TokenSeq>& refs) const {
  Prepared p;
  for (const auto& r : refs) p.refs.push_back(vectorize(r));
  return p;
}

double CiderD::score(const TokenSeq& candidate, const Prepared& refs) const {
  if (candidate.empty() || refs.refs.empty()) return 0.0;
  const Vec hyp = vectorize(candidate);
  std::array<double, kMaxN> total{};
  for (const auto& ref : refs.refs) {
    const double delta = static_cast<double>(hyp.length - ref.length);
    const double penalty = std::exp(-(delta * delta) / (2.0 * sigma_ * sigma_));
    for (size_t n = 0; n < kMaxN; ++n) {
      double val = 0.0;
      for (const auto& [key, w] : hyp.weights[n]) {
        auto it = ref.weights[n].find(key);
        if (it != ref.weights[n].end()) val += std::min(w, it->second) * it->second;
      }
      if (hyp.norms[n] != 0.0 && ref.norms[n] != 0.0) val /= hyp.norms[n] * ref.norms[n];
      total[n] += val * penalty;
    }
  }
  double mean = 0.0;
  for (double t : total) mean += t;
  mean /= kMaxN;
  return 10.0 * mean / static_cast<double>(refs.refs.size());
}

double CiderD::score(const TokenSeq& candidate, const std::vector<TokenSeq>& refs) const {
  return score(candidate, prepare(refs));
}

double cider_score(const TokenSeq& candidate, const std::vector<TokenSeq>& refs,
                   const CiderD& context) {
  return context.score(candidate, refs);
}

}  // namespace groundcap
