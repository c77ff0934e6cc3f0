#ifndef GROUNDCAP_CIDER_HPP_
#define GROUNDCAP_CIDER_HPP_

#include <array>
#include <cstdint>
#include <map>
#include <vector>

namespace groundcap {

using TokenSeq = std::vector<int>;

// CIDEr-D: clipped TF-IDF n-gram cosine (n = 1..4) with a Gaussian length
// penalty, averaged over n and references and scaled by 10. Document
// frequencies come from the reference sets handed to the constructor (one
// set per image) and stay fixed afterwards.
class CiderD {
 public:
  static constexpr int kMaxN = 4;

  explicit CiderD(const std::vector<std::vector<TokenSeq>>& corpus_refs,
                  double sigma = 6.0);

  struct Vec {
    std::array<std::map<std::uint64_t, double>, kMaxN> weights;
    std::array<double, kMaxN> norms{};
    int length = 0;
  };
  struct Prepared {
    std::vector<Vec> refs;
  };

  Prepared prepare(const std::vector<TokenSeq>& refs) const;
  double score(const TokenSeq& candidate, const Prepared& refs) const;
  double score(const TokenSeq& candidate, const std::vector<TokenSeq>& refs) const;

  double log_corpus_size() const { return log_n_; }
  int corpus_size() const { return corpus_size_; }
  // df of an n-gram given as tokens (0 when unseen).
  double document_frequency(const TokenSeq& ngram) const;

 private:
  Vec vectorize(const TokenSeq& tokens) const;

  std::map<std::uint64_t, double> df_;
  double log_n_ = 0;
  int corpus_size_ = 0;
  double sigma_;
};

double cider_score(const TokenSeq& candidate, const std::vector<TokenSeq>& refs,
                   const CiderD& context);

}  // namespace groundcap

#endif  // GROUNDCAP_CIDER_HPP_
