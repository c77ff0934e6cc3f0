#ifndef GROUNDCAP_ATTENTION_HPP_
#define GROUNDCAP_ATTENTION_HPP_

#include "groundcap/linalg.hpp"

namespace groundcap {

enum class AttentionRole { kMatcher, kCaptioner };

// Word-over-region attention: row t is a distribution over the k regions.
struct AttentionMatrix {
  Matrix weights;  // n x k
  AttentionRole role = AttentionRole::kMatcher;

  int rows() const { return static_cast<int>(weights.rows()); }
  int regions() const { return static_cast<int>(weights.cols()); }
  int argmax(int row) const { return groundcap::argmax(weights.row(row).transpose()); }
  bool is_stochastic(double tol = 1e-6) const;
};

const char* role_name(AttentionRole role);

}  // namespace groundcap

#endif  // GROUNDCAP_ATTENTION_HPP_
