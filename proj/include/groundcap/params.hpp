#ifndef GROUNDCAP_PARAMS_HPP_
#define GROUNDCAP_PARAMS_HPP_

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "groundcap/linalg.hpp"

namespace groundcap {

// Parameter records expose their tensors as an ordered list of named
// matrices (biases are single-column matrices) through tensors().

template <class P>
P zeros_like(const P& p) {
  P out = p;
  for (auto& [name, m] : out.tensors()) m->setZero();
  return out;
}

template <class P>
void add_scaled(P& dst, const P& src, double scale) {
  auto d = dst.tensors();
  auto s = src.tensors();
  for (size_t i = 0; i < d.size(); ++i) *d[i].second += scale * *s[i].second;
}

template <class P>
double squared_norm(const P& p) {
  double total = 0;
  for (const auto& [name, m] : p.tensors()) total += m->squaredNorm();
  return total;
}

template <class P>
bool all_finite(const P& p) {
  for (const auto& [name, m] : p.tensors()) {
    if (!m->allFinite()) return false;
  }
  return true;
}

template <class P>
bool same_params(const P& a, const P& b) {
  auto ta = a.tensors();
  auto tb = b.tensors();
  if (ta.size() != tb.size()) return false;
  for (size_t i = 0; i < ta.size(); ++i) {
    if (!same_matrix(*ta[i].second, *tb[i].second)) return false;
  }
  return true;
}

// Rescales g in place so that its global L2 norm is at most max_norm.
// Returns the norm before clipping.
template <class P>
double clip_global_norm(P& g, double max_norm) {
  const double norm = std::sqrt(squared_norm(g));
  if (norm > max_norm && norm > 0) {
    for (auto& [name, m] : g.tensors()) *m *= max_norm / norm;
  }
  return norm;
}

}  // namespace groundcap

#endif  // GROUNDCAP_PARAMS_HPP_
