#include "groundcap/linalg.hpp"

#include <cmath>

namespace groundcap {

double sigmoid(double x) {
  if (x >= 0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Vector softmax(const Eigen::Ref<const Vector>& logits) {
  const double top = logits.maxCoeff();
  Vector out = (logits.array() - top).exp().matrix();
  out /= out.sum();
  return out;
}

Vector log_softmax(const Eigen::Ref<const Vector>& logits) {
  const double top = logits.maxCoeff();
  const double lse = top + std::log((logits.array() - top).exp().sum());
  return (logits.array() - lse).matrix();
}

Vector softmax_backward(const Eigen::Ref<const Vector>& y,
                        const Eigen::Ref<const Vector>& dy) {
  const double dot = y.dot(dy);
  return (y.array() * (dy.array() - dot)).matrix();
}

int argmax(const Eigen::Ref<const Vector>& v) {
  int best = 0;
  for (int i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

double cosine(const Eigen::Ref<const Vector>& a,
              const Eigen::Ref<const Vector>& b) {
  return a.dot(b) / (a.norm() * b.norm() + kNormEpsilon);
}

void cosine_backward(const Eigen::Ref<const Vector>& a,
                     const Eigen::Ref<const Vector>& b, double g,
                     Eigen::Ref<Vector> da, Eigen::Ref<Vector> db) {
  const double na = a.norm();
  const double nb = b.norm();
  const double denom = na * nb + kNormEpsilon;
  const double dot = a.dot(b);
  da += (g / denom) * b;
  db += (g / denom) * a;
  const double k = g * dot / (denom * denom);
  if (na > 0) da -= (k * nb / na) * a;
  if (nb > 0) db -= (k * na / nb) * b;
}

void fill_normal(Matrix& m, double scale, Rng& rng) {
  std::normal_distribution<double> dist(0.0, scale);
  for (Eigen::Index c = 0; c < m.cols(); ++c) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = dist(rng);
  }
}

void fill_uniform(Matrix& m, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (Eigen::Index c = 0; c < m.cols(); ++c) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = dist(rng);
  }
}

namespace {

Matrix sigmoid_of(const Matrix& a) {
  return a.unaryExpr([](double v) { return sigmoid(v); });
}

}  // namespace

void lstm_forward(const Matrix& W, const Matrix& U, const Matrix& b,
                  const Matrix& x, const Matrix& h_prev, const Matrix& c_prev,
                  LstmCache& cache, Matrix& h, Matrix& c) {
  const Eigen::Index hid = U.cols();
  Matrix gates = W * x + U * h_prev;
  gates.colwise() += b.col(0);
  cache.x = x;
  cache.h_prev = h_prev;
  cache.c_prev = c_prev;
  cache.i = sigmoid_of(gates.topRows(hid));
  cache.f = sigmoid_of(gates.middleRows(hid, hid));
  cache.g = gates.middleRows(2 * hid, hid).array().tanh().matrix();
  cache.o = sigmoid_of(gates.bottomRows(hid));
  cache.c = (cache.f.array() * c_prev.array() + cache.i.array() * cache.g.array())
                .matrix();
  cache.tanh_c = cache.c.array().tanh().matrix();
  c = cache.c;
  h = (cache.o.array() * cache.tanh_c.array()).matrix();
}

void lstm_backward(const LstmCache& cache, const Matrix& W, const Matrix& U,
                   const Matrix& dh, const Matrix& dc, Matrix& dW, Matrix& dU,
                   Matrix& db, Matrix& dx, Matrix& dh_prev, Matrix& dc_prev) {
  const Eigen::Index hid = U.cols();
  const Eigen::Index batch = dh.cols();
  const auto o = cache.o.array();
  const auto tc = cache.tanh_c.array();
  Eigen::ArrayXXd dcell = dc.array() + dh.array() * o * (1.0 - tc * tc);

  Matrix da(4 * hid, batch);
  const auto i = cache.i.array();
  const auto f = cache.f.array();
  const auto g = cache.g.array();
  da.topRows(hid) = (dcell * g * i * (1.0 - i)).matrix();
  da.middleRows(hid, hid) = (dcell * cache.c_prev.array() * f * (1.0 - f)).matrix();
  da.middleRows(2 * hid, hid) = (dcell * i * (1.0 - g * g)).matrix();
  da.bottomRows(hid) = (dh.array() * tc * o * (1.0 - o)).matrix();

  dW.noalias() += da * cache.x.transpose();
  dU.noalias() += da * cache.h_prev.transpose();
  db.col(0) += da.rowwise().sum();
  dx.noalias() = W.transpose() * da;
  dh_prev.noalias() = U.transpose() * da;
  dc_prev = (dcell * f).matrix();
}

void gru_forward(const Matrix& W, const Matrix& U, const Matrix& b,
                 const Matrix& x, const Matrix& h_prev,
                 const std::vector<bool>& active, GruCache& cache, Matrix& h) {
  const Eigen::Index hid = U.cols();
  Matrix wx = W * x;
  wx.colwise() += b.col(0);
  Matrix uh = U.topRows(2 * hid) * h_prev;
  cache.x = x;
  cache.h_prev = h_prev;
  cache.active = active;
  cache.z = sigmoid_of(wx.topRows(hid) + uh.topRows(hid));
  cache.r = sigmoid_of(wx.middleRows(hid, hid) + uh.bottomRows(hid));
  Matrix rh = (cache.r.array() * h_prev.array()).matrix();
  cache.n = (wx.bottomRows(hid) + U.bottomRows(hid) * rh).array().tanh().matrix();
  h = ((1.0 - cache.z.array()) * h_prev.array() +
       cache.z.array() * cache.n.array())
          .matrix();
  for (Eigen::Index col = 0; col < h.cols(); ++col) {
    if (!active[static_cast<size_t>(col)]) h.col(col) = h_prev.col(col);
  }
}

void gru_backward(const GruCache& cache, const Matrix& W, const Matrix& U,
                  const Matrix& dh, Matrix& dW, Matrix& dU, Matrix& db,
                  Matrix& dx, Matrix& dh_prev) {
  const Eigen::Index hid = U.cols();
  const Eigen::Index batch = dh.cols();
  Matrix dcell = dh;
  for (Eigen::Index col = 0; col < batch; ++col) {
    if (!cache.active[static_cast<size_t>(col)]) dcell.col(col).setZero();
  }
  const auto z = cache.z.array();
  const auto r = cache.r.array();
  const auto n = cache.n.array();
  const auto hp = cache.h_prev.array();

  Matrix da(3 * hid, batch);
  Matrix dan = (dcell.array() * z * (1.0 - n * n)).matrix();
  da.topRows(hid) = (dcell.array() * (n - hp) * z * (1.0 - z)).matrix();
  da.bottomRows(hid) = dan;
  Matrix drh = U.bottomRows(hid).transpose() * dan;
  da.middleRows(hid, hid) = (drh.array() * hp * r * (1.0 - r)).matrix();

  dW.noalias() += da * cache.x.transpose();
  db.col(0) += da.rowwise().sum();
  dU.topRows(2 * hid).noalias() += da.topRows(2 * hid) * cache.h_prev.transpose();
  Matrix rh = (r * hp).matrix();
  dU.bottomRows(hid).noalias() += dan * rh.transpose();
  dx.noalias() = W.transpose() * da;

  dh_prev = (dcell.array() * (1.0 - z)).matrix();
  dh_prev.noalias() += U.topRows(2 * hid).transpose() * da.topRows(2 * hid);
  dh_prev += (drh.array() * r).matrix();
  for (Eigen::Index col = 0; col < batch; ++col) {
    if (!cache.active[static_cast<size_t>(col)]) dh_prev.col(col) = dh.col(col);
  }
}

}  // namespace groundcap
