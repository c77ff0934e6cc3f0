#ifndef GROUNDCAP_LINALG_HPP_
#define GROUNDCAP_LINALG_HPP_

#include <random>
#include <span>

#include <Eigen/Dense>

namespace groundcap {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Rng = std::mt19937_64;

// Guard used wherever a norm appears in a denominator.
inline constexpr double kNormEpsilon = 1e-8;

// Shape-aware exact equality (Eigen's operator== requires equal shapes).
inline bool same_matrix(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         (a.size() == 0 || (a.array() == b.array()).all());
}

double sigmoid(double x);

// Numerically stable softmax / log-softmax of a vector (max subtraction).
Vector softmax(const Eigen::Ref<const Vector>& logits);
Vector log_softmax(const Eigen::Ref<const Vector>& logits);

// Backward of y = softmax(x): returns dx given y and dy.
Vector softmax_backward(const Eigen::Ref<const Vector>& y,
                        const Eigen::Ref<const Vector>& dy);

// Index of the largest entry; ties resolve to the lowest index.
int argmax(const Eigen::Ref<const Vector>& v);

// cos(a, b) = a.b / (|a||b| + eps).
double cosine(const Eigen::Ref<const Vector>& a,
              const Eigen::Ref<const Vector>& b);
// Accumulates d cos / da * g into da and d cos / db * g into db.
void cosine_backward(const Eigen::Ref<const Vector>& a,
                     const Eigen::Ref<const Vector>& b, double g,
                     Eigen::Ref<Vector> da, Eigen::Ref<Vector> db);

// Fills m with N(0, scale^2) entries.
void fill_normal(Matrix& m, double scale, Rng& rng);
// Fills m with U(-bound, bound) entries.
void fill_uniform(Matrix& m, double bound, Rng& rng);

// Batched LSTM cell; every column of X/H/C is one sequence.
// Gate layout along the rows of W/U/b: input, forget, candidate, output.
struct LstmCache {
  Matrix x, h_prev, c_prev;
  Matrix i, f, g, o, c, tanh_c;
};

void lstm_forward(const Matrix& W, const Matrix& U, const Matrix& b,
                  const Matrix& x, const Matrix& h_prev, const Matrix& c_prev,
                  LstmCache& cache, Matrix& h, Matrix& c);

// dh/dc are gradients w.r.t. the cell outputs; dc_prev/dh_prev/dx receive
// the propagated gradients (overwritten), dW/dU/db accumulate.
void lstm_backward(const LstmCache& cache, const Matrix& W, const Matrix& U,
                   const Matrix& dh, const Matrix& dc, Matrix& dW, Matrix& dU,
                   Matrix& db, Matrix& dx, Matrix& dh_prev, Matrix& dc_prev);

// Batched GRU cell, rows of W/U/b laid out as update, reset, candidate:
//   z = s(Wz x + Uz h + bz), r = s(Wr x + Ur h + br)
//   n = tanh(Wn x + Un (r * h) + bn), h' = (1 - z) * h + z * n
// Columns with active[b] == false carry h through unchanged.
struct GruCache {
  Matrix x, h_prev;
  Matrix z, r, n;
  std::vector<bool> active;
};

void gru_forward(const Matrix& W, const Matrix& U, const Matrix& b,
                 const Matrix& x, const Matrix& h_prev,
                 const std::vector<bool>& active, GruCache& cache, Matrix& h);

void gru_backward(const GruCache& cache, const Matrix& W, const Matrix& U,
                  const Matrix& dh, Matrix& dW, Matrix& dU, Matrix& db,
                  Matrix& dx, Matrix& dh_prev);

}  // namespace groundcap

#endif  // GROUNDCAP_LINALG_HPP_
