#include <doctest.h>

#include "groundcap/attention.hpp"
#include "groundcap/linalg.hpp"
#include "oracles.hpp"

using namespace groundcap;

TEST_CASE("softmax rows are stochastic and stable for large logits") {
  Vector x(4);
  x << 1000.0, 999.0, -5.0, 1000.0;
  const Vector p = softmax(x);
  CHECK(p.allFinite());
  CHECK(p.sum() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(p[0] == doctest::Approx(p[3]));
  const Vector lp = log_softmax(x);
  for (int i = 0; i < 4; ++i) CHECK(std::exp(lp[i]) == doctest::Approx(p[i]).epsilon(1e-12));
}

TEST_CASE("softmax backward matches finite differences") {
  Rng rng(5);
  Matrix xm(5, 1), dym(5, 1);
  fill_normal(xm, 1.0, rng);
  fill_normal(dym, 1.0, rng);
  const Vector x = xm.col(0), dy = dym.col(0);
  const Vector dx = softmax_backward(softmax(x), dy);
  for (int i = 0; i < 5; ++i) {
    Vector up = x, down = x;
    up[i] += 1e-6;
    down[i] -= 1e-6;
    const double fd = (softmax(up).dot(dy) - softmax(down).dot(dy)) / 2e-6;
    CHECK(dx[i] == doctest::Approx(fd).epsilon(1e-6));
  }
}

TEST_CASE("argmax ties resolve to the lowest index") {
  Vector v(4);
  v << 0.1, 0.4, 0.4, 0.1;
  CHECK(argmax(v) == 1);
}

TEST_CASE("cosine is guarded for zero vectors and matches the oracle") {
  Vector z = Vector::Zero(3), a(3), b(3);
  a << 1, 2, 3;
  b << -1, 0.5, 2;
  CHECK(cosine(z, a) == 0.0);
  CHECK(cosine(a, b) == doctest::Approx(oracle::cosine(a, b)).epsilon(1e-14));
  Vector da = Vector::Zero(3), db = Vector::Zero(3);
  cosine_backward(a, b, 1.0, da, db);
  for (int i = 0; i < 3; ++i) {
    Vector up = a, down = a;
    up[i] += 1e-6;
    down[i] -= 1e-6;
    CHECK(da[i] == doctest::Approx((cosine(up, b) - cosine(down, b)) / 2e-6).epsilon(1e-6));
  }
}

TEST_CASE("batched LSTM matches the scalar loop column by column") {
  Rng rng(11);
  const int in = 3, H = 4, B = 3;
  Matrix W(4 * H, in), U(4 * H, H), b(4 * H, 1), x(in, B), h0(H, B), c0(H, B);
  for (Matrix* m : {&W, &U, &b, &x, &h0, &c0}) fill_normal(*m, 0.7, rng);
  LstmCache cache;
  Matrix h, c;
  lstm_forward(W, U, b, x, h0, c0, cache, h, c);
  for (int col = 0; col < B; ++col) {
    Vector ho, co;
    oracle::lstm_step(W, U, b, x.col(col), h0.col(col), c0.col(col), ho, co);
    CHECK((h.col(col) - ho).norm() < 1e-12);
    CHECK((c.col(col) - co).norm() < 1e-12);
  }
}

TEST_CASE("batched GRU matches the scalar loop and carries inactive columns") {
  Rng rng(12);
  const int in = 3, H = 4, B = 3;
  Matrix W(3 * H, in), U(3 * H, H), b(3 * H, 1), x(in, B), h0(H, B);
  for (Matrix* m : {&W, &U, &b, &x, &h0}) fill_normal(*m, 0.7, rng);
  GruCache cache;
  Matrix h;
  gru_forward(W, U, b, x, h0, {true, false, true}, cache, h);
  CHECK((h.col(0) - oracle::gru_step(W, U, b, x.col(0), h0.col(0))).norm() < 1e-12);
  CHECK(same_matrix(h.col(1), h0.col(1)));
  CHECK((h.col(2) - oracle::gru_step(W, U, b, x.col(2), h0.col(2))).norm() < 1e-12);
}

namespace {

struct CellParams {
  Matrix W, U, b, x, h, c;
  std::vector<std::pair<const char*, Matrix*>> tensors() {
    return {{"W", &W}, {"U", &U}, {"b", &b}, {"x", &x}, {"h", &h}, {"c", &c}};
  }
  std::vector<std::pair<const char*, const Matrix*>> tensors() const {
    return {{"W", &W}, {"U", &U}, {"b", &b}, {"x", &x}, {"h", &h}, {"c", &c}};
  }
};

}  // namespace

TEST_CASE("LSTM backward matches finite differences") {
  Rng rng(13);
  const int in = 3, H = 2, B = 2;
  CellParams p{Matrix(4 * H, in), Matrix(4 * H, H), Matrix(4 * H, 1),
               Matrix(in, B),     Matrix(H, B),     Matrix(H, B)};
  for (auto& [n, m] : p.tensors()) fill_normal(*m, 0.8, rng);
  Matrix gh(H, B), gc(H, B);
  fill_normal(gh, 1.0, rng);
  fill_normal(gc, 1.0, rng);
  auto loss = [&] {
    LstmCache cache;
    Matrix h, c;
    lstm_forward(p.W, p.U, p.b, p.x, p.h, p.c, cache, h, c);
    return (h.array() * gh.array()).sum() + (c.array() * gc.array()).sum();
  };
  LstmCache cache;
  Matrix h, c;
  lstm_forward(p.W, p.U, p.b, p.x, p.h, p.c, cache, h, c);
  CellParams g{Matrix::Zero(4 * H, in), Matrix::Zero(4 * H, H), Matrix::Zero(4 * H, 1),
               Matrix(), Matrix(), Matrix()};
  lstm_backward(cache, p.W, p.U, gh, gc, g.W, g.U, g.b, g.x, g.h, g.c);
  CHECK(oracle::gradient_error(p, g, loss) < 1e-6);
}

TEST_CASE("GRU backward matches finite differences") {
  Rng rng(14);
  const int in = 3, H = 2, B = 2;
  CellParams p{Matrix(3 * H, in), Matrix(3 * H, H), Matrix(3 * H, 1),
               Matrix(in, B),     Matrix(H, B),     Matrix::Zero(1, 1)};
  for (auto& [n, m] : p.tensors()) fill_normal(*m, 0.8, rng);
  Matrix gh(H, B);
  fill_normal(gh, 1.0, rng);
  const std::vector<bool> active = {true, true};
  auto loss = [&] {
    GruCache cache;
    Matrix h;
    gru_forward(p.W, p.U, p.b, p.x, p.h, active, cache, h);
    return (h.array() * gh.array()).sum();
  };
  GruCache cache;
  Matrix h;
  gru_forward(p.W, p.U, p.b, p.x, p.h, active, cache, h);
  CellParams g{Matrix::Zero(3 * H, in), Matrix::Zero(3 * H, H), Matrix::Zero(3 * H, 1),
               Matrix(), Matrix(), Matrix::Zero(1, 1)};
  gru_backward(cache, p.W, p.U, gh, g.W, g.U, g.b, g.x, g.h);
  CHECK(oracle::gradient_error(p, g, loss) < 1e-6);
}

TEST_CASE("attention matrices report stochasticity") {
  AttentionMatrix a;
  a.weights = Matrix(2, 3);
  a.weights << 0.2, 0.3, 0.5, 1.0, 0.0, 0.0;
  CHECK(a.is_stochastic());
  CHECK(a.argmax(0) == 2);
  a.weights(1, 1) = 0.1;
  CHECK_FALSE(a.is_stochastic());
}
