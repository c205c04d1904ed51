#include <doctest.h>

#include <Eigen/Eigenvalues>
#include <Eigen/LU>

#include <cmath>
#include <random>

#include "mecq/errors.hpp"
#include "mecq/tensor.hpp"
#include "mecq/mec.hpp"
#include "support/gradcheck.hpp"

using namespace mecq;
using namespace mecq::mec;

namespace {

Matrix randn(Index r, Index c, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m(i) = g(rng);
  return m;
}

// mu * log det(I + X) through an LU factorization.
double lu_length(const Matrix& z, const CodingContext& ctx) {
  const Matrix x = ctx.gram_scale * z.transpose() * z;
  return ctx.mu * std::log((Matrix::Identity(ctx.m, ctx.m) + x).partialPivLu().determinant());
}

// Eigenvalues of X to build series oracles without poly_trace.
Vector gram_spectrum(const Matrix& z, const CodingContext& ctx) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(ctx.gram_scale * z.transpose() * z);
  return es.eigenvalues();
}

double series_oracle(const Vector& ev, double mu, double a, int k) {
  double acc = 0.0;
  for (Index i = 0; i < ev.size(); ++i) {
    acc += std::log1p(a);
    for (int j = 1; j <= k; ++j)
      acc += std::pow(-1.0, j + 1) * std::pow(ev(i) - a, j) / (j * std::pow(1.0 + a, j));
  }
  return mu * acc;
}

MecConfig fixed_eps(double eps_sq) {
  MecConfig c;
  c.eps_sq = eps_sq;
  c.normalize_columns = false;
  return c;
}

}  // namespace

TEST_CASE("prepare_features normalizes columns and resolves eps") {
  Matrix z(2, 2);
  z << 3.0, 0.0, 4.0, 0.0;
  MecConfig cfg;
  cfg.eps_sq = 1.0;
  const auto p = prepare_features(z, cfg);
  CHECK(p.z(0, 0) == doctest::Approx(0.6));
  CHECK(p.z(1, 0) == doctest::Approx(0.8));
  CHECK(p.z(0, 1) == 0.0);
  CHECK(p.z.allFinite());

  std::mt19937_64 rng(1);
  const auto a = prepare_features(randn(6, 9, rng), MecConfig{});
  CHECK((a.ctx.gram_scale * a.z.transpose() * a.z).trace() == doctest::Approx(9.0).epsilon(1e-9));
  CHECK_THROWS_AS(prepare_features(Matrix::Zero(3, 4), MecConfig{}), DegenerateError);
}

TEST_CASE("context constants") {
  const CodingContext c = make_context(8, 4, 2.0);
  CHECK(c.mu == 6.0);
  CHECK(c.gram_scale == 1.0);
}

TEST_CASE("exact coding length") {
  CHECK(coding_length_exact(Matrix::Zero(3, 4), make_context(3, 4, 1.0)) == 0.0);
  // Z^T Z = I_4, m=4, d=8, lambda_g = 1
  Matrix z = Matrix::Identity(8, 4);
  const double l = coding_length_exact(z, make_context(8, 4, 2.0));
  CHECK(l == doctest::Approx(6.0 * 4.0 * std::log(2.0)).epsilon(1e-12));
  CHECK(l == doctest::Approx(16.6355).epsilon(1e-5));

  std::mt19937_64 rng(2);
  for (auto [d, m] : {std::pair<Index, Index>{8, 4}, {4, 8}, {5, 5}}) {
    const Matrix r = randn(d, m, rng);
    const auto ctx = make_context(d, m, 3.0);
    CHECK(std::abs(coding_length_exact(r, ctx) - lu_length(r, ctx)) <= 1e-9 * lu_length(r, ctx));
  }
}

TEST_CASE("taylor series") {
  std::mt19937_64 rng(3);
  const Matrix z = randn(6, 4, rng);
  const auto ctx = make_context(6, 4, 50.0);
  const double k1 = coding_length_taylor(z, ctx, 1).value;
  CHECK(k1 == doctest::Approx(ctx.mu * ctx.gram_scale * (z.transpose() * z).trace()).epsilon(1e-12));

  // scale so that ||X||_2 == 0.5
  const Vector ev = gram_spectrum(z, ctx);
  const Matrix zs = z * std::sqrt(0.5 / ev.maxCoeff());
  const double exact = coding_length_exact(zs, ctx);
  CHECK(std::abs(coding_length_taylor(zs, ctx, 64).value - exact) <= 1e-6 * exact);
  double prev = INFINITY;
  for (int k = 1; k <= 20; ++k) {
    const double err = std::abs(coding_length_taylor(zs, ctx, k).value - exact);
    CHECK(err <= prev);
    prev = err;
  }
  CHECK(coding_length_taylor(zs, ctx, 4).converged);
  CHECK_FALSE(coding_length_taylor(z * 10.0, ctx, 4).converged);
}

TEST_CASE("expansion coefficients are the Taylor coefficients of ln(1+x)") {
  const auto c = expansion_coefficients(1.0, 3);
  CHECK(c[0] == doctest::Approx(std::log(2.0)));
  CHECK(c[1] == doctest::Approx(0.5));
  CHECK(c[2] == doctest::Approx(-1.0 / 8.0));
  CHECK(c[3] == doctest::Approx(1.0 / 24.0));
  // derivative check: c_j j! equals the j-th derivative, estimated numerically for j = 1, 2
  const double a = 2.0, h = 1e-4;
  auto f = [](double x) { return std::log1p(x); };
  const auto ca = expansion_coefficients(a, 2);
  CHECK(ca[1] == doctest::Approx((f(a + h) - f(a - h)) / (2 * h)).epsilon(1e-7));
  CHECK(2.0 * ca[2] == doctest::Approx((f(a + h) - 2 * f(a) + f(a - h)) / (h * h)).epsilon(1e-5));
}

TEST_CASE("expert lengths") {
  // X == a I: all difference terms vanish
  for (double a : {0.0, 1.0, 3.0, 7.0}) {
    const CodingContext ctx = make_context(5, 5, 5.0 / (5.0 * a + (a == 0.0 ? 1.0 : 0.0)));
    Matrix z = Matrix::Identity(5, 5) * (a == 0.0 ? 0.0 : 1.0);
    const auto e = expert_length(z, ctx, a, 3);
    CHECK(e.value == doctest::Approx(ctx.mu * 5.0 * std::log1p(a)).epsilon(1e-12));
  }
  // diag X = (0.2, 1.8), a = 1, k = 8
  Matrix z = Matrix::Zero(2, 2);
  z(0, 0) = std::sqrt(0.2);
  z(1, 1) = std::sqrt(1.8);
  const auto ctx = make_context(2, 2, 1.0);
  const double want = ctx.mu * (std::log1p(0.2) + std::log1p(1.8));
  CHECK(expert_length(z, ctx, 1.0, 8).value == doctest::Approx(want).epsilon(1e-4));

  std::mt19937_64 rng(4);
  const Matrix r = randn(6, 5, rng);
  const auto c2 = make_context(6, 5, 4.0);
  CHECK(expert_length(r, c2, 0.0, 5).value == doctest::Approx(coding_length_taylor(r, c2, 5).value));
  const Vector ev = gram_spectrum(r, c2);
  for (double a : {0.5, 1.0, 3.0})
    CHECK(expert_length(r, c2, a, 4).value == doctest::Approx(series_oracle(ev, c2.mu, a, 4)).epsilon(1e-10));
}

TEST_CASE("gate") {
  std::mt19937_64 rng(5);
  const Matrix z = randn(3, 6, rng);
  const Vector u = gate(z, Matrix::Zero(4, 3));
  for (Index i = 0; i < 4; ++i) CHECK(u(i) == doctest::Approx(0.25));
  CHECK(gate(z, randn(1, 3, rng))(0) == doctest::Approx(1.0));
  // logits [ln 3, 0]
  Matrix ones = Matrix::Ones(1, 6);
  Matrix w(2, 1);
  w << std::log(3.0), 0.0;
  const Vector g = gate(ones, w);
  CHECK(g(0) == doctest::Approx(0.75));
  CHECK(g(1) == doctest::Approx(0.25));
  const Vector r = gate(z, randn(4, 3, rng));
  CHECK(r.sum() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK((r.array() > 0.0).all());
  CHECK_THROWS_AS(gate(z, Matrix::Zero(4, 2)), ShapeError);
}

TEST_CASE("permutation invariance and monotonicity") {
  std::mt19937_64 rng(6);
  const Matrix z = randn(6, 5, rng);
  Eigen::PermutationMatrix<Eigen::Dynamic> perm(5);
  perm.setIdentity();
  std::shuffle(perm.indices().data(), perm.indices().data() + 5, rng);
  const Matrix zp = z * perm;
  const auto ctx = make_context(6, 5, 2.0);
  CHECK(coding_length_exact(zp, ctx) == doctest::Approx(coding_length_exact(z, ctx)).epsilon(1e-10));
  CHECK(coding_length_taylor(zp, ctx, 3).value == doctest::Approx(coding_length_taylor(z, ctx, 3).value));
  CHECK(expert_length(zp, ctx, 3.0, 2).value == doctest::Approx(expert_length(z, ctx, 3.0, 2).value));
  MecConfig cfg = fixed_eps(2.0);
  const Matrix wg = randn(4, 6, rng);
  CHECK(moe_length(zp, ctx, cfg, wg).value == doctest::Approx(moe_length(z, ctx, cfg, wg).value));

  // an orthogonal extra column does not shrink the coding length (same lambda_g)
  Matrix base = Matrix::Zero(4, 2);
  base(0, 0) = 1.0;
  base(1, 1) = 1.0;
  Matrix wider = Matrix::Zero(4, 3);
  wider.leftCols(2) = base;
  wider(2, 2) = 1.0;
  const double scale = 0.8;
  const double l2 = 0.5 * 6 * linalg::logdet_plus_identity(linalg::gram(base, scale));
  const double l3 = 0.5 * 7 * linalg::logdet_plus_identity(linalg::gram(wider, scale));
  CHECK(l3 >= l2);
}

TEST_CASE("mec_loss agrees with the value-only forms") {
  std::mt19937_64 rng(7);
  const Matrix z = randn(5, 6, rng);
  MecConfig cfg;
  cfg.order = 3;
  const auto prep = prepare_features(z, cfg);
  const Matrix wg = randn(4, 5, rng);
  ad::Tape tape;
  Tensor zt({5, 6});
  zt.matrix() = z;
  Tensor wt({4, 5});
  wt.matrix() = wg;
  const MecLoss l = mec_loss(tape.variable(zt), cfg, tape.variable(wt));
  CHECK(l.value.item() == doctest::Approx(moe_length(prep.z, prep.ctx, cfg, wg).value).epsilon(1e-10));
  for (std::size_t i = 0; i < cfg.points.size(); ++i)
    CHECK(l.experts[i].item() ==
          doctest::Approx(expert_length(prep.z, prep.ctx, cfg.points[i], cfg.order).value).epsilon(1e-10));

  // single expert at 0 reduces to the Taylor value
  MecConfig one;
  one.points = {0.0};
  one.order = 4;
  ad::Tape t2;
  const MecLoss s = mec_loss(t2.variable(zt), one, t2.variable(Tensor({1, 5})));
  CHECK(s.value.item() == doctest::Approx(coding_length_taylor(prep.z, prep.ctx, 4).value).epsilon(1e-10));
}

TEST_CASE("mec_loss gradients match finite differences") {
  std::mt19937_64 rng(8);
  for (int inst = 0; inst < 20; ++inst) {
    MecConfig cfg;
    cfg.order = 1 + inst % 4;
    if (inst % 3 == 0) cfg.eps_sq = 0.5;
    // the adaptive eps is detached, so only compare it against FD when columns are normalized
    if (inst % 5 == 0) {
      cfg.normalize_columns = false;
      cfg.eps_sq = 0.5;
    }
    const Index d = 3 + inst % 3, m = 4 + inst % 4;
    testing::ScalarFn f = [cfg](ad::Tape&, const std::vector<ad::Var>& v) { return mec_loss(v[0], cfg, v[1]).value; };
    const auto r = testing::check_gradients(f, {testing::randn({d, m}, rng), testing::randn({4, d}, rng)});
    INFO("instance " << inst << " " << r.where << " rel " << r.worst);
    CHECK(r.ok(1e-4));
  }
}
