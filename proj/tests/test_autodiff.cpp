#include <doctest.h>

#include <random>

#include "mecq/autodiff.hpp"
#include "mecq/errors.hpp"
#include "support/grad_suite.hpp"

using namespace mecq;
using testing::randn;

TEST_CASE("tape records values and walks backward once") {
  ad::Tape tape;
  auto a = tape.variable(Tensor::from({2}, {1.0, 2.0}));
  auto b = tape.constant(Tensor::from({2}, {3.0, 4.0}));
  auto y = ad::reduce_sum(ad::mul(a, b));
  CHECK(y.item() == doctest::Approx(11.0));
  CHECK(y.requires_grad());
  CHECK_FALSE(b.requires_grad());
  const auto g = tape.backward(y);
  CHECK(g[a][0] == 3.0);
  CHECK(g[a][1] == 4.0);
  CHECK(g[b][0] == 0.0);
}

TEST_CASE("gradients accumulate over fan-out") {
  ad::Tape tape;
  auto x = tape.variable(Tensor::scalar(3.0));
  auto y = ad::add(ad::mul(x, x), x);  // x^2 + x
  CHECK(tape.backward(y)[x].item() == doctest::Approx(7.0));
}

TEST_CASE("backward requires a scalar loss") {
  ad::Tape tape;
  auto x = tape.variable(Tensor::from({2}, {1.0, 2.0}));
  CHECK_THROWS_AS(tape.backward(x), ContractError);
}

TEST_CASE("shape errors name the op") {
  ad::Tape tape;
  auto a = tape.variable(Tensor({2, 3}));
  auto b = tape.variable(Tensor({2, 3}));
  try {
    ad::matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("matmul") != std::string::npos);
  }
  CHECK_THROWS_AS(ad::add(a, tape.variable(Tensor({3, 2}))), ShapeError);
  CHECK_THROWS_AS(ad::add_bias(a, tape.variable(Tensor({2}))), ShapeError);
}

TEST_CASE("custom_gradient uses the supplied vjp") {
  auto op = ad::custom_gradient([](const Tensor& x) { return Tensor(x.shape, x.values.round()); },
                                [](const Tensor&, const Tensor& g) { return g; }, "ste_round");
  ad::Tape tape;
  auto x = tape.variable(Tensor::from({3}, {0.2, 1.7, -2.4}));
  auto y = op(x);
  CHECK(y.value()[1] == 2.0);
  const auto g = tape.backward(ad::reduce_sum(y));
  for (Index i = 0; i < 3; ++i) CHECK(g[x][i] == 1.0);
}

TEST_CASE("custom_gradient rejects a vjp of the wrong shape") {
  auto op = ad::custom_gradient([](const Tensor& x) { return x; },
                                [](const Tensor&, const Tensor&) { return Tensor({5}); });
  ad::Tape tape;
  auto x = tape.variable(Tensor::from({2}, {1.0, 2.0}));
  CHECK_THROWS_AS(tape.backward(ad::reduce_sum(op(x))), ContractError);
}

TEST_CASE("conv2d matches a direct convolution") {
  std::mt19937_64 rng(3);
  const Tensor x = randn({2, 3, 5, 5}, rng);
  const Tensor w = randn({4, 3, 3, 3}, rng);
  for (Index stride : {1, 2})
    for (Index pad : {0, 1}) {
      ad::Tape tape;
      const Tensor y = ad::conv2d(tape.constant(x), tape.constant(w), {stride, pad}).value();
      const Index ho = (5 + 2 * pad - 3) / stride + 1;
      REQUIRE(y.shape == Shape{2, 4, ho, ho});
      for (Index n = 0; n < 2; ++n)
        for (Index o = 0; o < 4; ++o)
          for (Index i = 0; i < ho; ++i)
            for (Index j = 0; j < ho; ++j) {
              double acc = 0.0;
              for (Index c = 0; c < 3; ++c)
                for (Index ki = 0; ki < 3; ++ki)
                  for (Index kj = 0; kj < 3; ++kj) {
                    const Index r = i * stride + ki - pad, q = j * stride + kj - pad;
                    if (r < 0 || q < 0 || r >= 5 || q >= 5) continue;
                    acc += x[((n * 3 + c) * 5 + r) * 5 + q] * w[((o * 3 + c) * 3 + ki) * 3 + kj];
                  }
              CHECK(y[((n * 4 + o) * ho + i) * ho + j] == doctest::Approx(acc).epsilon(1e-12));
            }
    }
}

TEST_CASE("softmax rows sum to one and log_softmax is stable") {
  ad::Tape tape;
  auto x = tape.constant(Tensor::from({2, 3}, {1000.0, 1001.0, 1002.0, -5.0, 0.0, 5.0}));
  const Tensor p = ad::softmax(x).value();
  CHECK(p[0] + p[1] + p[2] == doctest::Approx(1.0));
  CHECK(p[3] + p[4] + p[5] == doctest::Approx(1.0));
  const Tensor lp = ad::log_softmax(x).value();
  CHECK(std::isfinite(lp[0]));
  CHECK(lp[2] == doctest::Approx(-std::log1p(std::exp(-1.0) + std::exp(-2.0))));
}

TEST_CASE("trace_poly equals the matrix power series trace") {
  std::mt19937_64 rng(11);
  Tensor a = randn({4, 4}, rng);
  Tensor x = a;
  // not symmetric on purpose: the op is defined for any square matrix
  const std::vector<double> c{0.0, 0.5, -0.25, 0.125};
  ad::Tape tape;
  const double got = ad::trace_poly(tape.constant(x), 0.7, c).item();
  Eigen::MatrixXd d = x.matrix() - 0.7 * Eigen::MatrixXd::Identity(4, 4);
  Eigen::MatrixXd p = Eigen::MatrixXd::Identity(4, 4);
  double want = 0.0;
  for (std::size_t j = 1; j < c.size(); ++j) {
    p = p * d;
    want += c[j] * p.trace();
  }
  CHECK(got == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("normalize_columns leaves zero columns alone") {
  ad::Tape tape;
  auto z = tape.constant(Tensor::from({2, 2}, {3.0, 0.0, 4.0, 0.0}));
  const Tensor n = ad::normalize_columns(z).value();
  CHECK(n[0] == doctest::Approx(0.6));
  CHECK(n[2] == doctest::Approx(0.8));
  CHECK(n[1] == 0.0);
  CHECK(n[3] == 0.0);
}

TEST_CASE("finite-difference gradients of every op") {
  for (const auto& c : testing::op_cases()) {
    const auto r = testing::run_case(c);
    INFO(c.name << " " << r.where << " rel err " << r.worst);
    CHECK(r.failures == 0);
  }
}
