#include <doctest.h>

#include <random>
#include <set>

#include "mecq/errors.hpp"
#include "mecq/quant.hpp"
#include "support/gradcheck.hpp"

using namespace mecq;
using namespace mecq::quant;

namespace {

QuantSpec tensor_spec(int bits) {
  QuantSpec s;
  s.bits = bits;
  return s;
}

QuantSpec channel_spec(int bits) {
  QuantSpec s;
  s.bits = bits;
  s.granularity = Granularity::PerChannel;
  s.role = Role::Weight;
  return s;
}

QuantParams params(std::initializer_list<double> step, std::initializer_list<int> zp) {
  QuantParams p;
  p.step = Eigen::ArrayXd(static_cast<Index>(step.size()));
  p.zero_point = Eigen::ArrayXi(static_cast<Index>(zp.size()));
  Index i = 0;
  for (double s : step) p.step(i++) = s;
  i = 0;
  for (int z : zp) p.zero_point(i++) = z;
  return p;
}

ObserverState range(double lo, double hi) {
  ObserverState s;
  s.x_min = Eigen::ArrayXd::Constant(1, lo);
  s.x_max = Eigen::ArrayXd::Constant(1, hi);
  s.count = 2;
  return s;
}

}  // namespace

TEST_CASE("round half away from zero") {
  CHECK(round_half_away(2.5) == 3.0);
  CHECK(round_half_away(-2.5) == -3.0);
  CHECK(round_half_away(0.49) == 0.0);
  CHECK(round_half_away(7.5) == 8.0);
}

TEST_CASE("spec validation") {
  CHECK_THROWS_AS(tensor_spec(1).validate(), ConfigError);
  CHECK_THROWS_AS(tensor_spec(9).validate(), ConfigError);
  QuantSpec act = channel_spec(4);
  act.role = Role::Activation;
  CHECK_THROWS_AS(act.validate(), ConfigError);
  CHECK_NOTHROW(channel_spec(2).validate());
}

TEST_CASE("observe tracks running ranges") {
  const QuantSpec spec = tensor_spec(8);
  ObserverState s = observe({}, Tensor::from({2}, {-1.0, 2.0}), spec);
  CHECK(s.x_min(0) == -1.0);
  CHECK(s.x_max(0) == 2.0);
  s = observe(s, Tensor::from({2}, {0.0, 5.0}), spec);
  CHECK(s.x_min(0) == -1.0);
  CHECK(s.x_max(0) == 5.0);

  const ObserverState c = observe({}, Tensor::from({2, 2}, {-1.0, 0.0, 3.0, 4.0}), channel_spec(8));
  CHECK(c.x_min(0) == -1.0);
  CHECK(c.x_min(1) == 3.0);
  CHECK(c.x_max(0) == 0.0);
  CHECK(c.x_max(1) == 4.0);

  CHECK_THROWS_AS(observe({}, Tensor::from({1}, {std::nan("")}), spec), DataError);
}

TEST_CASE("calibration from observed ranges") {
  QuantParams p = calibrate(range(0.0, 1.0), tensor_spec(2));
  CHECK(p.step(0) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(p.zero_point(0) == 0);

  p = calibrate(range(-1.0, 1.0), tensor_spec(4));
  CHECK(p.step(0) == doctest::Approx(2.0 / 15.0).epsilon(1e-15));
  CHECK(p.zero_point(0) == 8);

  p = calibrate(range(-3.0, 3.0), tensor_spec(8));
  CHECK(p.step(0) == doctest::Approx(6.0 / 255.0).epsilon(1e-15));

  QuantSpec sym = tensor_spec(4);
  sym.symmetric = true;
  p = calibrate(range(-1.0, 2.0), sym);
  CHECK(p.zero_point(0) == 8);
  CHECK(p.step(0) == doctest::Approx(4.0 / 15.0));

  // bit-identical on repeat
  const QuantParams a = calibrate(range(-0.3, 1.7), tensor_spec(3));
  const QuantParams b = calibrate(range(-0.3, 1.7), tensor_spec(3));
  CHECK(a.step(0) == b.step(0));
  CHECK(a.zero_point(0) == b.zero_point(0));
}

TEST_CASE("degenerate ranges") {
  CHECK_THROWS_AS(calibrate(range(0.5, 0.5), tensor_spec(4)), DegenerateError);
  const QuantParams p = calibrate(range(0.5, 0.5), tensor_spec(4), DegeneratePolicy::Floor);
  CHECK(p.step(0) == kStepFloor);
  CHECK(p.zero_point(0) == 0);
  CHECK(p.degenerate_channels == 1);
}

TEST_CASE("fake_quant examples") {
  const QuantSpec spec = tensor_spec(2);
  const QuantParams p = params({1.0}, {0});
  const Tensor y = fake_quant(Tensor::from({3}, {2.7, 10.0, 0.49}), p, spec);
  CHECK(y[0] == 3.0);
  CHECK(y[1] == 3.0);
  CHECK(y[2] == 0.0);
  const Tensor m = ste_mask(Tensor::from({3}, {2.7, 10.0, 0.49}), p, spec);
  CHECK(m[0] == 1.0);
  CHECK(m[1] == 0.0);
  CHECK(m[2] == 1.0);
}

TEST_CASE("fake_quant properties on random data") {
  std::mt19937_64 rng(7);
  for (int bits : {2, 3, 4, 8}) {
    const QuantSpec spec = channel_spec(bits);
    Tensor x = testing::randn({3, 50}, rng, 2.0);
    const QuantParams p = calibrate(observe({}, x, spec), spec);
    Tensor wide = x;
    wide.values *= 1.5;  // push some values out of range
    const Tensor y = fake_quant(wide, p, spec);
    // idempotent
    const Tensor yy = fake_quant(y, p, spec);
    CHECK((yy.values == y.values).all());
    for (Index c = 0; c < 3; ++c) {
      std::set<double> levels;
      const double lo = -p.zero_point(c) * p.step(c);
      const double hi = (spec.max_level() - p.zero_point(c)) * p.step(c);
      for (Index j = 0; j < 50; ++j) {
        const double v = y[c * 50 + j];
        levels.insert(v);
        CHECK(v >= lo - 1e-12);
        CHECK(v <= hi + 1e-12);
      }
      CHECK(levels.size() <= static_cast<std::size_t>(1 << bits));
    }
    // mask is the in-range indicator
    const Tensor mask = ste_mask(wide, p, spec);
    for (Index i = 0; i < wide.numel(); ++i) {
      const Index c = i / 50;
      const double q = round_half_away(wide[i] / p.step(c)) + p.zero_point(c);
      CHECK(mask[i] == ((q >= 0 && q <= spec.max_level()) ? 1.0 : 0.0));
    }
  }
}

TEST_CASE("per-channel parameters are independent") {
  std::mt19937_64 rng(8);
  const QuantSpec spec = channel_spec(4);
  Tensor x = testing::randn({2, 20}, rng);
  const QuantParams a = calibrate(observe({}, x, spec), spec);
  for (Index j = 0; j < 20; ++j) x[20 + j] *= 10.0;
  const QuantParams b = calibrate(observe({}, x, spec), spec);
  CHECK(a.step(0) == b.step(0));
  CHECK(a.zero_point(0) == b.zero_point(0));
  CHECK(a.step(1) != b.step(1));
}

TEST_CASE("straight-through gradient matches the clip surrogate") {
  std::mt19937_64 rng(9);
  for (int inst = 0; inst < 20; ++inst) {
    const QuantSpec spec = (inst % 2) ? channel_spec(2 + inst % 3) : tensor_spec(2 + inst % 7);
    const Shape shape = (inst % 2) ? Shape{3, 6} : Shape{18};
    Tensor x = testing::randn(shape, rng, 1.5);
    QuantParams p = calibrate(observe({}, x, spec), spec);
    x.values *= 1.3;
    // values within half a step outside the grid still round inside; move them
    // and keep clear of the edges so the surrogate is differentiable
    const Index per = x.numel() / p.channels();
    for (Index i = 0; i < x.numel(); ++i) {
      const Index c = spec.granularity == Granularity::PerChannel ? i / per : 0;
      const double s = p.step(c);
      const double lo = -p.zero_point(c) * s, hi = (spec.max_level() - p.zero_point(c)) * s;
      if (x[i] > hi - 1e-3 && x[i] < hi + s) x[i] = x[i] > hi + 0.25 * s ? hi + s : hi - 2e-3;
      if (x[i] < lo + 1e-3 && x[i] > lo - s) x[i] = x[i] < lo - 0.25 * s ? lo - s : lo + 2e-3;
    }
    ad::Tape tape;
    auto xv = tape.variable(x);
    auto sv = tape.constant(Tensor({p.channels()}, p.step));
    const Tensor w = testing::randn(shape, rng);
    const auto g = tape.backward(testing::contract(fake_quant(xv, sv, p.zero_point, spec), w));

    testing::ScalarFn clip = [&](ad::Tape&, const std::vector<ad::Var>& v) {
      return testing::contract(clip_to_range(v[0], p, spec), w);
    };
    const auto fd = testing::check_gradients(clip, {x});
    CHECK(fd.ok(1e-4));
    ad::Tape t2;
    auto xc = t2.variable(x);
    const auto gc = t2.backward(testing::contract(clip_to_range(xc, p, spec), w));
    const double scale = std::max(1.0, gc[xc].values.abs().maxCoeff());
    CHECK((g[xv].values - gc[xc].values).abs().maxCoeff() <= 1e-4 * scale);
  }
}

TEST_CASE("step gradient follows the learned-step rule") {
  std::mt19937_64 rng(10);
  const QuantSpec spec = channel_spec(3);
  Tensor x = testing::randn({2, 8}, rng, 2.0);
  const QuantParams p = params({0.4, 0.25}, {3, 4});
  ad::Tape tape;
  auto xv = tape.constant(x);
  auto sv = tape.variable(Tensor({2}, p.step));
  const Tensor w = testing::randn({2, 8}, rng);
  const auto g = tape.backward(testing::contract(fake_quant(xv, sv, p.zero_point, spec), w));
  const double levels = 7.0;
  const double scale = 1.0 / std::sqrt(8.0 * levels);
  for (Index c = 0; c < 2; ++c) {
    double want = 0.0;
    for (Index j = 0; j < 8; ++j) {
      const double v = x[c * 8 + j] / p.step(c);
      const double q = round_half_away(v) + p.zero_point(c);
      double d;
      if (q < 0)
        d = -p.zero_point(c);
      else if (q > levels)
        d = levels - p.zero_point(c);
      else
        d = round_half_away(v) - v;
      want += w[c * 8 + j] * d;
    }
    CHECK(g[sv][c] == doctest::Approx(want * scale).epsilon(1e-12));
  }
}

TEST_CASE("quantizer lifecycle") {
  Quantizer q(tensor_spec(4));
  CHECK(q.mode() == Quantizer::Mode::Bypass);
  CHECK_FALSE(q.calibrated());
  q.set_mode(Quantizer::Mode::Observe);
  q.observe(Tensor::from({3}, {-1.0, 0.0, 2.0}));
  CHECK(q.freeze() == 0);
  CHECK(q.calibrated());
  CHECK(q.mode() == Quantizer::Mode::Quantize);
  CHECK(q.step().shape == Shape{1});
  CHECK(q.params().step(0) == doctest::Approx(3.0 / 15.0));
  q.step()[0] = 0.5;  // trained step is reflected in params()
  CHECK(q.params().step(0) == 0.5);
  CHECK_THROWS_AS(q.set_params(params({-1.0}, {0})), ConfigError);
  CHECK_THROWS_AS(q.set_params(params({1.0}, {99})), ConfigError);
}
