#include "mecq/quant.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mecq/errors.hpp"

namespace mecq::quant {

void QuantSpec::validate() const {
  if (bits < 2 || bits > 8) throw ConfigError("quant: bits must be in [2, 8], got " + std::to_string(bits));
  if (granularity == Granularity::PerChannel && role != Role::Weight)
    throw ConfigError("quant: per-channel granularity is only supported for weights");
  if (axis < 0) throw ConfigError("quant: negative channel axis");
}

double round_half_away(double x) { return std::round(x); }

namespace {

struct ChannelLayout {
  Index channels = 1;
  Index inner = 1;

  Index of(Index flat) const { return channels == 1 ? 0 : (flat / inner) % channels; }
};

ChannelLayout layout_for(const Shape& shape, const QuantSpec& spec) {
  ChannelLayout l;
  if (spec.granularity == Granularity::PerTensor) return l;
  if (spec.axis >= static_cast<Index>(shape.size()))
    throw ShapeError("quant: channel axis " + std::to_string(spec.axis) + " out of range for " + shape_str(shape));
  l.channels = shape[static_cast<std::size_t>(spec.axis)];
  for (std::size_t d = static_cast<std::size_t>(spec.axis) + 1; d < shape.size(); ++d) l.inner *= shape[d];
  return l;
}

void check_params(const QuantParams& p, Index channels) {
  if (p.step.size() != channels || p.zero_point.size() != channels)
    throw ShapeError("quant: params carry " + std::to_string(p.step.size()) + " channels, tensor needs " +
                     std::to_string(channels));
}

}  // namespace

Index channel_count(const Shape& shape, const QuantSpec& spec) { return layout_for(shape, spec).channels; }

ObserverState observe(ObserverState state, const Tensor& x, const QuantSpec& spec) {
  const ChannelLayout l = layout_for(x.shape, spec);
  if (state.count == 0) {
    state.x_min = Eigen::ArrayXd::Constant(l.channels, std::numeric_limits<double>::infinity());
    state.x_max = Eigen::ArrayXd::Constant(l.channels, -std::numeric_limits<double>::infinity());
  } else if (state.x_min.size() != l.channels) {
    throw ShapeError("observe: channel count changed between observations");
  }
  for (Index i = 0; i < x.numel(); ++i) {
    const double v = x[i];
    if (std::isnan(v)) throw DataError("observe: NaN in observed tensor");
    const Index c = l.of(i);
    state.x_min(c) = std::min(state.x_min(c), v);
    state.x_max(c) = std::max(state.x_max(c), v);
  }
  ++state.count;
  return state;
}

QuantParams calibrate(const ObserverState& state, const QuantSpec& spec, DegeneratePolicy policy) {
  spec.validate();
  if (state.count == 0) throw ContractError("calibrate: observer has no observations");
  const double levels = spec.max_level();
  const Index n = state.x_min.size();
  QuantParams p;
  p.step.resize(n);
  p.zero_point.resize(n);
  for (Index c = 0; c < n; ++c) {
    const double lo = state.x_min(c);
    const double hi = state.x_max(c);
    if (!(hi > lo)) {
      if (policy == DegeneratePolicy::Throw)
        throw DegenerateError("calibrate: degenerate range (x_min == x_max == " + std::to_string(lo) + ")");
      p.step(c) = kStepFloor;
      p.zero_point(c) = 0;
      ++p.degenerate_channels;
      continue;
    }
    if (spec.symmetric) {
      p.step(c) = std::max(std::abs(lo), std::abs(hi)) * 2.0 / levels;
      p.zero_point(c) = 1 << (spec.bits - 1);
    } else {
      p.step(c) = (hi - lo) / levels;
      const double z = round_half_away(-lo / p.step(c));
      p.zero_point(c) = static_cast<int>(std::clamp(z, 0.0, levels));
    }
  }
  return p;
}

Tensor fake_quant(const Tensor& x, const QuantParams& params, const QuantSpec& spec) {
  const ChannelLayout l = layout_for(x.shape, spec);
  check_params(params, l.channels);
  const double levels = spec.max_level();
  Tensor out(x.shape);
  for (Index i = 0; i < x.numel(); ++i) {
    const Index c = l.of(i);
    const double s = params.step(c);
    const double z = params.zero_point(c);
    const double q = std::clamp(round_half_away(x[i] / s) + z, 0.0, levels);
    out[i] = (q - z) * s;
  }
  return out;
}

Tensor ste_mask(const Tensor& x, const QuantParams& params, const QuantSpec& spec) {
  const ChannelLayout l = layout_for(x.shape, spec);
  check_params(params, l.channels);
  const double levels = spec.max_level();
  Tensor out(x.shape);
  for (Index i = 0; i < x.numel(); ++i) {
    const Index c = l.of(i);
    const double q = round_half_away(x[i] / params.step(c)) + params.zero_point(c);
    out[i] = (q >= 0.0 && q <= levels) ? 1.0 : 0.0;
  }
  return out;
}

ad::Var fake_quant(ad::Var x, ad::Var step, const Eigen::ArrayXi& zero_point, const QuantSpec& spec) {
  const ChannelLayout l = layout_for(x.shape(), spec);
  if (step.shape() != Shape{l.channels} || zero_point.size() != l.channels)
    throw ShapeError("fake_quant: step/zero-point must have " + std::to_string(l.channels) + " channels");
  const double levels = spec.max_level();
  const Tensor& xv = x.value();
  const Tensor& sv = step.value();
  Tensor out(xv.shape);
  // Per element: 0 = inside the grid, -1 = clipped low, +1 = clipped high.
  Eigen::ArrayXi region(xv.numel());
  Eigen::ArrayXd residual(xv.numel());
  for (Index i = 0; i < xv.numel(); ++i) {
    const Index c = l.of(i);
    const double s = sv[c];
    const double z = zero_point(c);
    const double scaled = xv[i] / s;
    const double r = round_half_away(scaled);
    const double q = r + z;
    if (q < 0.0) {
      region(i) = -1;
      out[i] = -z * s;
    } else if (q > levels) {
      region(i) = 1;
      out[i] = (levels - z) * s;
    } else {
      region(i) = 0;
      out[i] = r * s;
    }
    residual(i) = r - scaled;
  }
  const double per_channel = static_cast<double>(xv.numel()) / static_cast<double>(l.channels);
  const double grad_scale = 1.0 / std::sqrt(per_channel * levels);
  return x.tape()->record(
      std::move(out), {x, step},
      [l, region = std::move(region), residual = std::move(residual), zero_point, levels, grad_scale,
       xshape = xv.shape](const Tensor& g) {
        Tensor gx(xshape);
        Tensor gs({l.channels});
        for (Index i = 0; i < g.numel(); ++i) {
          const Index c = l.of(i);
          if (region(i) == 0) {
            gx[i] = g[i];
            gs[c] += g[i] * residual(i);
          } else if (region(i) < 0) {
            gs[c] += g[i] * -static_cast<double>(zero_point(c));
          } else {
            gs[c] += g[i] * (levels - zero_point(c));
          }
        }
        gs.values *= grad_scale;
        return std::vector<Tensor>{std::move(gx), std::move(gs)};
      },
      "fake_quant");
}

ad::Var clip_to_range(ad::Var x, const QuantParams& params, const QuantSpec& spec) {
  const ChannelLayout l = layout_for(x.shape(), spec);
  check_params(params, l.channels);
  const double levels = spec.max_level();
  const Tensor& xv = x.value();
  Tensor out(xv.shape);
  Tensor mask(xv.shape);
  for (Index i = 0; i < xv.numel(); ++i) {
    const Index c = l.of(i);
    const double lo = -params.zero_point(c) * params.step(c);
    const double hi = (levels - params.zero_point(c)) * params.step(c);
    out[i] = std::clamp(xv[i], lo, hi);
    mask[i] = (xv[i] >= lo && xv[i] <= hi) ? 1.0 : 0.0;
  }
  return x.tape()->record(
      std::move(out), {x},
      [mask = std::move(mask)](const Tensor& g) {
        return std::vector<Tensor>{Tensor(g.shape, g.values * mask.values)};
      },
      "clip_to_range");
}

Quantizer::Quantizer(QuantSpec spec) : spec_(spec) { spec_.validate(); }

QuantParams Quantizer::params() const {
  QuantParams p;
  p.step = step_.values;
  p.zero_point = zero_point_;
  p.degenerate_channels = degenerate_;
  return p;
}

void Quantizer::reset_observer() { observer_ = ObserverState{}; }

void Quantizer::observe(const Tensor& x) { observer_ = quant::observe(std::move(observer_), x, spec_); }

int Quantizer::freeze() {
  set_params(calibrate(observer_, spec_, DegeneratePolicy::Floor));
  return degenerate_;
}

void Quantizer::set_params(QuantParams params) {
  if (params.step.size() != params.zero_point.size() || params.step.size() == 0)
    throw ShapeError("quantizer: inconsistent params");
  if ((params.step <= 0.0).any()) throw ConfigError("quantizer: step sizes must be positive");
  if ((params.zero_point < 0).any() || (params.zero_point > spec_.max_level()).any())
    throw ConfigError("quantizer: zero-point out of range");
  step_ = Tensor({params.step.size()}, params.step);
  zero_point_ = params.zero_point;
  degenerate_ = params.degenerate_channels;
  calibrated_ = true;
  mode_ = Mode::Quantize;
}

ad::Var Quantizer::apply(ad::Var x, ad::Var step_var) {
  switch (mode_) {
    case Mode::Bypass:
      return x;
    case Mode::Observe:
      observe(x.value());
      return x;
    case Mode::Quantize:
      if (!calibrated_) throw ContractError("quantizer: apply before calibration");
      return fake_quant(x, step_var, zero_point_, spec_);
    case Mode::Clip:
      if (!calibrated_) throw ContractError("quantizer: apply before calibration");
      return clip_to_range(x, params(), spec_);
  }
  return x;
}

}  // namespace mecq::quant
