#pragma once

// Fake quantization: calibration from observed ranges, clip/round/dequantize
// forward, straight-through backward.
//
//   x_int = clip(round(x / s) + z, 0, 2^q - 1)
//   x_hat = (x_int - z) * s
//
// round() is half-away-from-zero everywhere. Step sizes carry an LSQ-style
// gradient when learnable; zero-points are frozen after calibration.

#include <Eigen/Dense>

#include <string>

#include "mecq/autodiff.hpp"
#include "mecq/tensor.hpp"

namespace mecq::quant {

enum class Granularity { PerTensor, PerChannel };
enum class Role { Weight, Activation };

struct QuantSpec {
  int bits = 8;
  Granularity granularity = Granularity::PerTensor;
  Index axis = 0;
  bool symmetric = false;
  bool learnable_params = true;
  Role role = Role::Activation;

  int max_level() const { return (1 << bits) - 1; }
  // Throws ConfigError when bits or granularity are out of contract.
  void validate() const;
};

struct QuantParams {
  Eigen::ArrayXd step;       // s, one per channel (size 1 for per-tensor)
  Eigen::ArrayXi zero_point; // z in [0, 2^q - 1]
  int degenerate_channels = 0;

  Index channels() const { return step.size(); }
};

struct ObserverState {
  Eigen::ArrayXd x_min;
  Eigen::ArrayXd x_max;
  long count = 0;
};

inline constexpr double kStepFloor = 1e-8;

double round_half_away(double x);

// Number of channels a tensor has under spec (1 for per-tensor).
Index channel_count(const Shape& shape, const QuantSpec& spec);

// Running min/max over every element of x, per channel where applicable.
// Throws DataError on NaN.
ObserverState observe(ObserverState state, const Tensor& x, const QuantSpec& spec);

enum class DegeneratePolicy { Throw, Floor };

// s = (x_max - x_min) / (2^q - 1), z = clamp(round(-x_min / s), 0, 2^q - 1).
// Symmetric mode: s = 2 max(|x_min|, |x_max|) / (2^q - 1), z = 2^(q-1).
// A channel with x_max == x_min raises DegenerateError under Throw, or gets
// s = kStepFloor, z = 0 under Floor (counted in degenerate_channels).
QuantParams calibrate(const ObserverState& state, const QuantSpec& spec,
                      DegeneratePolicy policy = DegeneratePolicy::Throw);

// Value-only fake quantization.
Tensor fake_quant(const Tensor& x, const QuantParams& params, const QuantSpec& spec);

// 1 where round(x/s) + z lies inside [0, 2^q - 1], else 0.
Tensor ste_mask(const Tensor& x, const QuantParams& params, const QuantSpec& spec);

// Differentiable fake quantization on the tape. `step` holds s (shape
// [channels]); gradients reach x through the STE mask and step through the
// learned-step rule scaled by 1/sqrt(numel_per_channel * (2^q - 1)).
ad::Var fake_quant(ad::Var x, ad::Var step, const Eigen::ArrayXi& zero_point, const QuantSpec& spec);

// Differentiable clip to the quantizer's representable range.
ad::Var clip_to_range(ad::Var x, const QuantParams& params, const QuantSpec& spec);

// A quantizer attached to one tensor site (a layer's weight or its input).
class Quantizer {
 public:
  // Clip applies only the saturation of the quantizer (no rounding): the
  // smooth function whose derivative the straight-through estimator uses.
  enum class Mode { Bypass, Observe, Quantize, Clip };

  Quantizer() = default;
  explicit Quantizer(QuantSpec spec);

  const QuantSpec& spec() const { return spec_; }
  QuantSpec& spec() { return spec_; }
  Mode mode() const { return mode_; }
  void set_mode(Mode m) { mode_ = m; }

  bool calibrated() const { return calibrated_; }
  // Current params: calibrated zero-points with the (possibly trained) step.
  QuantParams params() const;
  const ObserverState& observer() const { return observer_; }

  void reset_observer();
  void observe(const Tensor& x);
  // Computes params from the observer and switches to Quantize. Returns the
  // number of degenerate channels that were floored.
  int freeze();
  void set_params(QuantParams params);

  // The trainable step tensor (shape [channels]); empty before calibration.
  Tensor& step() { return step_; }
  const Tensor& step() const { return step_; }

  // Applies the quantizer according to mode. step_var must be a tape handle
  // bound to step() when mode is Quantize.
  ad::Var apply(ad::Var x, ad::Var step_var);

 private:
  QuantSpec spec_;
  Mode mode_ = Mode::Bypass;
  ObserverState observer_;
  Eigen::ArrayXi zero_point_;
  int degenerate_ = 0;
  Tensor step_;
  bool calibrated_ = false;
};

}  // namespace mecq::quant
