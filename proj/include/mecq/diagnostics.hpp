#pragma once

// Feature-collapse and sharpness measurements.

#include <cstdint>
#include <functional>
#include <vector>

#include "mecq/data.hpp"
#include "mecq/linalg.hpp"
#include "mecq/model.hpp"

namespace mecq::diag {

using mecq::Matrix;
using mecq::Vector;

inline constexpr double kRankTolerance = 1e-6;

struct CollapseReport {
  double entropy = 0.0;  // H, bits
  Index rank = 0;
  Index n_rank = 0;      // min(d, m)
  Vector singular_values;  // descending
  bool degenerate = false; // all-zero input
};

// H = (rank / N_rank) * -sum p_i log2 p_i with p_i = sigma_i / sum sigma.
// Singular values at or below rank_tol * sigma_max count as zero.
CollapseReport rectified_entropy(const Matrix& z, double rank_tol = kRankTolerance);

// Gradient of a scalar loss at a flat parameter vector.
using GradientFn = std::function<Vector(const Vector& w)>;

// (g(w + h v) - g(w - h v)) / 2h with h = 1e-3 (1 + |w|) / |v|.
Vector hvp(const GradientFn& grad, const Vector& w, const Vector& v);

struct HessianOptions {
  int power_iters = 100;
  int probes = 100;
  double tolerance = 1e-8;  // relative change of the Rayleigh quotient
  std::uint64_t seed = 0;
};

struct HessianReport {
  double max_eig = 0.0;   // dominant eigenvalue (Rayleigh quotient)
  double mean_eig = 0.0;  // Hutchinson trace / n
  double mean_stderr = 0.0;
  int iterations = 0;
  double residual = 0.0;  // |Hv - max_eig v| / |max_eig|
  bool converged = false;
  Index dim = 0;
  int probes = 0;
};

HessianReport hessian_spectrum(const GradientFn& grad, const Vector& w, const HessianOptions& opts = {});

// Backbone features over ds as a d x m matrix (one column per sample).
Matrix feature_matrix(model::Model& model, const data::Dataset& ds, Index batch_size = 256);

// Mean cross-entropy of the model as a function of its flattened weights,
// biases and affines. While alive, weights are replaced by their dequantized
// values, weight quantizers are bypassed and activation quantizers only clip,
// so the loss is piecewise smooth around the quantized point. The model is
// restored on destruction.
class SurrogateLoss {
 public:
  SurrogateLoss(model::Model& model, const data::Dataset& ds);
  ~SurrogateLoss();
  SurrogateLoss(const SurrogateLoss&) = delete;
  SurrogateLoss& operator=(const SurrogateLoss&) = delete;

  const Vector& point() const { return w0_; }
  Index dim() const { return w0_.size(); }
  double loss(const Vector& w);
  Vector gradient(const Vector& w);
  GradientFn gradient_fn();

 private:
  void load(const Vector& w);

  model::Model& model_;
  const data::Dataset& ds_;
  Tensor input_;
  std::vector<Tensor> saved_;
  std::vector<quant::Quantizer::Mode> saved_modes_;
  Vector w0_;
};

}  // namespace mecq::diag
