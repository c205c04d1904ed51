#pragma once

// Maximum-entropy coding length of a feature batch and its surrogates.
//
// Z is d x m (features in rows, one sample per column). With
// X = lambda_g Z^T Z, lambda_g = d / (m eps^2) and mu = (m + d) / 2:
//
//   exact     L   = mu * log det(I_m + X)
//   taylor    L_k = mu * Tr( sum_{j<=k} (-1)^(j+1) / j * X^j )
//   expert a  L_a = mu * [ m ln(1+a) + sum_{j<=k} c_j(a) Tr((X - aI)^j) ],
//             c_j(a) = (-1)^(j+1) / (j (1+a)^j)
//   moe       L   = sum_i softmax(W_g mean_cols(Z))_i * L_{a_i}

#include <optional>
#include <vector>

#include "mecq/autodiff.hpp"
#include "mecq/linalg.hpp"

namespace mecq::mec {

struct MecConfig {
  std::optional<double> eps_sq;  // nullopt: adaptive, trace(X) == m
  int order = 2;
  std::vector<double> points{0.0, 1.0, 3.0, 7.0};
  bool maximize_entropy = true;
  bool normalize_columns = true;

  Index experts() const { return static_cast<Index>(points.size()); }
  void validate() const;
};

struct CodingContext {
  Index m = 0;
  Index d = 0;
  double mu = 0.0;
  double gram_scale = 0.0;  // lambda_g
  double eps_sq = 0.0;
};

CodingContext make_context(Index d, Index m, double eps_sq);

struct PreparedFeatures {
  Matrix z;
  CodingContext ctx;
};

// Column normalization (zero columns untouched) and eps^2 resolution.
// Throws DegenerateError for an all-zero batch in adaptive mode.
PreparedFeatures prepare_features(const Matrix& z_raw, const MecConfig& cfg);

Matrix gram_matrix(const Matrix& z, const CodingContext& ctx);

double coding_length_exact(const Matrix& z, const CodingContext& ctx);

// A truncated series value with a flag raised when the expansion point's
// convergence radius does not cover the spectrum.
struct SeriesValue {
  double value = 0.0;
  bool converged = true;
};

SeriesValue coding_length_taylor(const Matrix& z, const CodingContext& ctx, int order);

// Taylor coefficients of ln(1+x) about a: out[0] = ln(1+a), out[j] = c_j(a).
std::vector<double> expansion_coefficients(double point, int order);

SeriesValue expert_length(const Matrix& z, const CodingContext& ctx, double point, int order);

// The same quantities given the Gram matrix X directly.
double gram_length_exact(const Matrix& x, double mu);
SeriesValue gram_expert_length(const Matrix& x, double mu, double point, int order);

// softmax(W_g * column_mean(Z)); W_g is n x d.
Vector gate(const Matrix& z, const Matrix& gate_weights);

SeriesValue moe_length(const Matrix& z, const CodingContext& ctx, const MecConfig& cfg,
                       const Matrix& gate_weights);

struct MecLoss {
  ad::Var value;                 // scalar MoE coding length
  ad::Var gate;                  // [n] expert weights
  std::vector<ad::Var> experts;  // per-expert scalar lengths
  CodingContext ctx;
  bool converged = true;
};

// Differentiable MoE coding length of z_raw (d x m). Gradients reach z_raw
// and gate_weights (n x d). eps^2 is resolved from the batch and treated as
// a constant.
MecLoss mec_loss(ad::Var z_raw, const MecConfig& cfg, ad::Var gate_weights);

}  // namespace mecq::mec
