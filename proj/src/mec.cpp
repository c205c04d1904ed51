#include "mecq/mec.hpp"

#include <cmath>
#include <string>

#include "mecq/errors.hpp"

namespace mecq::mec {

void MecConfig::validate() const {
  if (order < 1) throw ConfigError("mec.order must be >= 1");
  if (points.empty()) throw ConfigError("mec.points must not be empty");
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (!(points[i] >= 0.0)) throw ConfigError("mec.points must be non-negative");
    if (i > 0 && !(points[i] > points[i - 1])) throw ConfigError("mec.points must be strictly increasing");
  }
  if (eps_sq && !(*eps_sq > 0.0)) throw ConfigError("mec.eps_sq must be positive or \"adaptive\"");
}

CodingContext make_context(Index d, Index m, double eps_sq) {
  if (d < 1 || m < 1) throw ShapeError("mec: feature matrix must be non-empty");
  if (!(eps_sq > 0.0)) throw ConfigError("mec: eps^2 must be positive");
  CodingContext ctx;
  ctx.d = d;
  ctx.m = m;
  ctx.mu = 0.5 * static_cast<double>(m + d);
  ctx.eps_sq = eps_sq;
  ctx.gram_scale = static_cast<double>(d) / (static_cast<double>(m) * eps_sq);
  return ctx;
}

namespace {

// eps^2 such that trace(lambda_g Z^T Z) == m.
double adaptive_eps_sq(double frob_sq, Index d, Index m) {
  if (!(frob_sq > 0.0)) throw DegenerateError("mec: all-zero feature batch with adaptive eps^2");
  const double gram_scale = static_cast<double>(m) / frob_sq;
  return static_cast<double>(d) / (static_cast<double>(m) * gram_scale);
}

}  // namespace

PreparedFeatures prepare_features(const Matrix& z_raw, const MecConfig& cfg) {
  cfg.validate();
  PreparedFeatures out;
  out.z = z_raw;
  if (cfg.normalize_columns) {
    for (Index j = 0; j < out.z.cols(); ++j) {
      const double n = out.z.col(j).norm();
      if (n > 0.0) out.z.col(j) /= n;
    }
  }
  const double eps_sq = cfg.eps_sq ? *cfg.eps_sq : adaptive_eps_sq(out.z.squaredNorm(), z_raw.rows(), z_raw.cols());
  out.ctx = make_context(z_raw.rows(), z_raw.cols(), eps_sq);
  return out;
}

Matrix gram_matrix(const Matrix& z, const CodingContext& ctx) { return linalg::gram(z, ctx.gram_scale); }

double coding_length_exact(const Matrix& z, const CodingContext& ctx) {
  if (z.rows() != ctx.d || z.cols() != ctx.m) throw ShapeError("coding_length_exact: context does not match Z");
  // det(I_m + s Z^T Z) == det(I_d + s Z Z^T); factor the smaller side.
  if (z.rows() < z.cols()) return ctx.mu * linalg::logdet_plus_identity(linalg::gram(Matrix(z.transpose()), ctx.gram_scale));
  return ctx.mu * linalg::logdet_plus_identity(gram_matrix(z, ctx));
}

SeriesValue coding_length_taylor(const Matrix& z, const CodingContext& ctx, int order) {
  return expert_length(z, ctx, 0.0, order);
}

std::vector<double> expansion_coefficients(double point, int order) {
  if (order < 1) throw ConfigError("expansion order must be >= 1");
  if (!(point >= 0.0)) throw ConfigError("expansion point must be non-negative");
  std::vector<double> c(static_cast<std::size_t>(order) + 1);
  c[0] = std::log1p(point);
  double inv_pow = 1.0;
  for (int j = 1; j <= order; ++j) {
    inv_pow /= (1.0 + point);
    c[static_cast<std::size_t>(j)] = ((j % 2 == 1) ? 1.0 : -1.0) * inv_pow / static_cast<double>(j);
  }
  return c;
}

SeriesValue expert_length(const Matrix& z, const CodingContext& ctx, double point, int order) {
  if (z.rows() != ctx.d || z.cols() != ctx.m) throw ShapeError("expert_length: context does not match Z");
  return gram_expert_length(gram_matrix(z, ctx), ctx.mu, point, order);
}

double gram_length_exact(const Matrix& x, double mu) {
  linalg::require_symmetric(x, "gram_length_exact");
  return mu * linalg::logdet_plus_identity(x);
}

SeriesValue gram_expert_length(const Matrix& x, double mu, double point, int order) {
  linalg::require_square(x, "gram_expert_length");
  const Index m = x.rows();
  std::vector<double> c = expansion_coefficients(point, order);
  const double constant = static_cast<double>(m) * c[0];
  c[0] = 0.0;
  const Matrix shifted = x - point * Matrix::Identity(m, m);
  SeriesValue out;
  out.value = mu * (constant + linalg::poly_trace(shifted, c));
  out.converged = linalg::spectral_norm(shifted) < 1.0 + point;
  return out;
}

Vector gate(const Matrix& z, const Matrix& gate_weights) {
  if (gate_weights.cols() != z.rows())
    throw ShapeError("gate: W_g has " + std::to_string(gate_weights.cols()) + " columns, features have " +
                     std::to_string(z.rows()) + " rows");
  const Vector logits = gate_weights * z.rowwise().mean();
  const Vector e = (logits.array() - logits.maxCoeff()).exp();
  return e / e.sum();
}

SeriesValue moe_length(const Matrix& z, const CodingContext& ctx, const MecConfig& cfg, const Matrix& gate_weights) {
  if (gate_weights.rows() != cfg.experts()) throw ShapeError("moe_length: W_g rows must equal expert count");
  const Vector w = gate(z, gate_weights);
  SeriesValue out;
  for (Index i = 0; i < cfg.experts(); ++i) {
    const SeriesValue e = expert_length(z, ctx, cfg.points[static_cast<std::size_t>(i)], cfg.order);
    out.value += w(i) * e.value;
    out.converged = out.converged && e.converged;
  }
  return out;
}

MecLoss mec_loss(ad::Var z_raw, const MecConfig& cfg, ad::Var gate_weights) {
  cfg.validate();
  const Shape& zs = z_raw.shape();
  if (zs.size() != 2) throw ShapeError("mec_loss: Z must be d x m");
  const Index d = zs[0], m = zs[1];
  if (gate_weights.shape() != Shape{cfg.experts(), d})
    throw ShapeError("mec_loss: W_g must be " + shape_str({cfg.experts(), d}) + ", got " +
                     shape_str(gate_weights.shape()));
  ad::Tape& tape = *z_raw.tape();

  ad::Var z = cfg.normalize_columns ? ad::normalize_columns(z_raw) : z_raw;
  const double eps_sq = cfg.eps_sq ? *cfg.eps_sq : adaptive_eps_sq(z.value().values.square().sum(), d, m);

  MecLoss out;
  out.ctx = make_context(d, m, eps_sq);
  const ad::Var x = ad::scale(ad::matmul(ad::transpose(z), z), out.ctx.gram_scale);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> spectrum(Eigen::MatrixXd(x.value().matrix()),
                                                          Eigen::EigenvaluesOnly);
  const double lo = spectrum.eigenvalues().minCoeff();
  const double hi = spectrum.eigenvalues().maxCoeff();

  for (double a : cfg.points) {
    std::vector<double> c = expansion_coefficients(a, cfg.order);
    const double constant = static_cast<double>(m) * c[0];
    const ad::Var series = ad::trace_poly(x, a, c);
    out.experts.push_back(ad::scale(ad::add_scalar(series, constant), out.ctx.mu));
    out.converged = out.converged && std::max(std::abs(lo - a), std::abs(hi - a)) < 1.0 + a;
  }

  const ad::Var mean = ad::matmul(z, tape.constant(Tensor::filled({m, 1}, 1.0 / static_cast<double>(m))));
  const ad::Var logits = ad::reshape(ad::matmul(gate_weights, mean), {cfg.experts()});
  out.gate = ad::softmax(logits);
  out.value = ad::reduce_sum(ad::mul(out.gate, ad::stack(out.experts)));
  return out;
}

}  // namespace mecq::mec
