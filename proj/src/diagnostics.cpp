#include "mecq/diagnostics.hpp"

#include <cmath>
#include <random>

#include "mecq/errors.hpp"
#include "mecq/losses.hpp"

namespace mecq::diag {

CollapseReport rectified_entropy(const Matrix& z, double rank_tol) {
  if (z.size() == 0) throw ShapeError("rectified_entropy: empty matrix");
  if (!z.allFinite()) throw NumericalError("rectified_entropy: non-finite features");
  CollapseReport r;
  r.n_rank = std::min(z.rows(), z.cols());
  const Matrix g = z.rows() <= z.cols() ? Matrix(z * z.transpose()) : Matrix(z.transpose() * z);
  const Vector ev = linalg::psd_eigenvalues(Matrix((g + g.transpose()) / 2.0));
  r.singular_values = ev.cwiseSqrt();
  const double smax = r.singular_values.size() ? r.singular_values(0) : 0.0;
  if (!(smax > 0.0)) {
    r.degenerate = true;
    return r;
  }
  const double cutoff = rank_tol * smax;
  double mass = 0.0;
  for (Index i = 0; i < r.singular_values.size(); ++i)
    if (r.singular_values(i) > cutoff) {
      ++r.rank;
      mass += r.singular_values(i);
    }
  double h = 0.0;
  for (Index i = 0; i < r.rank; ++i) {
    const double p = r.singular_values(i) / mass;
    h -= p * std::log2(p);
  }
  r.entropy = static_cast<double>(r.rank) / static_cast<double>(r.n_rank) * h;
  return r;
}

Vector hvp(const GradientFn& grad, const Vector& w, const Vector& v) {
  const double vn = v.norm();
  if (!(vn > 0.0)) throw ContractError("hvp: direction must be nonzero");
  const double h = 1e-3 * (1.0 + w.norm()) / vn;
  const Vector gp = grad(w + h * v);
  const Vector gm = grad(w - h * v);
  if (!gp.allFinite() || !gm.allFinite()) throw NumericalError("hvp: non-finite gradient");
  return (gp - gm) / (2.0 * h);
}

HessianReport hessian_spectrum(const GradientFn& grad, const Vector& w, const HessianOptions& opts) {
  if (opts.power_iters < 10) throw ContractError("hessian_spectrum: power_iters must be >= 10");
  if (opts.probes < 10) throw ContractError("hessian_spectrum: probes must be >= 10");
  const Index n = w.size();
  if (n == 0) throw ContractError("hessian_spectrum: empty parameter vector");
  HessianReport r;
  r.dim = n;
  std::mt19937_64 rng(opts.seed);

  std::normal_distribution<double> normal;
  Vector v(n);
  for (Index i = 0; i < n; ++i) v(i) = normal(rng);
  v.normalize();
  double lambda = 0.0;
  Vector hv;
  for (int it = 1; it <= opts.power_iters; ++it) {
    hv = hvp(grad, w, v);
    const double next = v.dot(hv);
    r.iterations = it;
    const bool settled = it > 1 && std::abs(next - lambda) <= opts.tolerance * std::abs(next);
    lambda = next;
    const double hn = hv.norm();
    if (!(hn > 0.0)) break;
    if (settled) {
      r.converged = true;
      break;
    }
    v = hv / hn;
  }
  r.max_eig = lambda;
  r.residual = std::abs(lambda) > 0.0 ? (hv - lambda * v).norm() / std::abs(lambda) : (hv - lambda * v).norm();

  std::bernoulli_distribution coin(0.5);
  double sum = 0.0, sum_sq = 0.0;
  for (int p = 0; p < opts.probes; ++p) {
    Vector z(n);
    for (Index i = 0; i < n; ++i) z(i) = coin(rng) ? 1.0 : -1.0;
    const double q = z.dot(hvp(grad, w, z)) / static_cast<double>(n);
    sum += q;
    sum_sq += q * q;
  }
  const double k = static_cast<double>(opts.probes);
  r.mean_eig = sum / k;
  r.mean_stderr = std::sqrt(std::max(0.0, sum_sq / k - r.mean_eig * r.mean_eig) / (k - 1.0));
  r.probes = opts.probes;
  return r;
}

Matrix feature_matrix(model::Model& model, const data::Dataset& ds, Index batch_size) {
  if (ds.size() == 0) throw DataError("feature_matrix: empty dataset");
  Matrix z(model.feature_dim(), ds.size());
  for (Index b = 0; b < ds.size(); b += batch_size) {
    const Index n = std::min(batch_size, ds.size() - b);
    std::vector<Index> rows(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) rows[static_cast<std::size_t>(i)] = b + i;
    const Tensor f = model.features(ds.batch(rows));
    z.middleCols(b, n) = f.matrix().transpose();
  }
  return z;
}

namespace {
bool is_network_param(const model::ParamRef& p) { return p.kind != model::ParamKind::QuantStep; }
}  // namespace

SurrogateLoss::SurrogateLoss(model::Model& model, const data::Dataset& ds) : model_(model), ds_(ds) {
  std::vector<Index> rows(static_cast<std::size_t>(ds.size()));
  for (Index i = 0; i < ds.size(); ++i) rows[static_cast<std::size_t>(i)] = i;
  input_ = ds.batch(rows);

  for (const auto& p : model_.parameters())
    if (is_network_param(p)) saved_.push_back(*p.value);
  model_.for_each_quantizer([&](quant::Quantizer& q, bool) { saved_modes_.push_back(q.mode()); });

  // Move onto the dequantized point.
  for (auto& layer : model_.layers())
    if (layer.weight_quant && layer.weight_quant->calibrated())
      layer.weight = quant::fake_quant(layer.weight, layer.weight_quant->params(), layer.weight_quant->spec());
  model_.for_each_quantizer([](quant::Quantizer& q, bool is_weight) {
    if (is_weight)
      q.set_mode(quant::Quantizer::Mode::Bypass);
    else if (q.calibrated())
      q.set_mode(quant::Quantizer::Mode::Clip);
  });

  Index n = 0;
  for (const auto& p : model_.parameters())
    if (is_network_param(p)) n += p.value->numel();
  w0_.resize(n);
  Index k = 0;
  for (const auto& p : model_.parameters())
    if (is_network_param(p)) {
      w0_.segment(k, p.value->numel()) = p.value->values.matrix();
      k += p.value->numel();
    }
}

SurrogateLoss::~SurrogateLoss() {
  std::size_t i = 0;
  for (const auto& p : model_.parameters())
    if (is_network_param(p)) *p.value = saved_[i++];
  std::size_t j = 0;
  model_.for_each_quantizer([&](quant::Quantizer& q, bool) { q.set_mode(saved_modes_[j++]); });
}

void SurrogateLoss::load(const Vector& w) {
  if (w.size() != w0_.size()) throw ShapeError("SurrogateLoss: parameter vector has the wrong length");
  Index k = 0;
  for (const auto& p : model_.parameters())
    if (is_network_param(p)) {
      p.value->values = w.segment(k, p.value->numel()).array();
      k += p.value->numel();
    }
}

double SurrogateLoss::loss(const Vector& w) {
  load(w);
  ad::Tape tape;
  const auto out = model_.forward(tape, input_, false);
  return losses::cross_entropy(out.logits, ds_.labels).item();
}

Vector SurrogateLoss::gradient(const Vector& w) {
  load(w);
  ad::Tape tape;
  const auto out = model_.forward(tape, input_, true);
  const ad::Var loss = losses::cross_entropy(out.logits, ds_.labels);
  const ad::Gradients g = tape.backward(loss);
  Vector grad(w0_.size());
  const auto params = model_.parameters();
  Index k = 0;
  for (std::size_t i = 0; i < params.size(); ++i)
    if (is_network_param(params[i])) {
      grad.segment(k, params[i].value->numel()) = g[out.params[i]].values.matrix();
      k += params[i].value->numel();
    }
  return grad;
}

GradientFn SurrogateLoss::gradient_fn() {
  return [this](const Vector& w) { return gradient(w); };
}

}  // namespace mecq::diag
