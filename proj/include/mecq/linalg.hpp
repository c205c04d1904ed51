#pragma once

// Dense symmetric linear algebra used by the coding-length and collapse
// code paths. Everything is templated on the Eigen scalar so the oracle
// paths can run in double while callers are free to pass float data.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mecq/errors.hpp"

namespace mecq {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrix = Mat<double>;
using Vector = Vec<double>;

template <typename Scalar>
struct EigResult {
  Vec<Scalar> eigenvalues;   // descending
  Mat<Scalar> eigenvectors;  // column i pairs with eigenvalues(i)
};

namespace linalg {

inline constexpr double kJacobiTolerance = 1e-12;
inline constexpr int kJacobiMaxSweeps = 100;
inline constexpr double kSymmetryTolerance = 1e-12;
inline constexpr double kPsdRejectTolerance = 1e-6;

template <typename Derived>
void require_square(const Eigen::MatrixBase<Derived>& m, const char* what) {
  if (m.rows() != m.cols()) {
    std::ostringstream os;
    os << what << ": expected a square matrix, got " << m.rows() << "x" << m.cols();
    throw ShapeError(os.str());
  }
}

template <typename Derived>
void require_symmetric(const Eigen::MatrixBase<Derived>& m, const char* what) {
  require_square(m, what);
  using Scalar = typename Derived::Scalar;
  const Scalar scale = std::max<Scalar>(Scalar(1), m.cwiseAbs().maxCoeff());
  const Scalar asym = (m - m.transpose()).cwiseAbs().maxCoeff();
  if (asym > Scalar(kSymmetryTolerance) * scale) {
    std::ostringstream os;
    os << what << ": matrix is not symmetric (max |M - M^T| = " << asym << ")";
    throw ShapeError(os.str());
  }
}

// Cyclic Jacobi eigensolver for symmetric matrices. Sweeps until the
// off-diagonal Frobenius norm drops below kJacobiTolerance * ||M||_F.
template <typename Derived>
EigResult<typename Derived::Scalar> sym_eig(const Eigen::MatrixBase<Derived>& input) {
  using Scalar = typename Derived::Scalar;
  require_symmetric(input, "sym_eig");
  const Eigen::Index n = input.rows();
  Mat<Scalar> a = (input + input.transpose()) / Scalar(2);
  Mat<Scalar> v = Mat<Scalar>::Identity(n, n);

  const Scalar total = a.norm();
  const Scalar threshold = Scalar(kJacobiTolerance) * (total > Scalar(0) ? total : Scalar(1));

  auto off_norm = [&]() {
    Scalar s(0);
    for (Eigen::Index j = 0; j < n; ++j)
      for (Eigen::Index i = 0; i < n; ++i)
        if (i != j) s += a(i, j) * a(i, j);
    return std::sqrt(s);
  };

  Scalar off = off_norm();
  int sweep = 0;
  while (off > threshold) {
    if (sweep == kJacobiMaxSweeps) {
      std::ostringstream os;
      os << "sym_eig: no convergence after " << kJacobiMaxSweeps
         << " sweeps, off-diagonal residual " << off;
      throw NumericalError(os.str());
    }
    for (Eigen::Index p = 0; p < n - 1; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const Scalar apq = a(p, q);
        if (apq == Scalar(0)) continue;
        const Scalar theta = (a(q, q) - a(p, p)) / (Scalar(2) * apq);
        const Scalar t = (theta >= Scalar(0) ? Scalar(1) : Scalar(-1)) /
                         (std::abs(theta) + std::sqrt(theta * theta + Scalar(1)));
        const Scalar c = Scalar(1) / std::sqrt(t * t + Scalar(1));
        const Scalar s = t * c;
        for (Eigen::Index k = 0; k < n; ++k) {
          const Scalar akp = a(k, p);
          const Scalar akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (Eigen::Index k = 0; k < n; ++k) {
          const Scalar apk = a(p, k);
          const Scalar aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = Scalar(0);
        a(q, p) = Scalar(0);
        for (Eigen::Index k = 0; k < n; ++k) {
          const Scalar vkp = v(k, p);
          const Scalar vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
    ++sweep;
    off = off_norm();
  }

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index(0));
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index i, Eigen::Index j) { return a(i, i) > a(j, j); });

  EigResult<Scalar> out;
  out.eigenvalues.resize(n);
  out.eigenvectors.resize(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    out.eigenvalues(i) = a(order[i], order[i]);
    out.eigenvectors.col(i) = v.col(order[i]);
  }
  return out;
}

template <typename Derived>
Vec<typename Derived::Scalar> sym_eigenvalues(const Eigen::MatrixBase<Derived>& m) {
  return sym_eig(m).eigenvalues;
}

// scale * Z^T Z for Z with features in rows and samples in columns.
template <typename Derived>
Mat<typename Derived::Scalar> gram(const Eigen::MatrixBase<Derived>& z,
                                   typename Derived::Scalar scale) {
  using Scalar = typename Derived::Scalar;
  if (!(scale > Scalar(0))) throw ConfigError("gram: scale must be positive");
  Mat<Scalar> g = scale * (z.transpose() * z);
  return (g + g.transpose()) / Scalar(2);
}

// Eigenvalues of a PSD matrix with round-off negatives clamped to zero.
template <typename Derived>
Vec<typename Derived::Scalar> psd_eigenvalues(const Eigen::MatrixBase<Derived>& g) {
  using Scalar = typename Derived::Scalar;
  Vec<Scalar> ev = sym_eigenvalues(g);
  const Scalar scale = std::max<Scalar>(Scalar(1), ev.size() ? std::abs(ev(0)) : Scalar(1));
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev(i) < -Scalar(kPsdRejectTolerance) * scale) {
      std::ostringstream os;
      os << "logdet_plus_identity: matrix is not PSD (eigenvalue " << ev(i) << ")";
      throw NotPsdError(os.str());
    }
    if (ev(i) < Scalar(0)) ev(i) = Scalar(0);
  }
  return ev;
}

// log det(I + G) = sum_i ln(1 + lambda_i(G)).
template <typename Derived>
typename Derived::Scalar logdet_plus_identity(const Eigen::MatrixBase<Derived>& g) {
  using Scalar = typename Derived::Scalar;
  const Vec<Scalar> ev = psd_eigenvalues(g);
  Scalar acc(0);
  for (Eigen::Index i = 0; i < ev.size(); ++i) acc += std::log1p(ev(i));
  return acc;
}

template <typename Derived>
typename Derived::Scalar spectral_norm(const Eigen::MatrixBase<Derived>& m) {
  const auto ev = sym_eigenvalues(m);
  return ev.size() ? ev.cwiseAbs().maxCoeff() : typename Derived::Scalar(0);
}

// Tr(sum_k coeffs[k] * G^k); coeffs[0] multiplies the identity.
template <typename Derived, typename CoeffRange>
typename Derived::Scalar poly_trace(const Eigen::MatrixBase<Derived>& g, const CoeffRange& coeffs) {
  using Scalar = typename Derived::Scalar;
  require_square(g, "poly_trace");
  const Eigen::Index n = g.rows();
  Scalar acc(0);
  Mat<Scalar> power = Mat<Scalar>::Identity(n, n);
  std::size_t k = 0;
  for (auto c : coeffs) {
    if (k > 0) power = power * g;
    if (c != 0) acc += Scalar(c) * power.trace();
    ++k;
  }
  return acc;
}

}  // namespace linalg
}  // namespace mecq
