#pragma once

// Gaussian kernels, Gram matrices, kernel gradients, regularized symmetric
// solves, symmetric eigendecomposition and feature standardization.
//
// Kernel convention: k(a, b) = exp(-||a - b||^2 / sigma^2). The denominator is
// sigma^2, NOT 2 sigma^2. Bandwidths chosen for the other convention must be
// multiplied by sqrt(2) before use here.

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include "lgabc/errors.hpp"

namespace lgabc {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;
using VectorRef = Eigen::Ref<const Vector>;
using MatrixRef = Eigen::Ref<const Matrix>;

struct KernelParams {
  double sigma_s = 1.0;      ///< summary-space bandwidth (standardized units)
  double sigma_theta = 1.0;  ///< parameter-space bandwidth
  double eps_n = 1e-3;       ///< regularization coefficient; the ridge is n * eps_n

  void validate() const {
    if (!(sigma_s > 0.0) || !(sigma_theta > 0.0) || !(eps_n > 0.0)) {
      throw InvalidArgument("kernel parameters must be strictly positive");
    }
  }
  friend bool operator==(const KernelParams&, const KernelParams&) = default;
};

/// Dense real symmetric matrix. Symmetry holds exactly by construction: every
/// factory mirrors the lower triangle into the upper one.
class SymmetricMatrix {
 public:
  SymmetricMatrix() = default;
  explicit SymmetricMatrix(Index dim) : data_(Matrix::Zero(dim, dim)) {}

  /// Takes the lower triangle of `m` and mirrors it.
  static SymmetricMatrix from_lower(Matrix m) {
    if (m.rows() != m.cols()) throw InvalidArgument("symmetric matrix must be square");
    m.template triangularView<Eigen::StrictlyUpper>() = m.transpose();
    SymmetricMatrix out;
    out.data_ = std::move(m);
    return out;
  }

  /// (M + M^T) / 2, absorbing floating-point asymmetry.
  static SymmetricMatrix symmetrized(const Matrix& m) {
    if (m.rows() != m.cols()) throw InvalidArgument("symmetric matrix must be square");
    Matrix s = 0.5 * (m + m.transpose());
    return from_lower(std::move(s));
  }

  Index dim() const { return data_.rows(); }
  double operator()(Index i, Index j) const { return data_(i, j); }
  const Matrix& dense() const { return data_; }

  /// PSD up to the relative tolerance: min eigenvalue >= -tol * max(|eigenvalue|).
  bool is_psd(double tol = 1e-8) const {
    if (dim() == 0) return true;
    Eigen::SelfAdjointEigenSolver<Matrix> es(data_, Eigen::EigenvaluesOnly);
    const Vector& ev = es.eigenvalues();
    const double scale = std::max(std::abs(ev(0)), std::abs(ev(ev.size() - 1)));
    return ev(0) >= -tol * scale;
  }

 private:
  Matrix data_;
};

inline void check_bandwidth(double sigma) {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw InvalidArgument("bandwidth must be positive and finite");
}

inline double gaussian_kernel(const VectorRef& a, const VectorRef& b, double sigma) {
  check_bandwidth(sigma);
  if (a.size() != b.size()) throw InvalidArgument("gaussian_kernel: dimension mismatch");
  return std::exp(-(a - b).squaredNorm() / (sigma * sigma));
}

/// Gram matrix over the rows of `points`.
inline SymmetricMatrix gram_matrix(const MatrixRef& points, double sigma) {
  check_bandwidth(sigma);
  const Index n = points.rows();
  if (n == 0) throw InvalidArgument("gram_matrix: empty point set");
  const double inv = 1.0 / (sigma * sigma);
  Matrix g(n, n);
  for (Index j = 0; j < n; ++j) {
    g(j, j) = 1.0;
    for (Index i = j + 1; i < n; ++i) {
      g(i, j) = std::exp(-(points.row(i) - points.row(j)).squaredNorm() * inv);
    }
  }
  return SymmetricMatrix::from_lower(std::move(g));
}

/// Row j is the gradient of k(s_j, s) with respect to s, evaluated at s = s_i:
/// (2 / sigma^2) (s_j - s_i) k(s_j, s_i).
inline Matrix kernel_gradient(const MatrixRef& points, Index query_index, double sigma) {
  check_bandwidth(sigma);
  if (query_index < 0 || query_index >= points.rows()) {
    throw InvalidArgument("kernel_gradient: query index out of range");
  }
  const double inv = 1.0 / (sigma * sigma);
  Matrix diff = points.rowwise() - points.row(query_index);
  for (Index j = 0; j < diff.rows(); ++j) {
    const double k = std::exp(-diff.row(j).squaredNorm() * inv);
    diff.row(j) *= 2.0 * inv * k;
  }
  return diff;
}

/// Cholesky factorization of G + ridge * I, reusable for many right-hand sides.
class RegularizedFactorization {
 public:
  RegularizedFactorization(const SymmetricMatrix& g, double ridge) : ridge_(ridge) {
    if (!(ridge > 0.0)) throw InvalidArgument("regularized_solve: ridge must be positive");
    Matrix a = g.dense();
    a.diagonal().array() += ridge;
    llt_.compute(a);
    if (llt_.info() != Eigen::Success) {
      const long pivot = failing_pivot(a);
      std::ostringstream msg;
      msg << "Cholesky factorization failed at pivot " << pivot
          << " (matrix not positive definite beyond tolerance)";
      throw NumericalError(msg.str(), pivot);
    }
  }

  Index dim() const { return llt_.matrixLLT().rows(); }
  double ridge() const { return ridge_; }
  const Eigen::LLT<Matrix>& llt() const { return llt_; }

  Matrix solve(const MatrixRef& rhs) const {
    if (rhs.rows() != dim()) throw InvalidArgument("regularized_solve: rhs row count mismatch");
    return llt_.solve(rhs);
  }

 private:
  // Unblocked Cholesky run only on the failure path to name the pivot.
  static long failing_pivot(Matrix a) {
    const Index n = a.rows();
    for (Index k = 0; k < n; ++k) {
      double d = a(k, k);
      for (Index p = 0; p < k; ++p) d -= a(k, p) * a(k, p);
      if (!(d > 0.0)) return static_cast<long>(k);
      const double l = std::sqrt(d);
      a(k, k) = l;
      for (Index i = k + 1; i < n; ++i) {
        double s = a(i, k);
        for (Index p = 0; p < k; ++p) s -= a(i, p) * a(k, p);
        a(i, k) = s / l;
      }
    }
    return -1;
  }

  Eigen::LLT<Matrix> llt_;
  double ridge_;
};

/// Solves (G + ridge I) X = rhs.
inline Matrix regularized_solve(const SymmetricMatrix& g, double ridge, const MatrixRef& rhs) {
  return RegularizedFactorization(g, ridge).solve(rhs);
}

struct EigenPairs {
  Vector values;   ///< descending
  Matrix vectors;  ///< column k pairs with values(k)
};

/// Flip each column so its largest-magnitude entry is positive (first index wins ties).
inline void fix_eigenvector_signs(Matrix& v) {
  for (Index c = 0; c < v.cols(); ++c) {
    Index arg = 0;
    double best = -1.0;
    for (Index r = 0; r < v.rows(); ++r) {
      if (std::abs(v(r, c)) > best) {
        best = std::abs(v(r, c));
        arg = r;
      }
    }
    if (v(arg, c) < 0.0) v.col(c) = -v.col(c);
  }
}

/// Full spectrum, descending, with deterministic eigenvector signs.
inline EigenPairs sym_eig(const SymmetricMatrix& m) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(m.dense());
  if (es.info() != Eigen::Success) throw NumericalError("symmetric eigensolver did not converge");
  EigenPairs out;
  out.values = es.eigenvalues().reverse();
  out.vectors = es.eigenvectors().rowwise().reverse();
  fix_eigenvector_signs(out.vectors);
  return out;
}

/// Top-d eigenpairs, eigenvalues descending.
inline EigenPairs sym_eig_top_d(const SymmetricMatrix& m, Index d) {
  if (d < 1 || d > m.dim()) throw InvalidArgument("sym_eig_top_d: d out of range");
  EigenPairs all = sym_eig(m);
  return {all.values.head(d), all.vectors.leftCols(d)};
}

/// Per-coordinate affine standardization fitted on a point set (rows).
class Standardizer {
 public:
  Standardizer() = default;
  Standardizer(Vector means, Vector scales) : means_(std::move(means)), scales_(std::move(scales)) {
    if (means_.size() != scales_.size()) throw InvalidArgument("standardizer: size mismatch");
    if ((scales_.array() <= 0.0).any()) throw InvalidArgument("standardizer: scales must be positive");
  }

  /// Population mean and standard deviation per column. Zero-variance columns
  /// get scale 1, so they map to 0.
  static Standardizer fit(const MatrixRef& points) {
    if (points.rows() < 2) throw InvalidArgument("standardizer_fit: need at least 2 points");
    const double n = static_cast<double>(points.rows());
    Vector means = points.colwise().sum().transpose() / n;
    Vector scales(points.cols());
    for (Index c = 0; c < points.cols(); ++c) {
      const double var = (points.col(c).array() - means(c)).square().sum() / n;
      const double sd = std::sqrt(var);
      const double floor = 1e-12 * std::max(1.0, std::abs(means(c)));
      scales(c) = (sd > floor && std::isfinite(sd)) ? sd : 1.0;
    }
    return Standardizer(std::move(means), std::move(scales));
  }

  Index dim() const { return means_.size(); }
  const Vector& means() const { return means_; }
  const Vector& scales() const { return scales_; }

  Vector apply(const VectorRef& x) const {
    if (x.size() != dim()) throw InvalidArgument("standardizer_apply: dimension mismatch");
    return ((x - means_).array() / scales_.array()).matrix();
  }

  Matrix apply_rows(const MatrixRef& x) const {
    if (x.cols() != dim()) throw InvalidArgument("standardizer_apply: dimension mismatch");
    return ((x.rowwise() - means_.transpose()).array().rowwise() / scales_.transpose().array()).matrix();
  }

  Vector invert(const VectorRef& z) const {
    if (z.size() != dim()) throw InvalidArgument("standardizer_invert: dimension mismatch");
    return (z.array() * scales_.array()).matrix() + means_;
  }

 private:
  Vector means_;
  Vector scales_;
};

inline Standardizer standardizer_fit(const MatrixRef& points) { return Standardizer::fit(points); }
inline Vector standardizer_apply(const Standardizer& s, const VectorRef& x) { return s.apply(x); }

}  // namespace lgabc
