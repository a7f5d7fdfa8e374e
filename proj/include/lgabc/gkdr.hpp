#pragma once

// Gradient-based kernel dimension reduction and its locally weighted variant.
//
// For a training set (s_i, theta_i), i = 1..n, with Gram matrices G_S, G_Theta
// and A = (G_S + n eps_n I)^{-1}, the per-anchor gradient covariance is
//
//   M(s_i) = grad_k(s_i)^T  A G_Theta A  grad_k(s_i)          (m x m)
//
// where row j of grad_k(s_i) is d k_S(s_j, s) / ds at s = s_i. The local
// estimator averages w_i M(s_i) over anchors with triweight weights w_i
// concentrated around the observation. The projection B collects the leading
// eigenvectors of the average.

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <optional>
#include <ostream>
#include <vector>

#include "lgabc/errors.hpp"
#include "lgabc/kernel_linalg.hpp"
#include "lgabc/parallel.hpp"
#include "lgabc/text_io.hpp"

namespace lgabc {

/// Column-orthonormal m x d matrix mapping initial summaries to z = B^T s.
class ProjectionMatrix {
 public:
  ProjectionMatrix() = default;
  ProjectionMatrix(Matrix b, KernelParams kernel) : b_(std::move(b)), kernel_(kernel) {
    if (b_.cols() < 1 || b_.cols() > b_.rows()) throw InvalidArgument("projection: need 1 <= d <= m");
    const double err = (b_.transpose() * b_ - Matrix::Identity(b_.cols(), b_.cols())).cwiseAbs().maxCoeff();
    if (err > 1e-10) throw InvalidArgument("projection: columns are not orthonormal");
  }

  Index source_dim() const { return b_.rows(); }
  Index target_dim() const { return b_.cols(); }
  const Matrix& matrix() const { return b_; }
  const KernelParams& kernel() const { return kernel_; }

 private:
  Matrix b_;
  KernelParams kernel_;
};

inline Vector project(const ProjectionMatrix& b, const VectorRef& s) {
  if (s.size() != b.source_dim()) throw InvalidArgument("project: dimension mismatch");
  return b.matrix().transpose() * s;
}

inline void save_projection(std::ostream& out, const ProjectionMatrix& p) {
  out << "lgabc-projection 1\n";
  out << p.source_dim() << ' ' << p.target_dim() << '\n';
  out << io::format_double(p.kernel().sigma_s) << ' ' << io::format_double(p.kernel().sigma_theta) << ' '
      << io::format_double(p.kernel().eps_n) << '\n';
  io::write_matrix(out, p.matrix());
}

inline ProjectionMatrix load_projection(std::istream& in) {
  io::expect(in, "lgabc-projection");
  if (io::read_long(in) != 1) throw InvalidArgument("projection file: unsupported version");
  const long m = io::read_long(in);
  const long d = io::read_long(in);
  if (m < 1 || d < 1 || d > m) throw InvalidArgument("projection file: bad dimensions");
  KernelParams kp;
  kp.sigma_s = io::read_double(in);
  kp.sigma_theta = io::read_double(in);
  kp.eps_n = io::read_double(in);
  Matrix b = io::read_matrix(in, m, d);
  return ProjectionMatrix(std::move(b), kp);
}

struct GkdrConfig {
  KernelParams kernel;
  std::optional<Index> target_dim;  ///< nullopt selects the dimension by the 70% eigenvalue-mass rule
  double weight_quantile = 0.10;     ///< fraction of training points with nonzero triweight weight
  std::optional<Index> response_index;  ///< single parameter column for separated reduction

  void validate() const {
    kernel.validate();
    if (!(weight_quantile > 0.0 && weight_quantile <= 1.0)) {
      throw InvalidArgument("weight_quantile must lie in (0, 1]");
    }
    if (target_dim && *target_dim < 1) throw InvalidArgument("target_dim must be >= 1");
  }
};

/// Standardized summaries and parameters with nonnegative anchor weights.
struct WeightedTrainingSet {
  Matrix summaries;   ///< n x m
  Matrix parameters;  ///< n x p
  Vector weights;     ///< n, not normalized

  Index size() const { return summaries.rows(); }

  void validate() const {
    if (summaries.rows() != parameters.rows() || summaries.rows() != weights.size()) {
      throw InvalidArgument("training set: row counts disagree");
    }
    if ((weights.array() < 0.0).any() || !weights.allFinite()) {
      throw InvalidArgument("training set: weights must be finite and nonnegative");
    }
    if (!(weights.array() > 0.0).any()) {
      throw InvalidArgument("no training point inside weighting bandwidth");
    }
  }
};

/// Triweight weight (1 - u^2)^3 1{u < 1}, u = ||x - x_obs||^2 / ||x_th - x_obs||^2.
/// The normalization constant is omitted.
inline double triweight(const VectorRef& x, const VectorRef& x_obs, const VectorRef& x_th) {
  if (x.size() != x_obs.size() || x_th.size() != x_obs.size()) throw InvalidArgument("triweight: dimension mismatch");
  const double denom = (x_th - x_obs).squaredNorm();
  if (!(denom > 0.0)) throw InvalidArgument("triweight: threshold coincides with the observation");
  const double u = (x - x_obs).squaredNorm() / denom;
  if (u >= 1.0) return 0.0;
  const double t = 1.0 - u * u;
  return t * t * t;
}

/// Same weight expressed through squared distances.
inline double triweight_from_sq(double dist_sq, double threshold_sq) {
  const double u = dist_sq / threshold_sq;
  if (u >= 1.0) return 0.0;
  const double t = 1.0 - u * u;
  return t * t * t;
}

/// Triweight weights around x_obs. The threshold radius is the k-th order
/// statistic (0-based) of the distances with k = ceil(quantile * n), clamped to
/// the farthest point, so about quantile * n points receive positive weight.
inline Vector compute_weights(const MatrixRef& summaries, const VectorRef& x_obs, double weight_quantile) {
  const Index n = summaries.rows();
  if (n < 1) throw InvalidArgument("compute_weights: empty training set");
  if (summaries.cols() != x_obs.size()) throw InvalidArgument("compute_weights: dimension mismatch");
  if (!(weight_quantile > 0.0 && weight_quantile <= 1.0)) {
    throw InvalidArgument("weight_quantile must lie in (0, 1]");
  }
  Vector dist_sq(n);
  for (Index i = 0; i < n; ++i) dist_sq(i) = (summaries.row(i).transpose() - x_obs).squaredNorm();

  std::vector<double> sorted(dist_sq.data(), dist_sq.data() + n);
  std::sort(sorted.begin(), sorted.end());
  const auto k = std::min<Index>(static_cast<Index>(std::ceil(weight_quantile * static_cast<double>(n) - 1e-9)), n - 1);
  double threshold_sq = sorted[static_cast<std::size_t>(k)];
  if (!(threshold_sq > 0.0)) {
    // Everything up to the quantile sits on the observation; widen to the
    // first strictly positive distance.
    auto it = std::upper_bound(sorted.begin(), sorted.end(), 0.0);
    if (it == sorted.end()) return Vector::Ones(n);
    threshold_sq = *it;
  }
  Vector w(n);
  for (Index i = 0; i < n; ++i) w(i) = triweight_from_sq(dist_sq(i), threshold_sq);
  return w;
}

/// Smallest d whose leading eigenvalues hold at least 70% of the total mass.
/// Tiny negative eigenvalues are clamped to zero.
inline Index choose_dimension(const VectorRef& eigenvalues, double mass = 0.70) {
  if (eigenvalues.size() == 0) throw InvalidArgument("choose_dimension: empty spectrum");
  Vector ev = eigenvalues.cwiseMax(0.0);
  const double total = ev.sum();
  if (!(total > 0.0)) throw InvalidArgument("choose_dimension: all-zero spectrum");
  const double target = mass * total * (1.0 - 1e-12);
  double cum = 0.0;
  for (Index d = 0; d < ev.size(); ++d) {
    cum += ev(d);
    if (cum >= target) return d + 1;
  }
  return ev.size();
}

/// Holds the Gram matrices, the factorization of G_S + n eps_n I and the
/// anchor-independent middle factor A G_Theta A for one training set, so that
/// per-anchor matrices and weighted averages for many observations reuse them.
class GradientCovariance {
 public:
  /// `summaries` must already be standardized. `responses` are the parameter
  /// columns entering G_Theta.
  GradientCovariance(Matrix summaries, const MatrixRef& responses, const KernelParams& kp)
      : summaries_(std::move(summaries)), kernel_(kp) {
    kp.validate();
    const Index n = summaries_.rows();
    if (n < 1) throw InvalidArgument("gradient covariance: empty training set");
    if (responses.rows() != n) throw InvalidArgument("gradient covariance: row counts disagree");
    const SymmetricMatrix gs = gram_matrix(summaries_, kp.sigma_s);
    const SymmetricMatrix gt = gram_matrix(responses, kp.sigma_theta);
    const RegularizedFactorization fact(gs, static_cast<double>(n) * kp.eps_n);
    const Matrix left = fact.solve(gt.dense());  // A G_Theta
    const Matrix both = fact.solve(left.transpose());  // A (A G_Theta)^T = A G_Theta A
    middle_ = SymmetricMatrix::symmetrized(both).dense();
  }

  Index size() const { return summaries_.rows(); }
  Index dim() const { return summaries_.cols(); }
  const KernelParams& kernel() const { return kernel_; }
  const Matrix& summaries() const { return summaries_; }

  /// M(s_i) for a single anchor.
  SymmetricMatrix local_gradient_matrix(Index i) const {
    const Matrix grad = kernel_gradient(summaries_, i, kernel_.sigma_s);
    return SymmetricMatrix::symmetrized(grad.transpose() * middle_ * grad);
  }

  /// (1 / #positive) * sum_i w_i M(s_i), zero-weight anchors skipped.
  /// Anchors are processed in fixed batches and summed in index order, so the
  /// result does not depend on `threads`.
  SymmetricMatrix weighted_average(const VectorRef& weights, int threads = 1) const {
    if (weights.size() != size()) throw InvalidArgument("weighted_average: weight count mismatch");
    std::vector<Index> anchors;
    for (Index i = 0; i < weights.size(); ++i) {
      if (weights(i) < 0.0 || !std::isfinite(weights(i))) throw InvalidArgument("weights must be finite and nonnegative");
      if (weights(i) > 0.0) anchors.push_back(i);
    }
    if (anchors.empty()) throw InvalidArgument("no training point inside weighting bandwidth");

    const Index m = dim();
    const Index n = size();
    const std::size_t batches = (anchors.size() + kBatch - 1) / kBatch;
    std::vector<Matrix> partial(batches);
    const double inv = 1.0 / (kernel_.sigma_s * kernel_.sigma_s);
    parallel_for(batches, threads, [&](std::size_t b) {
      const std::size_t lo = b * kBatch;
      const std::size_t hi = std::min(anchors.size(), lo + kBatch);
      const Index count = static_cast<Index>(hi - lo);
      Matrix grads(n, count * m);
      for (Index a = 0; a < count; ++a) {
        const Index i = anchors[lo + static_cast<std::size_t>(a)];
        auto block = grads.middleCols(a * m, m);
        block = summaries_.rowwise() - summaries_.row(i);
        for (Index j = 0; j < n; ++j) {
          const double k = std::exp(-block.row(j).squaredNorm() * inv);
          block.row(j) *= 2.0 * inv * k;
        }
      }
      const Matrix mid_grads = middle_ * grads;
      Matrix acc = Matrix::Zero(m, m);
      for (Index a = 0; a < count; ++a) {
        const Index i = anchors[lo + static_cast<std::size_t>(a)];
        acc.noalias() += weights(i) * (grads.middleCols(a * m, m).transpose() * mid_grads.middleCols(a * m, m));
      }
      partial[b] = std::move(acc);
    });
    Matrix total = Matrix::Zero(m, m);
    for (const Matrix& p : partial) total += p;
    total /= static_cast<double>(anchors.size());
    return SymmetricMatrix::symmetrized(total);
  }

 private:
  static constexpr std::size_t kBatch = 16;

  Matrix summaries_;
  KernelParams kernel_;
  Matrix middle_;  // A G_Theta A
};

struct ProjectionEstimate {
  ProjectionMatrix projection;
  Vector eigenvalues;  ///< full spectrum of the averaged matrix, descending
};

/// Eigen-analysis of an averaged gradient covariance.
inline ProjectionEstimate projection_from_average(const SymmetricMatrix& avg, std::optional<Index> target_dim,
                                                  const KernelParams& kp) {
  const EigenPairs eig = sym_eig(avg);
  const Index d = target_dim ? *target_dim : choose_dimension(eig.values);
  if (d < 1 || d > avg.dim()) throw InvalidArgument("target dimension out of range");
  return {ProjectionMatrix(eig.vectors.leftCols(d), kp), eig.values};
}

inline ProjectionEstimate estimate_projection(const GradientCovariance& gc, const VectorRef& weights,
                                              std::optional<Index> target_dim, int threads = 1) {
  return projection_from_average(gc.weighted_average(weights, threads), target_dim, gc.kernel());
}

inline Matrix response_columns(const MatrixRef& parameters, std::optional<Index> response_index) {
  if (!response_index) return parameters;
  if (*response_index < 0 || *response_index >= parameters.cols()) {
    throw InvalidArgument("response index out of range");
  }
  return parameters.col(*response_index);
}

/// LGKDR (plain GKDR when all weights are equal).
inline ProjectionEstimate estimate_projection(const WeightedTrainingSet& ts, const GkdrConfig& cfg, int threads = 1) {
  ts.validate();
  cfg.validate();
  if (ts.size() < 2) throw InvalidArgument("estimate_projection: need at least 2 training points");
  const GradientCovariance gc(ts.summaries, response_columns(ts.parameters, cfg.response_index), cfg.kernel);
  return estimate_projection(gc, ts.weights, cfg.target_dim, threads);
}

/// Separated reduction: G_Theta is built from parameter column j alone.
inline ProjectionEstimate estimate_projection_separated(const WeightedTrainingSet& ts, GkdrConfig cfg, Index j,
                                                        int threads = 1) {
  if (j < 0 || j >= ts.parameters.cols()) throw InvalidArgument("estimate_projection_separated: index out of range");
  cfg.response_index = j;
  return estimate_projection(ts, cfg, threads);
}

}  // namespace lgabc
