#pragma once

// Summary-statistic constructors behind one interface: identity passthrough,
// linear posterior-mean regression (semi-automatic ABC), LGKDR projections and
// per-parameter separated composites.

#include <algorithm>
#include <cmath>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "lgabc/errors.hpp"
#include "lgabc/gkdr.hpp"
#include "lgabc/kernel_linalg.hpp"
#include "lgabc/text_io.hpp"

namespace lgabc {

/// Paired prior draws and raw initial summaries.
struct TrainingSet {
  Matrix summaries;   ///< n x m, unstandardized
  Matrix parameters;  ///< n x p

  Index size() const { return summaries.rows(); }
  void validate() const {
    if (summaries.rows() != parameters.rows()) throw InvalidArgument("training set: row counts disagree");
    if (summaries.rows() < 2) throw InvalidArgument("training set: need at least 2 rows");
  }
};

/// Least-squares coefficients of each response on [1, x].
struct RegressionFit {
  Matrix coefficients;  ///< (m + 1) x p, intercept in row 0
  std::vector<Index> deficient_columns;  ///< design columns (0 = intercept) found rank deficient
  bool ridge_fallback = false;

  Vector predict(const VectorRef& x) const {
    if (x.size() + 1 != coefficients.rows()) throw InvalidArgument("regression predict: dimension mismatch");
    return coefficients.row(0).transpose() + coefficients.bottomRows(x.size()).transpose() * x;
  }
};

/// (Weighted) least squares of y on [1, x]. A rank-deficient design is solved
/// with a 1e-8 ridge and the offending columns are reported in the fit.
inline RegressionFit fit_least_squares(const MatrixRef& x, const MatrixRef& y,
                                       const std::optional<Vector>& weights = std::nullopt) {
  const Index n = x.rows();
  const Index m = x.cols();
  if (y.rows() != n) throw InvalidArgument("least squares: row counts disagree");
  if (weights && weights->size() != n) throw InvalidArgument("least squares: weight count mismatch");
  Matrix design(n, m + 1);
  design.col(0).setOnes();
  design.rightCols(m) = x;
  Matrix rhs = y;
  if (weights) {
    if ((weights->array() < 0.0).any()) throw InvalidArgument("least squares: negative weight");
    const Vector sw = weights->array().sqrt().matrix();
    design = sw.asDiagonal() * design;
    rhs = sw.asDiagonal() * rhs;
  }
  RegressionFit fit;
  Eigen::ColPivHouseholderQR<Matrix> qr(design);
  qr.setThreshold(1e-12);
  if (qr.rank() == m + 1) {
    fit.coefficients = qr.solve(rhs);
    return fit;
  }
  const auto& perm = qr.colsPermutation().indices();
  for (Index k = qr.rank(); k < m + 1; ++k) fit.deficient_columns.push_back(perm(k));
  std::sort(fit.deficient_columns.begin(), fit.deficient_columns.end());
  Matrix normal = design.transpose() * design;
  normal.diagonal().array() += 1e-8;
  fit.coefficients = normal.ldlt().solve(design.transpose() * rhs);
  fit.ridge_fallback = true;
  return fit;
}

/// A fitted, immutable transform from raw initial summaries to the summary
/// vector used for distances.
class SummaryConstructor {
 public:
  enum class Kind { identity, linear_posterior_mean, lgkdr, separated_composite };

  static SummaryConstructor identity(Standardizer s) {
    SummaryConstructor c(Kind::identity);
    c.input_ = std::move(s);
    return c;
  }

  /// `regression` acts on standardized inputs; `output` rescales the fitted
  /// posterior means to unit-variance coordinates for distance computation.
  static SummaryConstructor linear(Standardizer s, RegressionFit regression, Standardizer output) {
    SummaryConstructor c(Kind::linear_posterior_mean);
    if (regression.coefficients.rows() != s.dim() + 1 || regression.coefficients.cols() != output.dim()) {
      throw InvalidArgument("linear constructor: inconsistent dimensions");
    }
    c.input_ = std::move(s);
    c.regression_ = std::move(regression);
    c.output_ = std::move(output);
    return c;
  }

  static SummaryConstructor lgkdr(Standardizer s, ProjectionMatrix b, Vector eigenvalues,
                                  std::optional<Index> response_index) {
    SummaryConstructor c(Kind::lgkdr);
    if (b.source_dim() != s.dim()) throw InvalidArgument("lgkdr constructor: inconsistent dimensions");
    c.input_ = std::move(s);
    c.projection_ = std::move(b);
    c.eigenvalues_ = std::move(eigenvalues);
    c.response_index_ = response_index;
    return c;
  }

  static SummaryConstructor composite(std::vector<SummaryConstructor> children, std::vector<Index> focus) {
    if (children.empty() || children.size() != focus.size()) throw InvalidArgument("composite: bad child list");
    SummaryConstructor c(Kind::separated_composite);
    c.children_ = std::move(children);
    c.focus_ = std::move(focus);
    return c;
  }

  Kind kind() const { return kind_; }

  Index input_dim() const { return kind_ == Kind::separated_composite ? children_.front().input_dim() : input_.dim(); }

  Index output_dim() const {
    switch (kind_) {
      case Kind::identity: return input_.dim();
      case Kind::linear_posterior_mean: return output_.dim();
      case Kind::lgkdr: return projection_.target_dim();
      case Kind::separated_composite: {
        Index d = 0;
        for (const auto& ch : children_) d += ch.output_dim();
        return d;
      }
    }
    return 0;
  }

  Vector transform(const VectorRef& raw) const {
    switch (kind_) {
      case Kind::identity: return input_.apply(raw);
      case Kind::linear_posterior_mean: return output_.apply(regression_.predict(input_.apply(raw)));
      case Kind::lgkdr: return project(projection_, input_.apply(raw));
      case Kind::separated_composite: {
        Vector out(output_dim());
        Index at = 0;
        for (const auto& ch : children_) {
          const Vector part = ch.transform(raw);
          out.segment(at, part.size()) = part;
          at += part.size();
        }
        return out;
      }
    }
    return {};
  }

  /// Row-wise transform of a batch of raw summaries.
  Matrix transform_rows(const MatrixRef& raw) const {
    Matrix out(raw.rows(), output_dim());
    for (Index i = 0; i < raw.rows(); ++i) out.row(i) = transform(raw.row(i).transpose()).transpose();
    return out;
  }

  /// Fitted posterior mean in parameter units (linear constructor only).
  Vector posterior_mean(const VectorRef& raw) const {
    if (kind_ != Kind::linear_posterior_mean) throw InvalidArgument("posterior_mean: not a linear constructor");
    return regression_.predict(input_.apply(raw));
  }

  /// Child fitted with parameter j as its response (composite only).
  const SummaryConstructor& focus_child(Index j) const {
    for (std::size_t k = 0; k < focus_.size(); ++k)
      if (focus_[k] == j) return children_[k];
    throw InvalidArgument("composite has no child for the requested parameter");
  }

  const Standardizer& standardizer() const { return input_; }
  const ProjectionMatrix& projection() const { return projection_; }
  const Vector& eigenvalues() const { return eigenvalues_; }
  const RegressionFit& regression() const { return regression_; }
  const std::vector<SummaryConstructor>& children() const { return children_; }
  const std::vector<Index>& focus() const { return focus_; }
  std::optional<Index> response_index() const { return response_index_; }

  static std::string kind_name(Kind k) {
    switch (k) {
      case Kind::identity: return "identity";
      case Kind::linear_posterior_mean: return "linear-posterior-mean";
      case Kind::lgkdr: return "lgkdr";
      case Kind::separated_composite: return "separated-composite";
    }
    return "";
  }

  void save(std::ostream& out) const {
    out << "lgabc-summary 1\n";
    out << "kind " << kind_name(kind_) << '\n';
    if (kind_ == Kind::separated_composite) {
      out << "children " << children_.size() << '\n';
      for (std::size_t k = 0; k < children_.size(); ++k) {
        out << "focus " << focus_[k] << '\n';
        children_[k].save(out);
      }
      return;
    }
    save_standardizer(out, input_);
    if (kind_ == Kind::linear_posterior_mean) {
      out << "regression " << regression_.coefficients.rows() << ' ' << regression_.coefficients.cols() << '\n';
      io::write_matrix(out, regression_.coefficients);
      save_standardizer(out, output_);
    } else if (kind_ == Kind::lgkdr) {
      out << "response " << (response_index_ ? *response_index_ : -1) << '\n';
      out << "eigenvalues " << eigenvalues_.size() << '\n';
      io::write_vector(out, eigenvalues_);
      save_projection(out, projection_);
    }
  }

  static SummaryConstructor load(std::istream& in) {
    io::expect(in, "lgabc-summary");
    if (io::read_long(in) != 1) throw InvalidArgument("summary file: unsupported version");
    io::expect(in, "kind");
    const std::string tag = io::next_token(in);
    if (tag == "separated-composite") {
      io::expect(in, "children");
      const long k = io::read_long(in);
      if (k < 1) throw InvalidArgument("summary file: composite without children");
      std::vector<SummaryConstructor> children;
      std::vector<Index> focus;
      for (long c = 0; c < k; ++c) {
        io::expect(in, "focus");
        focus.push_back(io::read_long(in));
        children.push_back(load(in));
      }
      return composite(std::move(children), std::move(focus));
    }
    Standardizer s = load_standardizer(in);
    if (tag == "identity") return identity(std::move(s));
    if (tag == "linear-posterior-mean") {
      io::expect(in, "regression");
      const long r = io::read_long(in);
      const long c = io::read_long(in);
      RegressionFit fit;
      fit.coefficients = io::read_matrix(in, r, c);
      Standardizer out = load_standardizer(in);
      return linear(std::move(s), std::move(fit), std::move(out));
    }
    if (tag == "lgkdr") {
      io::expect(in, "response");
      const long resp = io::read_long(in);
      io::expect(in, "eigenvalues");
      const long ne = io::read_long(in);
      Vector ev = io::read_vector(in, ne);
      ProjectionMatrix b = load_projection(in);
      return lgkdr(std::move(s), std::move(b), std::move(ev),
                   resp >= 0 ? std::optional<Index>(resp) : std::nullopt);
    }
    throw InvalidArgument("summary file: unknown kind '" + tag + "'");
  }

 private:
  explicit SummaryConstructor(Kind k) : kind_(k) {}

  static void save_standardizer(std::ostream& out, const Standardizer& s) {
    out << "standardizer " << s.dim() << '\n';
    io::write_vector(out, s.means());
    io::write_vector(out, s.scales());
  }
  static Standardizer load_standardizer(std::istream& in) {
    io::expect(in, "standardizer");
    const long m = io::read_long(in);
    Vector means = io::read_vector(in, m);
    Vector scales = io::read_vector(in, m);
    return Standardizer(std::move(means), std::move(scales));
  }

  Kind kind_;
  Standardizer input_;
  RegressionFit regression_;
  Standardizer output_;
  ProjectionMatrix projection_;
  Vector eigenvalues_;
  std::optional<Index> response_index_;
  std::vector<SummaryConstructor> children_;
  std::vector<Index> focus_;
};

inline SummaryConstructor fit_identity(const TrainingSet& ts) {
  ts.validate();
  return SummaryConstructor::identity(Standardizer::fit(ts.summaries));
}

/// Semi-automatic summaries: regress each parameter on [1, s] and use the
/// fitted posterior means. With `local`, the regression is weighted by
/// triweight weights around `x_obs` (standardized coordinates).
inline SummaryConstructor fit_linear_posterior_mean(const TrainingSet& ts, bool local = false,
                                                    double weight_quantile = 0.10,
                                                    const std::optional<Vector>& x_obs = std::nullopt) {
  ts.validate();
  if (ts.size() <= ts.summaries.cols() + 1) throw InvalidArgument("linear fit: need n > m + 1");
  Standardizer input = Standardizer::fit(ts.summaries);
  const Matrix z = input.apply_rows(ts.summaries);
  std::optional<Vector> weights;
  if (local) {
    if (!x_obs) throw InvalidArgument("local linear fit needs an observation");
    weights = compute_weights(z, input.apply(*x_obs), weight_quantile);
  }
  RegressionFit fit = fit_least_squares(z, ts.parameters, weights);
  Standardizer output = Standardizer::fit(ts.parameters);
  return SummaryConstructor::linear(std::move(input), std::move(fit), std::move(output));
}

/// Fewest positively weighted anchors accepted for a local fit.
inline Index min_positive_weights(Index n) {
  return std::min<Index>(n, std::max<Index>(10, static_cast<Index>(std::ceil(0.01 * static_cast<double>(n)))));
}

/// Standardizes one training set and builds its gradient covariance once, then
/// fits LGKDR projections for any number of observations.
class LgkdrFitter {
 public:
  LgkdrFitter(const TrainingSet& ts, const KernelParams& kp, std::optional<Index> response_index = std::nullopt)
      : input_(Standardizer::fit(ts.summaries)), response_index_(response_index) {
    ts.validate();
    const Standardizer theta_scale = Standardizer::fit(ts.parameters);
    const Matrix theta = theta_scale.apply_rows(ts.parameters);
    gc_.emplace(input_.apply_rows(ts.summaries), response_columns(theta, response_index), kp);
  }

  const GradientCovariance& covariance() const { return *gc_; }
  const Standardizer& standardizer() const { return input_; }

  Vector weights(const VectorRef& x_obs, double weight_quantile) const {
    return compute_weights(gc_->summaries(), input_.apply(x_obs), weight_quantile);
  }

  SummaryConstructor fit(const VectorRef& x_obs, std::optional<Index> target_dim, double weight_quantile = 0.10,
                         int threads = 1) const {
    const Vector w = weights(x_obs, weight_quantile);
    const Index positive = (w.array() > 0.0).count();
    if (positive < min_positive_weights(w.size())) {
      throw InvalidArgument("too few training points inside the weighting bandwidth");
    }
    if (target_dim && (*target_dim < 1 || *target_dim > gc_->dim())) throw InvalidArgument("target_dim out of range");
    ProjectionEstimate est = estimate_projection(*gc_, w, target_dim, threads);
    return SummaryConstructor::lgkdr(input_, std::move(est.projection), std::move(est.eigenvalues), response_index_);
  }

 private:
  Standardizer input_;
  std::optional<Index> response_index_;
  std::optional<GradientCovariance> gc_;
};

inline SummaryConstructor fit_lgkdr(const TrainingSet& ts, const VectorRef& x_obs, const GkdrConfig& cfg,
                                    int threads = 1) {
  cfg.validate();
  return LgkdrFitter(ts, cfg.kernel, cfg.response_index).fit(x_obs, cfg.target_dim, cfg.weight_quantile, threads);
}

/// Identity on the raw initial summaries, without standardization.
inline SummaryConstructor fit_identity_unscaled(const TrainingSet& ts) {
  ts.validate();
  const Index m = ts.summaries.cols();
  return SummaryConstructor::identity(Standardizer(Vector::Zero(m), Vector::Ones(m)));
}

/// Pilot rejection on the training set: the k rows nearest to x_obs in
/// standardized summary space, in ascending distance (ties by row).
inline TrainingSet nearest_subset(const TrainingSet& ts, const VectorRef& x_obs, Index k) {
  ts.validate();
  if (k < 2 || k > ts.size()) throw InvalidArgument("nearest_subset: need 2 <= k <= n");
  const Standardizer st = Standardizer::fit(ts.summaries);
  std::vector<std::pair<double, Index>> d(static_cast<std::size_t>(ts.size()));
  for (Index i = 0; i < ts.size(); ++i) {
    d[static_cast<std::size_t>(i)] = {((ts.summaries.row(i).transpose() - x_obs).array() / st.scales().array()).matrix().squaredNorm(), i};
  }
  std::partial_sort(d.begin(), d.begin() + k, d.end());
  TrainingSet out;
  out.summaries.resize(k, ts.summaries.cols());
  out.parameters.resize(k, ts.parameters.cols());
  for (Index r = 0; r < k; ++r) {
    out.summaries.row(r) = ts.summaries.row(d[static_cast<std::size_t>(r)].second);
    out.parameters.row(r) = ts.parameters.row(d[static_cast<std::size_t>(r)].second);
  }
  return out;
}

/// One LGKDR child per listed parameter, each fitted with that parameter alone
/// as the response; the transform concatenates child outputs.
inline SummaryConstructor fit_separated(const TrainingSet& ts, const VectorRef& x_obs, GkdrConfig cfg,
                                        const std::vector<Index>& which, int threads = 1) {
  if (which.empty()) throw InvalidArgument("fit_separated: no parameters listed");
  std::vector<SummaryConstructor> children;
  for (Index j : which) {
    if (j < 0 || j >= ts.parameters.cols()) throw InvalidArgument("fit_separated: parameter index out of range");
    cfg.response_index = j;
    children.push_back(fit_lgkdr(ts, x_obs, cfg, threads));
  }
  return SummaryConstructor::composite(std::move(children), which);
}

}  // namespace lgabc
