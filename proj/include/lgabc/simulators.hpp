#pragma once

// Generative models and their initial summary statistics: the M/G/1 queue,
// the Ricker map with Poisson observations, and a Gaussian conjugate toy with
// an analytic posterior.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lgabc/errors.hpp"
#include "lgabc/kernel_linalg.hpp"
#include "lgabc/random.hpp"

namespace lgabc {

/// One coordinate of a prior. With `base` set, the distribution describes the
/// increment theta[k] - theta[base] (base must precede k).
struct PriorComponent {
  enum class Kind { uniform, normal, log_uniform, fixed };
  Kind kind = Kind::uniform;
  double a = 0.0;  ///< lower bound / mean / fixed value
  double b = 1.0;  ///< upper bound / standard deviation
  int base = -1;

  static PriorComponent uniform(double lo, double hi, int base = -1) { return {Kind::uniform, lo, hi, base}; }
  static PriorComponent normal(double mean, double sd) { return {Kind::normal, mean, sd, -1}; }
  /// log(x) ~ U[log lo, log hi].
  static PriorComponent log_uniform(double lo, double hi) { return {Kind::log_uniform, lo, hi, -1}; }
  static PriorComponent fixed(double value) { return {Kind::fixed, value, value, -1}; }

  bool is_fixed() const { return kind == Kind::fixed; }
};

struct ModelSpec {
  std::vector<std::string> parameter_names;
  std::vector<PriorComponent> prior;
  Index raw_length = 0;
  Index summary_dim = 0;
  std::string summary_id;

  Index parameter_dim() const { return static_cast<Index>(prior.size()); }

  void validate() const {
    if (prior.empty() || parameter_names.size() != prior.size()) throw InvalidArgument("model spec: bad parameter list");
    for (std::size_t k = 0; k < prior.size(); ++k) {
      const auto& c = prior[k];
      if (c.base >= static_cast<int>(k)) throw InvalidArgument("model spec: prior base must precede its parameter");
      if (!std::isfinite(c.a) || !std::isfinite(c.b)) throw InvalidArgument("model spec: prior bounds must be finite");
      switch (c.kind) {
        case PriorComponent::Kind::uniform:
          if (!(c.a < c.b)) throw InvalidArgument("model spec: uniform bounds must be ordered");
          break;
        case PriorComponent::Kind::log_uniform:
          if (!(c.a > 0.0 && c.a < c.b)) throw InvalidArgument("model spec: log-uniform bounds must be positive and ordered");
          break;
        case PriorComponent::Kind::normal:
          if (!(c.b > 0.0)) throw InvalidArgument("model spec: normal sd must be positive");
          break;
        case PriorComponent::Kind::fixed:
          break;
      }
    }
  }
};

/// Independent draws per declared prior component.
inline Vector prior_sample(const ModelSpec& spec, Rng& rng) {
  Vector theta(spec.parameter_dim());
  for (Index k = 0; k < spec.parameter_dim(); ++k) {
    const auto& c = spec.prior[static_cast<std::size_t>(k)];
    double v = 0.0;
    switch (c.kind) {
      case PriorComponent::Kind::uniform: v = rng.uniform(c.a, c.b); break;
      case PriorComponent::Kind::normal: v = rng.normal(c.a, c.b); break;
      case PriorComponent::Kind::log_uniform: v = std::exp(rng.uniform(std::log(c.a), std::log(c.b))); break;
      case PriorComponent::Kind::fixed: v = c.a; break;
    }
    theta(k) = c.base >= 0 ? theta(c.base) + v : v;
  }
  return theta;
}

/// Log prior density up to a constant; -infinity outside the support. Fixed
/// components contribute 0 when matched exactly.
inline double prior_log_density(const ModelSpec& spec, const VectorRef& theta) {
  constexpr double kOut = -std::numeric_limits<double>::infinity();
  if (theta.size() != spec.parameter_dim()) throw InvalidArgument("prior density: dimension mismatch");
  double lp = 0.0;
  for (Index k = 0; k < spec.parameter_dim(); ++k) {
    const auto& c = spec.prior[static_cast<std::size_t>(k)];
    const double v = c.base >= 0 ? theta(k) - theta(c.base) : theta(k);
    switch (c.kind) {
      case PriorComponent::Kind::uniform:
        if (!(v >= c.a && v <= c.b)) return kOut;
        lp -= std::log(c.b - c.a);
        break;
      case PriorComponent::Kind::normal: {
        const double z = (v - c.a) / c.b;
        lp -= 0.5 * z * z + std::log(c.b);
        break;
      }
      case PriorComponent::Kind::log_uniform:
        if (!(v >= c.a && v <= c.b)) return kOut;
        lp -= std::log(v) + std::log(std::log(c.b) - std::log(c.a));
        break;
      case PriorComponent::Kind::fixed:
        if (v != c.a) return kOut;
        break;
    }
  }
  return lp;
}

/// Generative model: raw simulation plus its initial summary extractor.
class Model {
 public:
  virtual ~Model() = default;
  virtual const ModelSpec& spec() const = 0;
  virtual std::vector<double> simulate(const VectorRef& theta, Rng& rng) const = 0;
  virtual Vector summaries(std::span<const double> raw) const = 0;

  Vector sample_prior(Rng& rng) const { return prior_sample(spec(), rng); }
  double log_prior(const VectorRef& theta) const { return prior_log_density(spec(), theta); }

  /// Raw data regenerable from (theta, seed).
  std::vector<double> simulate_seeded(const VectorRef& theta, std::uint64_t seed) const {
    Rng rng(seed);
    return simulate(theta, rng);
  }
};

// ---------------------------------------------------------------- M/G/1 queue

struct Mg1Params {
  double theta1 = 1.0;  ///< lower service-time bound
  double theta2 = 2.0;  ///< upper service-time bound
  double theta3 = 0.1;  ///< arrival rate

  void validate() const {
    if (!(theta1 > 0.0 && theta1 <= theta2 && theta3 > 0.0) || !std::isfinite(theta2) || !std::isfinite(theta3)) {
      throw InvalidArgument("M/G/1 parameters need 0 < theta1 <= theta2 and theta3 > 0");
    }
  }
};

/// Inter-departure times from service times U and inter-arrival times W:
/// Y_n = U_n + max(0, sum_{i<=n} W_i - sum_{i<n} Y_i).
inline std::vector<double> mg1_recursion(std::span<const double> service, std::span<const double> inter_arrival) {
  if (service.size() != inter_arrival.size()) throw InvalidArgument("mg1_recursion: length mismatch");
  std::vector<double> y(service.size());
  double arrival = 0.0;    // sum of W up to n
  double departure = 0.0;  // sum of Y up to n - 1
  for (std::size_t n = 0; n < service.size(); ++n) {
    arrival += inter_arrival[n];
    y[n] = arrival <= departure ? service[n] : service[n] + arrival - departure;
    departure += y[n];
  }
  return y;
}

inline std::vector<double> mg1_simulate(const Mg1Params& p, Index n_customers, Rng& rng) {
  p.validate();
  if (n_customers < 1) throw InvalidArgument("mg1_simulate: need at least one customer");
  std::vector<double> u(static_cast<std::size_t>(n_customers)), w(u.size());
  for (std::size_t i = 0; i < u.size(); ++i) {
    u[i] = p.theta1 + (p.theta2 - p.theta1) * rng.uniform();
    w[i] = rng.exponential(p.theta3);
  }
  return mg1_recursion(u, w);
}

/// Type-7 (linear interpolation) quantiles of the sorted series at q = k / (count - 1).
inline Vector evenly_spaced_quantiles(std::span<const double> y, Index count) {
  if (count < 2 || static_cast<Index>(y.size()) < count) throw InvalidArgument("quantiles: insufficient data");
  std::vector<double> s(y.begin(), y.end());
  std::sort(s.begin(), s.end());
  Vector q(count);
  const double last = static_cast<double>(s.size() - 1);
  for (Index k = 0; k < count; ++k) {
    const double h = last * static_cast<double>(k) / static_cast<double>(count - 1);
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const std::size_t hi = std::min(lo + 1, s.size() - 1);
    q(k) = s[lo] + (h - static_cast<double>(lo)) * (s[hi] - s[lo]);
  }
  return q;
}

inline constexpr Index kMg1Quantiles = 20;

inline Vector mg1_summaries(std::span<const double> y) { return evenly_spaced_quantiles(y, kMg1Quantiles); }

/// theta = (theta1, theta2, theta3); theta1 ~ U[1,10], theta2 - theta1 ~ U[1,10],
/// theta3 ~ U[0,1/3].
class Mg1Model final : public Model {
 public:
  explicit Mg1Model(Index n_customers = 50) : n_customers_(n_customers) {
    if (n_customers < kMg1Quantiles) throw InvalidArgument("M/G/1 series must hold at least 20 customers");
    spec_.parameter_names = {"theta1", "theta2", "theta3"};
    spec_.prior = {PriorComponent::uniform(1.0, 10.0), PriorComponent::uniform(1.0, 10.0, 0),
                   PriorComponent::uniform(0.0, 1.0 / 3.0)};
    spec_.raw_length = n_customers;
    spec_.summary_dim = kMg1Quantiles;
    spec_.summary_id = "mg1-quantiles";
  }
  const ModelSpec& spec() const override { return spec_; }
  std::vector<double> simulate(const VectorRef& theta, Rng& rng) const override {
    return mg1_simulate({theta(0), theta(1), theta(2)}, n_customers_, rng);
  }
  Vector summaries(std::span<const double> raw) const override { return mg1_summaries(raw); }

 private:
  Index n_customers_;
  ModelSpec spec_;
};

// ---------------------------------------------------------------- Ricker map

struct RickerParams {
  double log_r = 3.8;
  double sigma_e = 0.3;  ///< process-noise standard deviation
  double phi = 10.0;     ///< observation scaling

  void validate() const {
    if (!(sigma_e >= 0.0 && phi >= 0.0) || !std::isfinite(log_r)) throw InvalidArgument("Ricker parameters out of range");
  }
};

inline constexpr int kRickerSteps = 100;
inline constexpr int kRickerBurnIn = 50;
inline constexpr Index kRickerObservations = kRickerSteps - kRickerBurnIn;

/// Latent path N_0..N_100 of N_{t+1} = r N_t exp(-N_t + e_t), N_0 = 1.
inline std::vector<double> ricker_latent(const RickerParams& p, Rng& rng) {
  p.validate();
  std::vector<double> n(kRickerSteps + 1);
  n[0] = 1.0;
  const double r = std::exp(p.log_r);
  for (int t = 0; t < kRickerSteps; ++t) {
    const double e = p.sigma_e > 0.0 ? rng.normal(0.0, p.sigma_e) : 0.0;
    n[t + 1] = r * n[t] * std::exp(-n[t] + e);
    if (!std::isfinite(n[t + 1])) throw NumericalError("Ricker latent state overflowed");
  }
  return n;
}

/// Observations y_51..y_100 with y_t ~ Poisson(phi N_t).
inline std::vector<double> ricker_simulate(const RickerParams& p, Rng& rng) {
  const std::vector<double> n = ricker_latent(p, rng);
  std::vector<double> y(static_cast<std::size_t>(kRickerObservations));
  for (std::size_t k = 0; k < y.size(); ++k) {
    y[k] = static_cast<double>(rng.poisson(p.phi * n[kRickerBurnIn + 1 + k]));
  }
  return y;
}

enum class RickerSet { E0, E1, E2 };

inline Index ricker_feature_dim(RickerSet set) {
  switch (set) {
    case RickerSet::E0: return 13;
    case RickerSet::E1: return 28;
    case RickerSet::E2: return 28 + 6 * kRickerObservations + 2 * (kRickerObservations - 1);
  }
  return 0;
}

inline double guarded_log(double x) { return std::log(x + 1e-8); }

/// (1/n) sum_t (y_t - mean)(y_{t+lag} - mean).
inline double autocovariance(std::span<const double> y, std::size_t lag) {
  const double n = static_cast<double>(y.size());
  const double mean = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double s = 0.0;
  for (std::size_t t = 0; t + lag < y.size(); ++t) s += (y[t] - mean) * (y[t + lag] - mean);
  return s / n;
}

namespace detail {

/// Least squares X b = y; returns nullopt when X has deficient column rank.
inline std::optional<Vector> least_squares_full_rank(const Matrix& x, const Vector& y) {
  Eigen::ColPivHouseholderQR<Matrix> qr(x);
  qr.setThreshold(1e-10);
  if (qr.rank() < x.cols()) return std::nullopt;
  return Vector(qr.solve(y));
}

}  // namespace detail

/// Wood's statistics (E0), the extended set E1, and the raw-data set E2.
inline Vector ricker_features(std::span<const double> y, RickerSet set) {
  const std::size_t n = y.size();
  if (static_cast<Index>(n) != kRickerObservations) throw InvalidArgument("ricker_features: expected 50 observations");
  std::vector<double> f;
  f.reserve(static_cast<std::size_t>(ricker_feature_dim(set)));

  const double mean = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);
  f.push_back(mean);
  for (std::size_t lag = 1; lag <= 5; ++lag) f.push_back(autocovariance(y, lag));

  // Cubic fit of the ascending first differences on the standardized rank index.
  {
    std::vector<double> diff(n - 1);
    for (std::size_t t = 0; t + 1 < n; ++t) diff[t] = y[t + 1] - y[t];
    std::sort(diff.begin(), diff.end());
    const auto len = static_cast<Index>(diff.size());
    Vector rank = Vector::LinSpaced(len, 0.0, static_cast<double>(len - 1));
    rank.array() -= rank.mean();
    rank /= std::sqrt(rank.squaredNorm() / static_cast<double>(len));
    Matrix x(len, 4);
    x.col(0).setOnes();
    x.col(1) = rank;
    x.col(2) = rank.array().square().matrix();
    x.col(3) = rank.array().cube().matrix();
    const Vector target = Eigen::Map<const Vector>(diff.data(), len);
    const Vector coef = detail::least_squares_full_rank(x, target).value_or(Vector::Zero(4));
    for (Index k = 0; k < 4; ++k) f.push_back(coef(k));
  }

  // y_{t+1}^0.3 = b1 y_t^0.3 + b2 y_t^0.6, no intercept.
  {
    const auto len = static_cast<Index>(n - 1);
    Matrix x(len, 2);
    Vector target(len);
    for (Index t = 0; t < len; ++t) {
      const double p = std::pow(y[static_cast<std::size_t>(t)], 0.3);
      x(t, 0) = p;
      x(t, 1) = p * p;
      target(t) = std::pow(y[static_cast<std::size_t>(t) + 1], 0.3);
    }
    const Vector coef = detail::least_squares_full_rank(x, target).value_or(Vector::Zero(2));
    f.push_back(coef(0));
    f.push_back(coef(1));
  }
  f.push_back(static_cast<double>(std::count(y.begin(), y.end(), 0.0)));

  if (set != RickerSet::E0) {
    for (int j = 1; j <= 4; ++j) f.push_back(static_cast<double>(std::count(y.begin(), y.end(), static_cast<double>(j))));
    double ss = 0.0;
    for (double v : y) ss += (v - mean) * (v - mean);
    f.push_back(guarded_log(ss / static_cast<double>(n - 1)));
    for (int j = 2; j <= 6; ++j) {
      double s = 0.0;
      for (double v : y) s += std::pow(v, j);
      f.push_back(guarded_log(s));
    }
    const double acov0 = autocovariance(y, 0);
    for (std::size_t lag = 1; lag <= 5; ++lag) f.push_back(acov0 > 0.0 ? autocovariance(y, lag) / acov0 : 0.0);
  }

  if (set == RickerSet::E2) {
    std::vector<double> sorted(y.begin(), y.end());
    std::sort(sorted.begin(), sorted.end());
    for (double v : y) f.push_back(v);
    for (double v : sorted) f.push_back(v);
    for (double v : y) f.push_back(v * v);
    for (double v : sorted) f.push_back(v * v);
    for (double v : y) f.push_back(std::log1p(v));
    for (double v : sorted) f.push_back(std::log1p(v));
    for (std::size_t t = 0; t + 1 < n; ++t) f.push_back(y[t + 1] - y[t]);
    for (std::size_t t = 0; t + 1 < n; ++t) f.push_back(sorted[t + 1] - sorted[t]);
  }
  for (double v : f) {
    if (!std::isfinite(v)) throw NumericalError("ricker_features: non-finite feature");
  }
  return Eigen::Map<const Vector>(f.data(), static_cast<Index>(f.size()));
}

struct RickerPriorConfig {
  double log_r = 3.8;
  double phi = 10.0;
  /// When true, log r ~ U[log_r_lo, log_r_hi] and phi ~ U[phi_lo, phi_hi];
  /// otherwise both are held at the fixed values above.
  bool free_log_r_phi = false;
  double log_r_lo = 3.0, log_r_hi = 5.0;
  double phi_lo = 4.0, phi_hi = 20.0;
};

/// theta = (log r, sigma_e, phi) with log(sigma_e) ~ U[log 0.1, 0].
class RickerModel final : public Model {
 public:
  explicit RickerModel(RickerSet set = RickerSet::E0, RickerPriorConfig prior = {}) : set_(set) {
    spec_.parameter_names = {"log_r", "sigma_e", "phi"};
    spec_.prior = {prior.free_log_r_phi ? PriorComponent::uniform(prior.log_r_lo, prior.log_r_hi)
                                        : PriorComponent::fixed(prior.log_r),
                   PriorComponent::log_uniform(0.1, 1.0),
                   prior.free_log_r_phi ? PriorComponent::uniform(prior.phi_lo, prior.phi_hi)
                                        : PriorComponent::fixed(prior.phi)};
    spec_.raw_length = kRickerObservations;
    spec_.summary_dim = ricker_feature_dim(set);
    spec_.summary_id = set == RickerSet::E0 ? "ricker-E0" : set == RickerSet::E1 ? "ricker-E1" : "ricker-E2";
    spec_.validate();
  }
  const ModelSpec& spec() const override { return spec_; }
  std::vector<double> simulate(const VectorRef& theta, Rng& rng) const override {
    return ricker_simulate({theta(0), theta(1), theta(2)}, rng);
  }
  Vector summaries(std::span<const double> raw) const override { return ricker_features(raw, set_); }
  RickerSet feature_set() const { return set_; }

 private:
  RickerSet set_;
  ModelSpec spec_;
};

// ---------------------------------------------------------------- Gaussian toy

inline std::vector<double> gaussian_toy_simulate(double theta, Index n_obs, Rng& rng) {
  std::vector<double> y(static_cast<std::size_t>(std::max<Index>(n_obs, 0)));
  for (double& v : y) v = rng.normal(theta, 1.0);
  return y;
}

struct NormalPosterior {
  double mean;
  double var;
};

/// Posterior of theta ~ N(0, prior_var), y_i ~ N(theta, 1) given the sample mean of n draws.
inline NormalPosterior gaussian_toy_posterior(double prior_var, double ybar, Index n) {
  const double nn = static_cast<double>(n);
  return {prior_var * nn * ybar / (1.0 + nn * prior_var), prior_var / (1.0 + nn * prior_var)};
}

/// Summaries: sample mean and sample standard deviation.
class GaussianToyModel final : public Model {
 public:
  explicit GaussianToyModel(double prior_var = 1.0, Index n_obs = 4) : n_obs_(n_obs) {
    if (n_obs < 2) throw InvalidArgument("Gaussian toy needs at least 2 observations");
    spec_.parameter_names = {"theta"};
    spec_.prior = {PriorComponent::normal(0.0, std::sqrt(prior_var))};
    spec_.raw_length = n_obs;
    spec_.summary_dim = 2;
    spec_.summary_id = "toy-mean-sd";
    spec_.validate();
  }
  const ModelSpec& spec() const override { return spec_; }
  std::vector<double> simulate(const VectorRef& theta, Rng& rng) const override {
    return gaussian_toy_simulate(theta(0), n_obs_, rng);
  }
  Vector summaries(std::span<const double> raw) const override {
    const double n = static_cast<double>(raw.size());
    const double mean = std::accumulate(raw.begin(), raw.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : raw) ss += (v - mean) * (v - mean);
    Vector s(2);
    s << mean, std::sqrt(ss / (n - 1.0));
    return s;
  }
  Index n_obs() const { return n_obs_; }
  double prior_var() const { return spec_.prior[0].b * spec_.prior[0].b; }

 private:
  Index n_obs_;
  ModelSpec spec_;
};

/// Model assembled from callables; used for synthetic and rigged models.
class FunctionModel final : public Model {
 public:
  using Simulator = std::function<std::vector<double>(const VectorRef&, Rng&)>;
  using Extractor = std::function<Vector(std::span<const double>)>;

  FunctionModel(ModelSpec spec, Simulator sim, Extractor extract)
      : spec_(std::move(spec)), sim_(std::move(sim)), extract_(std::move(extract)) {
    spec_.validate();
  }
  const ModelSpec& spec() const override { return spec_; }
  std::vector<double> simulate(const VectorRef& theta, Rng& rng) const override { return sim_(theta, rng); }
  Vector summaries(std::span<const double> raw) const override { return extract_(raw); }

 private:
  ModelSpec spec_;
  Simulator sim_;
  Extractor extract_;
};

}  // namespace lgabc
