#pragma once

// Rejection ABC over a frozen simulation pool and adaptive SMC ABC with an
// indicator ABC kernel, distance-quantile tolerance schedule, MH moves and
// ESS-triggered systematic resampling.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "lgabc/errors.hpp"
#include "lgabc/kernel_linalg.hpp"
#include "lgabc/parallel.hpp"
#include "lgabc/random.hpp"
#include "lgabc/simulators.hpp"
#include "lgabc/summaries.hpp"

namespace lgabc {

/// Euclidean distance between constructed summaries.
inline double distance(const VectorRef& z1, const VectorRef& z2) {
  if (z1.size() != z2.size()) throw InvalidArgument("distance: dimension mismatch");
  return (z1 - z2).norm();
}

// ---------------------------------------------------------------- rejection

struct AcceptedDraw {
  Index pool_index;
  Vector theta;
  double distance;
};

struct RejectionResult {
  std::vector<AcceptedDraw> accepted;  ///< ascending distance, ties by pool index
  double epsilon_effective = 0.0;      ///< largest accepted distance
  Index total_simulated = 0;
  Index accepted_count = 0;
};

/// Accepts the n_acc pool entries nearest to z_obs. `pool_z` holds the pool's
/// constructed summaries (one row per entry).
inline RejectionResult rejection_abc(const MatrixRef& pool_z, const MatrixRef& pool_theta, const VectorRef& z_obs,
                                     Index n_acc) {
  const Index n = pool_z.rows();
  if (pool_theta.rows() != n) throw InvalidArgument("rejection_abc: pool row counts disagree");
  if (n_acc < 1 || n < n_acc) throw InvalidArgument("rejection_abc: pool smaller than the requested acceptances");
  if (pool_z.cols() != z_obs.size()) throw InvalidArgument("rejection_abc: dimension mismatch");
  std::vector<double> dist(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    const double d = (pool_z.row(i).transpose() - z_obs).norm();
    dist[static_cast<std::size_t>(i)] = std::isnan(d) ? std::numeric_limits<double>::infinity() : d;
  }
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  auto less = [&](Index a, Index b) {
    const double da = dist[static_cast<std::size_t>(a)], db = dist[static_cast<std::size_t>(b)];
    return da < db || (da == db && a < b);
  };
  const auto cut = order.begin() + n_acc;
  std::nth_element(order.begin(), cut - 1, order.end(), less);
  std::sort(order.begin(), cut, less);

  RejectionResult out;
  out.total_simulated = n;
  out.accepted_count = n_acc;
  out.accepted.reserve(static_cast<std::size_t>(n_acc));
  for (auto it = order.begin(); it != cut; ++it) {
    out.accepted.push_back({*it, pool_theta.row(*it).transpose(), dist[static_cast<std::size_t>(*it)]});
  }
  out.epsilon_effective = out.accepted.back().distance;
  return out;
}

/// Convenience overload: transforms raw pool summaries with `constructor`.
inline RejectionResult rejection_abc(const SummaryConstructor& constructor, const MatrixRef& pool_raw_summaries,
                                     const MatrixRef& pool_theta, const VectorRef& raw_obs, Index n_acc) {
  return rejection_abc(constructor.transform_rows(pool_raw_summaries), pool_theta, constructor.transform(raw_obs),
                       n_acc);
}

// ---------------------------------------------------------------- SMC helpers

/// (sum W)^2 / sum W^2.
inline double ess(const VectorRef& weights) {
  if ((weights.array() < 0.0).any()) throw InvalidArgument("ess: negative weight");
  const double s = weights.sum();
  if (!(s > 0.0)) throw InvalidArgument("ess: all weights are zero");
  return s * s / weights.squaredNorm();
}

/// Systematic resampling with a single offset u in [0, 1): `count` positions
/// (u + k) / count against the cumulative normalized weights (count defaults
/// to the population size). Returns the parent index of each offspring.
/// Zero-weight entries never receive offspring.
inline std::vector<Index> systematic_resample_indices(const VectorRef& weights, double offset,
                                                      std::optional<Index> count = std::nullopt) {
  const Index n = weights.size();
  if (n == 0) throw InvalidArgument("systematic_resample: empty population");
  const Index draws = count.value_or(n);
  if (draws < 1) throw InvalidArgument("systematic_resample: need at least one offspring");
  if (!(offset >= 0.0 && offset < 1.0)) throw InvalidArgument("systematic_resample: offset must lie in [0, 1)");
  const double total = weights.sum();
  if (!(total > 0.0)) throw InvalidArgument("systematic_resample: all weights are zero");
  Index last_positive = 0;
  for (Index i = 0; i < n; ++i)
    if (weights(i) > 0.0) last_positive = i;

  std::vector<Index> parents(static_cast<std::size_t>(draws));
  Index i = 0;
  double cum = weights(0) / total;
  for (Index k = 0; k < draws; ++k) {
    const double pos = (offset + static_cast<double>(k)) / static_cast<double>(draws);
    while (i < last_positive && pos >= cum) {
      ++i;
      cum += weights(i) / total;
    }
    parents[static_cast<std::size_t>(k)] = i;
  }
  return parents;
}

struct Particle {
  Vector theta;
  Vector summary;  ///< constructed summary z
  std::uint64_t raw_seed = 0;  ///< regenerates the dataset with the particle's theta
  double weight = 0.0;
  double distance = 0.0;
};

inline std::vector<Particle> systematic_resample(const std::vector<Particle>& particles, Rng& rng) {
  Vector w(static_cast<Index>(particles.size()));
  for (std::size_t i = 0; i < particles.size(); ++i) w(static_cast<Index>(i)) = particles[i].weight;
  const std::vector<Index> parents = systematic_resample_indices(w, rng.uniform());
  std::vector<Particle> out;
  out.reserve(particles.size());
  const double uniform = 1.0 / static_cast<double>(particles.size());
  for (Index p : parents) {
    out.push_back(particles[static_cast<std::size_t>(p)]);
    out.back().weight = uniform;
  }
  return out;
}

struct RoundTrace {
  int round = 0;
  double epsilon = 0.0;
  double ess = 0.0;
  double acceptance_rate = 0.0;
  Index cumulative_simulations = 0;
  bool resampled = false;
};

struct SmcState {
  std::vector<Particle> particles;
  double epsilon = 0.0;
  double ess = 0.0;
  int iteration = 0;
  std::vector<RoundTrace> trace;
  std::string stop_reason;
  Index simulations = 0;

  Vector weights() const {
    Vector w(static_cast<Index>(particles.size()));
    for (std::size_t i = 0; i < particles.size(); ++i) w(static_cast<Index>(i)) = particles[i].weight;
    return w;
  }
  Matrix thetas() const {
    Matrix t(static_cast<Index>(particles.size()), particles.front().theta.size());
    for (std::size_t i = 0; i < particles.size(); ++i) t.row(static_cast<Index>(i)) = particles[i].theta.transpose();
    return t;
  }
  /// Weighted posterior mean.
  Vector posterior_mean() const {
    const Vector w = weights();
    return thetas().transpose() * w / w.sum();
  }
};

struct SmcOptions {
  Index n_particles = 1000;
  double eps_target = 0.0;
  double ess_fraction = 0.5;  ///< resample when ESS < ess_fraction * N
  int max_rounds = 50;
  double quantile = 0.9;      ///< next tolerance = this quantile of alive distances
  int move_repeats = 1;
  double stall_tolerance = 1e-4;  ///< stop when the relative tolerance decrease falls below this
  int threads = 1;

  void validate() const {
    if (n_particles < 2) throw InvalidArgument("smc: need at least 2 particles");
    if (!(eps_target >= 0.0)) throw InvalidArgument("smc: eps_target must be nonnegative");
    if (!(ess_fraction > 0.0 && ess_fraction <= 1.0)) throw InvalidArgument("smc: ess_fraction must lie in (0, 1]");
    if (!(quantile > 0.0 && quantile < 1.0)) throw InvalidArgument("smc: quantile must lie in (0, 1)");
    if (max_rounds < 0 || move_repeats < 1) throw InvalidArgument("smc: bad round settings");
  }
};

/// Normalize weights in place; returns false when every weight is zero.
inline bool normalize_weights(std::vector<Particle>& particles) {
  double total = 0.0;
  for (const auto& p : particles) total += p.weight;
  if (!(total > 0.0)) return false;
  for (auto& p : particles) p.weight /= total;
  return true;
}

/// Indicator-kernel reweighting W_i <- W_i 1(d_i <= eps), then normalization.
/// If every weight vanishes, the cut is halved (eps moved halfway back towards
/// `eps_previous`) and retried once; a second collapse raises DegeneracyError.
/// Returns the tolerance actually applied.
inline double reweight(std::vector<Particle>& particles, double eps_previous, double eps_new) {
  auto apply = [&](double eps) {
    std::vector<Particle> trial = particles;
    for (auto& p : trial)
      if (!(p.distance <= eps)) p.weight = 0.0;
    return trial;
  };
  std::vector<Particle> trial = apply(eps_new);
  if (normalize_weights(trial)) {
    particles = std::move(trial);
    return eps_new;
  }
  const double retry = 0.5 * (eps_previous + eps_new);
  trial = apply(retry);
  if (normalize_weights(trial)) {
    particles = std::move(trial);
    return retry;
  }
  std::ostringstream msg;
  msg << "particle degeneracy: no particle within tolerance " << eps_new << " nor the halved cut " << retry;
  throw DegeneracyError(msg.str());
}

/// Everything a sampler needs to turn a parameter into a constructed summary.
struct SimulationContext {
  const Model& model;
  const SummaryConstructor& constructor;
  Vector z_obs;
};

inline Vector simulate_summary(const SimulationContext& ctx, const VectorRef& theta, std::uint64_t seed) {
  const std::vector<double> raw = ctx.model.simulate_seeded(theta, seed);
  return ctx.constructor.transform(ctx.model.summaries(raw));
}

/// Weighted population standard deviation of each parameter coordinate.
inline Vector weighted_std(const std::vector<Particle>& particles) {
  const Index p = particles.front().theta.size();
  Vector mean = Vector::Zero(p), sq = Vector::Zero(p);
  double total = 0.0;
  for (const auto& q : particles) {
    total += q.weight;
    mean += q.weight * q.theta;
  }
  mean /= total;
  for (const auto& q : particles) sq += q.weight * (q.theta - mean).array().square().matrix();
  return (sq / total).array().sqrt().matrix();
}

/// One MH move per alive particle (repeated `repeats` times): Gaussian random
/// walk with the weighted population std (floored at 1e-8), fresh simulation,
/// accept iff the new distance is within eps and u < prior(new) / prior(old).
/// Fixed prior coordinates are never perturbed. Returns the acceptance rate.
inline double move_particles(std::vector<Particle>& particles, const SimulationContext& ctx, double eps,
                             std::uint64_t master_seed, int round, int repeats, int threads, Index& simulations) {
  const ModelSpec& spec = ctx.model.spec();
  Vector scale = weighted_std(particles).cwiseMax(1e-8);
  for (Index k = 0; k < spec.parameter_dim(); ++k)
    if (spec.prior[static_cast<std::size_t>(k)].is_fixed()) scale(k) = 0.0;

  std::vector<int> accepted(particles.size(), 0), attempted(particles.size(), 0), simulated(particles.size(), 0);
  parallel_for(particles.size(), threads, [&](std::size_t i) {
    Particle& part = particles[i];
    if (!(part.weight > 0.0)) return;
    Rng rng(derive_seed(master_seed, {static_cast<std::uint64_t>(Stream::smc_move), static_cast<std::uint64_t>(round),
                                      static_cast<std::uint64_t>(i)}));
    for (int r = 0; r < repeats; ++r) {
      ++attempted[i];
      Vector proposal = part.theta;
      for (Index k = 0; k < proposal.size(); ++k)
        if (scale(k) > 0.0) proposal(k) = rng.normal(part.theta(k), scale(k));
      const std::uint64_t seed = rng.next_u64();
      const double u = rng.uniform();
      const double lp_new = ctx.model.log_prior(proposal);
      if (!std::isfinite(lp_new)) continue;
      const Vector z = simulate_summary(ctx, proposal, seed);
      ++simulated[i];
      const double d = distance(z, ctx.z_obs);
      if (!(d <= eps)) continue;
      if (!(std::log(u) < lp_new - ctx.model.log_prior(part.theta))) continue;
      part.theta = std::move(proposal);
      part.summary = z;
      part.raw_seed = seed;
      part.distance = d;
      ++accepted[i];
    }
  });
  long acc = 0, att = 0;
  for (std::size_t i = 0; i < particles.size(); ++i) {
    acc += accepted[i];
    att += attempted[i];
    simulations += simulated[i];
  }
  return att > 0 ? static_cast<double>(acc) / static_cast<double>(att) : 0.0;
}

/// Lower type-7 quantile of the alive particles' finite distances.
inline std::optional<double> alive_distance_quantile(const std::vector<Particle>& particles, double q) {
  std::vector<double> d;
  for (const auto& p : particles)
    if (p.weight > 0.0 && std::isfinite(p.distance)) d.push_back(p.distance);
  if (d.empty()) return std::nullopt;
  std::sort(d.begin(), d.end());
  const double h = q * static_cast<double>(d.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, d.size() - 1);
  return d[lo] + (h - static_cast<double>(lo)) * (d[hi] - d[lo]);
}

/// Adaptive SMC ABC. Initializes from the prior with eps = max distance, then
/// repeats { decrease eps; reweight; move; resample if ESS low } until
/// eps <= eps_target, max_rounds, or the tolerance stalls.
inline SmcState smc_abc(const SimulationContext& ctx, const SmcOptions& opt, std::uint64_t master_seed) {
  opt.validate();
  const Index n = opt.n_particles;
  SmcState st;
  st.particles.resize(static_cast<std::size_t>(n));
  parallel_for(st.particles.size(), opt.threads, [&](std::size_t i) {
    Rng rng(derive_seed(master_seed, Stream::smc_init, i));
    Particle& p = st.particles[i];
    p.theta = ctx.model.sample_prior(rng);
    p.raw_seed = rng.next_u64();
    p.summary = simulate_summary(ctx, p.theta, p.raw_seed);
    p.distance = distance(p.summary, ctx.z_obs);
  });
  st.simulations = n;

  double eps = -std::numeric_limits<double>::infinity();
  for (auto& p : st.particles) {
    if (std::isfinite(p.distance)) {
      eps = std::max(eps, p.distance);
      p.weight = 1.0;
    } else {
      p.weight = 0.0;
    }
  }
  if (!normalize_weights(st.particles)) {
    throw DegeneracyError("particle degeneracy: no initial particle has a finite summary distance");
  }
  st.epsilon = eps;
  st.ess = ess(st.weights());
  st.trace.push_back({0, eps, st.ess, 1.0, st.simulations, false});

  while (true) {
    if (st.epsilon <= opt.eps_target) {
      st.stop_reason = "target";
      break;
    }
    if (st.iteration >= opt.max_rounds) {
      st.stop_reason = "max_rounds";
      break;
    }
    double next = *alive_distance_quantile(st.particles, opt.quantile);
    next = std::max(next, opt.eps_target);
    if (!(st.epsilon - next >= opt.stall_tolerance * st.epsilon)) {
      st.stop_reason = "stalled";
      break;
    }
    const int round = st.iteration + 1;
    next = reweight(st.particles, st.epsilon, next);
    const double acc = move_particles(st.particles, ctx, next, master_seed, round, opt.move_repeats, opt.threads,
                                      st.simulations);
    bool resampled = false;
    double current_ess = ess(st.weights());
    if (current_ess < opt.ess_fraction * static_cast<double>(n)) {
      Rng rng(derive_seed(master_seed, Stream::smc_resample, static_cast<std::uint64_t>(round)));
      st.particles = systematic_resample(st.particles, rng);
      current_ess = static_cast<double>(n);  // uniform weights
      resampled = true;
    }
    st.epsilon = next;
    st.ess = current_ess;
    st.iteration = round;
    st.trace.push_back({round, next, current_ess, acc, st.simulations, resampled});
  }
  return st;
}

}  // namespace lgabc
