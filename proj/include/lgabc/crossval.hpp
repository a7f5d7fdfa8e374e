#pragma once

// Kernel hyper-parameter selection: grid over (sigma_S, sigma_Theta, eps_n)
// centred on median-heuristic bandwidths, each candidate scored by fitting
// LGKDR at simulated pseudo-observations and estimating their parameters by
// 5-nearest-neighbour regression on the projected test set.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "lgabc/errors.hpp"
#include "lgabc/gkdr.hpp"
#include "lgabc/kernel_linalg.hpp"
#include "lgabc/parallel.hpp"
#include "lgabc/random.hpp"
#include "lgabc/simulators.hpp"
#include "lgabc/summaries.hpp"

namespace lgabc {

/// Median pairwise Euclidean distance over a seeded subsample of at most
/// `max_points` rows. Falls back to 1.0 (with a warning) when all distances vanish.
inline double median_heuristic(const MatrixRef& points, std::uint64_t seed = 0, Index max_points = 1000) {
  const Index n = points.rows();
  if (n < 2) throw InvalidArgument("median_heuristic: need at least 2 points");
  std::vector<Index> rows(static_cast<std::size_t>(n));
  std::iota(rows.begin(), rows.end(), Index{0});
  if (n > max_points) {
    Rng rng(derive_seed(seed, Stream::subsample, 0));
    for (Index k = 0; k < max_points; ++k) {
      const auto j = k + static_cast<Index>(rng.next_u64() % static_cast<std::uint64_t>(n - k));
      std::swap(rows[static_cast<std::size_t>(k)], rows[static_cast<std::size_t>(j)]);
    }
    rows.resize(static_cast<std::size_t>(max_points));
    std::sort(rows.begin(), rows.end());
  }
  std::vector<double> d;
  d.reserve(rows.size() * (rows.size() - 1) / 2);
  for (std::size_t a = 0; a < rows.size(); ++a)
    for (std::size_t b = a + 1; b < rows.size(); ++b) d.push_back((points.row(rows[a]) - points.row(rows[b])).norm());
  const std::size_t mid = d.size() / 2;
  std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(mid), d.end());
  double med = d[mid];
  if (d.size() % 2 == 0) {
    const double below = *std::max_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(mid));
    med = 0.5 * (med + below);
  }
  if (!(med > 0.0)) {
    std::clog << "lgabc: median heuristic found identical points, using bandwidth 1.0\n";
    return 1.0;
  }
  return med;
}

/// Unweighted mean of the parameters of the k nearest training summaries;
/// distance ties go to the lower training index.
inline Vector knn_regress(const MatrixRef& train_z, const MatrixRef& train_theta, const VectorRef& query, Index k) {
  const Index n = train_z.rows();
  if (train_theta.rows() != n) throw InvalidArgument("knn_regress: row counts disagree");
  if (k < 1 || k > n) throw InvalidArgument("knn_regress: need 1 <= k <= n");
  if (train_z.cols() != query.size()) throw InvalidArgument("knn_regress: dimension mismatch");
  std::vector<std::pair<double, Index>> d(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) d[static_cast<std::size_t>(i)] = {(train_z.row(i).transpose() - query).squaredNorm(), i};
  std::partial_sort(d.begin(), d.begin() + k, d.end());
  Vector mean = Vector::Zero(train_theta.cols());
  for (Index j = 0; j < k; ++j) mean += train_theta.row(d[static_cast<std::size_t>(j)].second).transpose();
  return mean / static_cast<double>(k);
}

struct CvGrid {
  std::vector<double> sigma_s_factors{0.25, 0.5, 1.0, 2.0, 4.0};
  std::vector<double> sigma_theta_factors{0.25, 0.5, 1.0, 2.0, 4.0};
  std::vector<double> eps_n_values{1e-2, 1e-3, 1e-4, 1e-5};

  void validate() const {
    auto ok = [](const std::vector<double>& v) {
      return !v.empty() && std::all_of(v.begin(), v.end(), [](double x) { return x > 0.0 && std::isfinite(x); });
    };
    if (!ok(sigma_s_factors) || !ok(sigma_theta_factors) || !ok(eps_n_values)) {
      throw InvalidArgument("cv grid: every axis must be nonempty and positive");
    }
  }
};

struct CvCandidate {
  KernelParams kernel;
  double score = std::numeric_limits<double>::infinity();
  std::string error;  ///< nonempty when the candidate failed to fit
};

struct CvReport {
  std::vector<CvCandidate> candidates;  ///< grid order: sigma_s outer, sigma_theta, eps_n inner
  std::size_t selected = 0;
  Index n_pseudo_obs = 0;
  double sigma_s_center = 0.0;
  double sigma_theta_center = 0.0;

  const KernelParams& selected_kernel() const { return candidates.at(selected).kernel; }
};

/// Lexicographic (score, sigma_s, eps_n, grid position) order.
inline bool cv_better(const CvCandidate& a, std::size_t ia, const CvCandidate& b, std::size_t ib) {
  if (a.score != b.score) return a.score < b.score;
  if (a.kernel.sigma_s != b.kernel.sigma_s) return a.kernel.sigma_s < b.kernel.sigma_s;
  if (a.kernel.eps_n != b.kernel.eps_n) return a.kernel.eps_n < b.kernel.eps_n;
  return ia < ib;
}

/// Index of the best candidate under cv_better. Throws when every candidate failed.
inline std::size_t cv_argmin(const std::vector<CvCandidate>& c) {
  std::size_t best = c.size();
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (!c[i].error.empty() || !std::isfinite(c[i].score)) continue;
    if (best == c.size() || cv_better(c[i], i, c[best], best)) best = i;
  }
  if (best == c.size()) throw NumericalError("cross-validation: every candidate failed");
  return best;
}

/// A simulated observation with its known parameter.
struct PseudoObservation {
  Vector theta;
  Vector summaries;  ///< raw initial summaries
};

inline std::vector<PseudoObservation> simulate_pseudo_observations(const Model& model, Index count,
                                                                   std::uint64_t seed) {
  std::vector<PseudoObservation> out;
  for (Index j = 0; j < count; ++j) {
    Rng rng(derive_seed(seed, Stream::pseudo_observation, static_cast<std::uint64_t>(j)));
    Vector theta = model.sample_prior(rng);
    const std::vector<double> raw = model.simulate(theta, rng);
    out.push_back({std::move(theta), model.summaries(raw)});
  }
  return out;
}

struct CvSettings {
  CvGrid grid;
  Index n_pseudo_obs = 10;
  Index k_neighbours = 5;
  std::optional<Index> target_dim;
  double weight_quantile = 0.10;
  std::optional<Index> response_index;
  /// When set, each pseudo-observation fits on its nearest `local_training`
  /// training rows instead of the whole set.
  std::optional<Index> local_training;
  int threads = 1;
};

/// Grid search. Score = mean over pseudo-observations of the squared error of
/// the kNN estimate in standardized parameter units (only the response column
/// when `response_index` is set). Failed fits disqualify a candidate.
inline CvReport cv_select(const TrainingSet& training, const TrainingSet& test,
                          const std::vector<PseudoObservation>& pseudo, const CvSettings& cfg,
                          std::uint64_t seed = 0) {
  training.validate();
  test.validate();
  cfg.grid.validate();
  if (pseudo.empty()) throw InvalidArgument("cv_select: need at least one pseudo-observation");
  if (cfg.k_neighbours > test.size()) throw InvalidArgument("cv_select: test set smaller than k");

  const Standardizer t_scale = Standardizer::fit(training.parameters);
  const bool local = cfg.local_training && *cfg.local_training < training.size();

  // Per-pseudo-observation training sets (all identical in the global case).
  std::vector<TrainingSet> sets;
  if (local) {
    for (const auto& po : pseudo) sets.push_back(nearest_subset(training, po.summaries, *cfg.local_training));
  } else {
    sets.push_back(training);
  }

  CvReport report;
  report.n_pseudo_obs = static_cast<Index>(pseudo.size());
  for (const TrainingSet& ts : sets) {
    const Matrix theta_std = Standardizer::fit(ts.parameters).apply_rows(ts.parameters);
    report.sigma_s_center += median_heuristic(Standardizer::fit(ts.summaries).apply_rows(ts.summaries), seed);
    report.sigma_theta_center += median_heuristic(response_columns(theta_std, cfg.response_index), seed + 1);
  }
  report.sigma_s_center /= static_cast<double>(sets.size());
  report.sigma_theta_center /= static_cast<double>(sets.size());

  for (double fs : cfg.grid.sigma_s_factors)
    for (double ft : cfg.grid.sigma_theta_factors)
      for (double e : cfg.grid.eps_n_values)
        report.candidates.push_back({{fs * report.sigma_s_center, ft * report.sigma_theta_center, e}, 0.0, {}});

  parallel_for(report.candidates.size(), cfg.threads, [&](std::size_t c) {
    CvCandidate& cand = report.candidates[c];
    try {
      std::optional<LgkdrFitter> shared;
      if (!local) shared.emplace(training, cand.kernel, cfg.response_index);
      double total = 0.0;
      for (std::size_t k = 0; k < pseudo.size(); ++k) {
        const auto& po = pseudo[k];
        std::optional<LgkdrFitter> own;
        if (local) own.emplace(sets[k], cand.kernel, cfg.response_index);
        const LgkdrFitter& fitter = local ? *own : *shared;
        const SummaryConstructor sc = fitter.fit(po.summaries, cfg.target_dim, cfg.weight_quantile);
        const Matrix test_z = sc.transform_rows(test.summaries);
        const Vector est = knn_regress(test_z, test.parameters, sc.transform(po.summaries), cfg.k_neighbours);
        Vector err = ((est - po.theta).array() / t_scale.scales().array()).matrix();
        total += cfg.response_index ? err(*cfg.response_index) * err(*cfg.response_index) : err.squaredNorm();
      }
      cand.score = total / static_cast<double>(pseudo.size());
    } catch (const std::exception& ex) {
      cand.score = std::numeric_limits<double>::infinity();
      cand.error = ex.what();
    }
  });
  report.selected = cv_argmin(report.candidates);
  return report;
}

/// Simulates `settings.n_pseudo_obs` pseudo-observations from the model, then
/// runs the grid search.
inline CvReport cv_select(const Model& model, const TrainingSet& training, const TrainingSet& test,
                          const CvSettings& settings, std::uint64_t seed) {
  return cv_select(training, test, simulate_pseudo_observations(model, settings.n_pseudo_obs, seed), settings, seed);
}

}  // namespace lgabc
