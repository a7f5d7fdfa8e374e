#pragma once

// Experiment orchestration: JSON configuration, frozen simulation pools,
// strategy fitting, sampling per observation, MSE/AMSE and run persistence.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "lgabc/crossval.hpp"
#include "lgabc/errors.hpp"
#include "lgabc/kernel_linalg.hpp"
#include "lgabc/parallel.hpp"
#include "lgabc/random.hpp"
#include "lgabc/samplers.hpp"
#include "lgabc/simulators.hpp"
#include "lgabc/summaries.hpp"
#include "lgabc/text_io.hpp"

namespace lgabc {

using Json = nlohmann::ordered_json;

inline constexpr const char* kSoftwareVersion = "1.0.0";
inline constexpr int kConfigSchema = 1;

// ---------------------------------------------------------------- config

struct ModelConfig {
  std::string id = "mg1";  ///< mg1 | ricker | gaussian_toy
  Index series_length = 50;
  std::string summary_set = "E0";
  double log_r = 3.8;
  double phi = 10.0;
  bool free_log_r_phi = false;
  double prior_var = 1.0;
  Index toy_observations = 4;

  bool operator==(const ModelConfig&) const = default;
};

struct StrategyConfig {
  std::string id = "lgkdr";  ///< identity | identity-raw | linear | lgkdr | lgkdr-focus
  Index focus = 1;           ///< 1-based parameter index for lgkdr-focus
  std::optional<Index> target_dim = 4;  ///< nullopt: 70% eigenvalue-mass rule
  bool local = true;                    ///< linear: triweight-weighted regression
  double weight_quantile = 0.10;
  std::optional<KernelParams> kernel;   ///< fixed kernel; skips cross-validation

  bool operator==(const StrategyConfig&) const = default;

  bool is_lgkdr() const { return id == "lgkdr" || id == "lgkdr-focus"; }
  std::string label() const {
    std::string s = id == "lgkdr-focus" ? "lgkdr-focus-" + std::to_string(focus) : id;
    if (is_lgkdr() && target_dim) s += "-d" + std::to_string(*target_dim);
    return s;
  }
};

struct SamplerConfig {
  std::string id = "rejection";  ///< rejection | smc
  Index pool_size = 100000;
  std::optional<Index> n_acc;    ///< default: 1% of the pool for LGKDR, 0.1% otherwise
  Index particles = 1000;
  double eps_target = 0.0;
  double ess_fraction = 0.5;
  int max_rounds = 30;
  double quantile = 0.9;
  int move_repeats = 1;

  bool operator==(const SamplerConfig&) const = default;
};

struct SizesConfig {
  Index training = 2000;
  Index training_pool = 0;  ///< > training: LGKDR trains on the nearest `training` rows of this many
  Index test = 2000;
  Index pseudo_obs = 5;
  Index observations = 10;

  bool operator==(const SizesConfig&) const = default;
};

struct CvConfig {
  bool enabled = true;
  std::vector<double> sigma_s_factors{0.5, 1.0, 2.0};
  std::vector<double> sigma_theta_factors{0.5, 1.0, 2.0};
  std::vector<double> eps_n_values{1e-2, 1e-3};

  bool operator==(const CvConfig&) const = default;
  CvGrid grid() const { return {sigma_s_factors, sigma_theta_factors, eps_n_values}; }
};

struct ExperimentConfig {
  int schema_version = kConfigSchema;
  ModelConfig model;
  StrategyConfig strategy;
  SamplerConfig sampler;
  SizesConfig sizes;
  CvConfig cv;
  std::uint64_t seed = 1;
  std::string output_dir;
  std::string pool_path;  ///< shared pool file; reused when its key matches

  bool operator==(const ExperimentConfig&) const = default;

  Index n_acc() const {
    if (sampler.n_acc) return *sampler.n_acc;
    const double rate = strategy.is_lgkdr() ? 0.01 : 0.001;
    return std::max<Index>(1, static_cast<Index>(std::llround(rate * static_cast<double>(sampler.pool_size))));
  }

  void validate() const;
};

namespace detail {

inline const std::set<std::string> kModels{"mg1", "ricker", "gaussian_toy"};
inline const std::set<std::string> kStrategies{"identity", "identity-raw", "linear", "lgkdr", "lgkdr-focus"};
inline const std::set<std::string> kSamplers{"rejection", "smc"};

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError("config: " + msg);
}

inline void check_keys(const Json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  require(j.is_object(), where + " must be an object");
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* k : allowed) known = known || item.key() == k;
    require(known, "unknown key '" + item.key() + "' in " + where);
  }
}

template <class T>
void read_key(const Json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config: bad value for '" + std::string(key) + "' in " + where);
  }
}

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << v;
  return out.str();
}

}  // namespace detail

inline void ExperimentConfig::validate() const {
  using detail::require;
  require(schema_version == kConfigSchema, "unsupported schema_version " + std::to_string(schema_version));
  require(detail::kModels.count(model.id) == 1, "unknown model '" + model.id + "'");
  require(detail::kStrategies.count(strategy.id) == 1, "unknown strategy '" + strategy.id + "'");
  require(detail::kSamplers.count(sampler.id) == 1, "unknown sampler '" + sampler.id + "'");
  require(model.summary_set == "E0" || model.summary_set == "E1" || model.summary_set == "E2",
          "summary_set must be E0, E1 or E2");
  require(model.series_length >= kMg1Quantiles, "series_length must be at least 20");
  require(model.prior_var > 0.0 && model.toy_observations >= 2, "bad Gaussian toy settings");
  require(strategy.weight_quantile > 0.0 && strategy.weight_quantile <= 1.0, "weight_quantile must lie in (0, 1]");
  require(!strategy.target_dim || *strategy.target_dim >= 1, "target_dim must be positive");
  require(strategy.focus >= 1, "focus is a 1-based parameter index");
  if (strategy.kernel) {
    try {
      strategy.kernel->validate();
    } catch (const std::exception& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
  }
  require(sampler.pool_size >= 1 && sampler.particles >= 2, "counts must be positive");
  require(n_acc() >= 1 && n_acc() <= sampler.pool_size, "n_acc must lie in [1, pool_size]");
  require(sampler.ess_fraction > 0.0 && sampler.ess_fraction <= 1.0, "ess_fraction must lie in (0, 1]");
  require(sampler.quantile > 0.0 && sampler.quantile < 1.0, "quantile must lie in (0, 1)");
  require(sampler.max_rounds >= 0 && sampler.move_repeats >= 1 && sampler.eps_target >= 0.0, "bad SMC settings");
  require(sizes.training >= 2 && sizes.test >= 5 && sizes.pseudo_obs >= 1 && sizes.observations >= 1,
          "sizes must be positive (training >= 2, test >= 5)");
  require(sizes.training_pool == 0 || sizes.training_pool >= sizes.training, "training_pool must be 0 or >= training");
  try {
    cv.grid().validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

inline Json to_json(const KernelParams& k) {
  return Json{{"sigma_s", k.sigma_s}, {"sigma_theta", k.sigma_theta}, {"eps_n", k.eps_n}};
}

inline Json to_json(const ExperimentConfig& c) {
  Json j;
  j["schema_version"] = c.schema_version;
  j["model"] = {{"id", c.model.id},
                {"series_length", c.model.series_length},
                {"summary_set", c.model.summary_set},
                {"log_r", c.model.log_r},
                {"phi", c.model.phi},
                {"free_log_r_phi", c.model.free_log_r_phi},
                {"prior_var", c.model.prior_var},
                {"toy_observations", c.model.toy_observations}};
  Json s = {{"id", c.strategy.id},
            {"focus", c.strategy.focus},
            {"target_dim", c.strategy.target_dim ? Json(*c.strategy.target_dim) : Json("auto")},
            {"local", c.strategy.local},
            {"weight_quantile", c.strategy.weight_quantile}};
  s["kernel"] = c.strategy.kernel ? to_json(*c.strategy.kernel) : Json(nullptr);
  j["strategy"] = s;
  j["sampler"] = {{"id", c.sampler.id},
                  {"pool_size", c.sampler.pool_size},
                  {"n_acc", c.sampler.n_acc ? Json(*c.sampler.n_acc) : Json(nullptr)},
                  {"particles", c.sampler.particles},
                  {"eps_target", c.sampler.eps_target},
                  {"ess_fraction", c.sampler.ess_fraction},
                  {"max_rounds", c.sampler.max_rounds},
                  {"quantile", c.sampler.quantile},
                  {"move_repeats", c.sampler.move_repeats}};
  j["sizes"] = {{"training", c.sizes.training},
                {"training_pool", c.sizes.training_pool},
                {"test", c.sizes.test},
                {"pseudo_obs", c.sizes.pseudo_obs},
                {"observations", c.sizes.observations}};
  j["cv"] = {{"enabled", c.cv.enabled},
             {"sigma_s_factors", c.cv.sigma_s_factors},
             {"sigma_theta_factors", c.cv.sigma_theta_factors},
             {"eps_n_values", c.cv.eps_n_values}};
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  j["pool_path"] = c.pool_path;
  return j;
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline ExperimentConfig config_from_json(const Json& j) {
  using detail::read_key;
  ExperimentConfig c;
  detail::check_keys(j, {"schema_version", "model", "strategy", "sampler", "sizes", "cv", "seed", "output_dir", "pool_path"},
                     "config");
  read_key(j, "schema_version", c.schema_version, "config");
  read_key(j, "seed", c.seed, "config");
  read_key(j, "output_dir", c.output_dir, "config");
  read_key(j, "pool_path", c.pool_path, "config");
  if (j.contains("model")) {
    const Json& m = j["model"];
    detail::check_keys(m, {"id", "series_length", "summary_set", "log_r", "phi", "free_log_r_phi", "prior_var",
                           "toy_observations"},
                       "model");
    read_key(m, "id", c.model.id, "model");
    read_key(m, "series_length", c.model.series_length, "model");
    read_key(m, "summary_set", c.model.summary_set, "model");
    read_key(m, "log_r", c.model.log_r, "model");
    read_key(m, "phi", c.model.phi, "model");
    read_key(m, "free_log_r_phi", c.model.free_log_r_phi, "model");
    read_key(m, "prior_var", c.model.prior_var, "model");
    read_key(m, "toy_observations", c.model.toy_observations, "model");
  }
  if (j.contains("strategy")) {
    const Json& s = j["strategy"];
    detail::check_keys(s, {"id", "focus", "target_dim", "local", "weight_quantile", "kernel"}, "strategy");
    read_key(s, "id", c.strategy.id, "strategy");
    read_key(s, "focus", c.strategy.focus, "strategy");
    read_key(s, "local", c.strategy.local, "strategy");
    read_key(s, "weight_quantile", c.strategy.weight_quantile, "strategy");
    if (s.contains("target_dim")) {
      const Json& d = s["target_dim"];
      if (d.is_string() && d.get<std::string>() == "auto") {
        c.strategy.target_dim.reset();
      } else if (d.is_number_integer()) {
        c.strategy.target_dim = d.get<Index>();
      } else {
        throw ConfigError("config: target_dim must be an integer or \"auto\"");
      }
    }
    if (s.contains("kernel") && !s["kernel"].is_null()) {
      const Json& k = s["kernel"];
      detail::check_keys(k, {"sigma_s", "sigma_theta", "eps_n"}, "kernel");
      KernelParams kp;
      read_key(k, "sigma_s", kp.sigma_s, "kernel");
      read_key(k, "sigma_theta", kp.sigma_theta, "kernel");
      read_key(k, "eps_n", kp.eps_n, "kernel");
      c.strategy.kernel = kp;
    }
  }
  if (j.contains("sampler")) {
    const Json& s = j["sampler"];
    detail::check_keys(s, {"id", "pool_size", "n_acc", "particles", "eps_target", "ess_fraction", "max_rounds",
                           "quantile", "move_repeats"},
                       "sampler");
    read_key(s, "id", c.sampler.id, "sampler");
    read_key(s, "pool_size", c.sampler.pool_size, "sampler");
    if (s.contains("n_acc") && !s["n_acc"].is_null()) {
      Index v = 0;
      read_key(s, "n_acc", v, "sampler");
      c.sampler.n_acc = v;
    }
    read_key(s, "particles", c.sampler.particles, "sampler");
    read_key(s, "eps_target", c.sampler.eps_target, "sampler");
    read_key(s, "ess_fraction", c.sampler.ess_fraction, "sampler");
    read_key(s, "max_rounds", c.sampler.max_rounds, "sampler");
    read_key(s, "quantile", c.sampler.quantile, "sampler");
    read_key(s, "move_repeats", c.sampler.move_repeats, "sampler");
  }
  if (j.contains("sizes")) {
    const Json& s = j["sizes"];
    detail::check_keys(s, {"training", "training_pool", "test", "pseudo_obs", "observations"}, "sizes");
    read_key(s, "training", c.sizes.training, "sizes");
    read_key(s, "training_pool", c.sizes.training_pool, "sizes");
    read_key(s, "test", c.sizes.test, "sizes");
    read_key(s, "pseudo_obs", c.sizes.pseudo_obs, "sizes");
    read_key(s, "observations", c.sizes.observations, "sizes");
  }
  if (j.contains("cv")) {
    const Json& s = j["cv"];
    detail::check_keys(s, {"enabled", "sigma_s_factors", "sigma_theta_factors", "eps_n_values"}, "cv");
    read_key(s, "enabled", c.cv.enabled, "cv");
    read_key(s, "sigma_s_factors", c.cv.sigma_s_factors, "cv");
    read_key(s, "sigma_theta_factors", c.cv.sigma_theta_factors, "cv");
    read_key(s, "eps_n_values", c.cv.eps_n_values, "cv");
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  Json j;
  try {
    j = Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return config_from_json(j);
}

/// Hash of everything that determines results (output locations excluded).
inline std::string config_hash(const ExperimentConfig& c) {
  Json j = to_json(c);
  j.erase("output_dir");
  j.erase("pool_path");
  return detail::hex64(detail::fnv1a64(j.dump()));
}

/// Key of the frozen pool: model, seed and pool size only, so strategies share it.
inline std::string pool_key(const ExperimentConfig& c) {
  const Json j = {{"format", "lgabc-pool 1"}, {"model", to_json(c)["model"]}, {"seed", c.seed},
                  {"pool_size", c.sampler.pool_size}};
  return detail::hex64(detail::fnv1a64(j.dump()));
}

inline std::unique_ptr<Model> make_model(const ModelConfig& m) {
  if (m.id == "mg1") return std::make_unique<Mg1Model>(m.series_length);
  if (m.id == "gaussian_toy") return std::make_unique<GaussianToyModel>(m.prior_var, m.toy_observations);
  if (m.id == "ricker") {
    const RickerSet set = m.summary_set == "E0" ? RickerSet::E0 : m.summary_set == "E1" ? RickerSet::E1 : RickerSet::E2;
    RickerPriorConfig prior;
    prior.log_r = m.log_r;
    prior.phi = m.phi;
    prior.free_log_r_phi = m.free_log_r_phi;
    return std::make_unique<RickerModel>(set, prior);
  }
  throw ConfigError("config: unknown model '" + m.id + "'");
}

// ---------------------------------------------------------------- data

/// Simulated (theta, raw-data seed, initial summaries) triples. Raw data is
/// regenerable as model.simulate_seeded(theta, data_seed).
struct SimulationBatch {
  Matrix theta;
  Matrix summaries;
  std::vector<std::uint64_t> item_seeds;
  std::vector<std::uint64_t> data_seeds;

  Index size() const { return theta.rows(); }
  TrainingSet as_training() const { return {summaries, theta}; }
};

inline SimulationBatch simulate_batch(const Model& model, Index n, std::uint64_t seed, Stream stream, int threads) {
  SimulationBatch b;
  b.theta.resize(n, model.spec().parameter_dim());
  b.summaries.resize(n, model.spec().summary_dim);
  b.item_seeds.resize(static_cast<std::size_t>(n));
  b.data_seeds.resize(static_cast<std::size_t>(n));
  parallel_for(static_cast<std::size_t>(n), threads, [&](std::size_t i) {
    const std::uint64_t item = derive_seed(seed, stream, i);
    Rng rng(item);
    const Vector th = model.sample_prior(rng);
    const std::uint64_t ds = rng.next_u64();
    const std::vector<double> raw = model.simulate_seeded(th, ds);
    b.theta.row(static_cast<Index>(i)) = th.transpose();
    b.summaries.row(static_cast<Index>(i)) = model.summaries(raw).transpose();
    b.item_seeds[i] = item;
    b.data_seeds[i] = ds;
  });
  return b;
}

namespace detail {

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline std::uint64_t parse_u64(const std::string& s) {
  std::size_t used = 0;
  const unsigned long long v = std::stoull(s, &used);
  if (used != s.size()) throw InvalidArgument("bad integer '" + s + "'");
  return v;
}

}  // namespace detail

/// Writes `content` to a sibling temporary and renames it over `path`.
inline void atomic_write(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InvalidArgument("cannot write " + tmp.string());
    out << content;
    if (!out) throw InvalidArgument("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string batch_header(const ModelSpec& spec, bool with_index) {
  std::string h = with_index ? "index,item_seed,data_seed" : "item_seed,data_seed";
  for (const auto& name : spec.parameter_names) h += "," + name;
  for (Index k = 0; k < spec.summary_dim; ++k) h += ",s" + std::to_string(k + 1);
  return h;
}

inline std::string batch_to_csv(const SimulationBatch& b, const ModelSpec& spec, const std::string& comment) {
  std::ostringstream out;
  if (!comment.empty()) out << "# " << comment << '\n';
  out << batch_header(spec, true) << '\n';
  for (Index i = 0; i < b.size(); ++i) {
    out << i << ',' << b.item_seeds[static_cast<std::size_t>(i)] << ',' << b.data_seeds[static_cast<std::size_t>(i)];
    for (Index k = 0; k < b.theta.cols(); ++k) out << ',' << io::format_double(b.theta(i, k));
    for (Index k = 0; k < b.summaries.cols(); ++k) out << ',' << io::format_double(b.summaries(i, k));
    out << '\n';
  }
  return out.str();
}

/// Reads a batch written by batch_to_csv. Returns nullopt when the comment
/// line does not carry `expected_comment`; an empty one means no comment line.
inline std::optional<SimulationBatch> batch_from_csv(std::istream& in, const ModelSpec& spec,
                                                     const std::string& expected_comment) {
  std::string line;
  if (!expected_comment.empty() && (!std::getline(in, line) || line != "# " + expected_comment)) return std::nullopt;
  if (!std::getline(in, line) || line != batch_header(spec, true)) throw InvalidArgument("pool file: bad header");
  const Index p = spec.parameter_dim(), m = spec.summary_dim;
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    rows.push_back(detail::split_csv(line));
    if (static_cast<Index>(rows.back().size()) != 3 + p + m) throw InvalidArgument("pool file: bad row width");
  }
  SimulationBatch b;
  const auto n = static_cast<Index>(rows.size());
  b.theta.resize(n, p);
  b.summaries.resize(n, m);
  for (Index i = 0; i < n; ++i) {
    const auto& r = rows[static_cast<std::size_t>(i)];
    if (detail::parse_u64(r[0]) != static_cast<std::uint64_t>(i)) throw InvalidArgument("pool file: rows out of order");
    b.item_seeds.push_back(detail::parse_u64(r[1]));
    b.data_seeds.push_back(detail::parse_u64(r[2]));
    for (Index k = 0; k < p; ++k) b.theta(i, k) = io::parse_double(r[static_cast<std::size_t>(3 + k)]);
    for (Index k = 0; k < m; ++k) b.summaries(i, k) = io::parse_double(r[static_cast<std::size_t>(3 + p + k)]);
  }
  return b;
}

/// Observations, frozen pool and training/test sets shared by every strategy
/// run on the same model and seed.
struct PreparedData {
  std::unique_ptr<Model> model;
  SimulationBatch observations;
  SimulationBatch pool;
  SimulationBatch training;  ///< training_pool rows when local training is enabled
  SimulationBatch test;
  std::string pool_key;
  bool pool_reused = false;
};

struct PrepareOptions {
  bool pool = true;
  bool training = true;
  int threads = 1;
};

inline PreparedData prepare_data(const ExperimentConfig& cfg, const PrepareOptions& opt = {}) {
  cfg.validate();
  PreparedData d;
  d.model = make_model(cfg.model);
  const Model& model = *d.model;
  d.observations = simulate_batch(model, cfg.sizes.observations, cfg.seed, Stream::observation, opt.threads);
  d.pool_key = pool_key(cfg);
  if (opt.pool) {
    const std::string tag = "lgabc-pool key=" + d.pool_key;
    if (!cfg.pool_path.empty() && std::filesystem::exists(cfg.pool_path)) {
      std::ifstream in(cfg.pool_path);
      if (auto b = batch_from_csv(in, model.spec(), tag)) {
        d.pool = std::move(*b);
        d.pool_reused = true;
      }
    }
    if (!d.pool_reused) {
      d.pool = simulate_batch(model, cfg.sampler.pool_size, cfg.seed, Stream::pool, opt.threads);
      if (!cfg.pool_path.empty()) atomic_write(cfg.pool_path, batch_to_csv(d.pool, model.spec(), tag));
    }
  }
  if (opt.training) {
    const Index n_train = std::max(cfg.sizes.training, cfg.sizes.training_pool);
    d.training = simulate_batch(model, n_train, cfg.seed, Stream::training, opt.threads);
    d.test = simulate_batch(model, cfg.sizes.test, cfg.seed, Stream::test, opt.threads);
  }
  return d;
}

// ---------------------------------------------------------------- metrics

/// Per-parameter sum_i W_i (theta_true - draw_i)^2 with normalized weights.
inline Vector mse(const MatrixRef& draws, const VectorRef& truth, std::optional<Vector> weights = std::nullopt) {
  const Index n = draws.rows();
  if (n < 1) throw InvalidArgument("mse: no draws");
  if (draws.cols() != truth.size()) throw InvalidArgument("mse: dimension mismatch");
  Vector w = weights ? *weights : Vector::Constant(n, 1.0);
  if (w.size() != n || (w.array() < 0.0).any() || !(w.sum() > 0.0)) throw InvalidArgument("mse: bad weights");
  w /= w.sum();
  Vector out = Vector::Zero(truth.size());
  for (Index i = 0; i < n; ++i) out += w(i) * (draws.row(i).transpose() - truth).array().square().matrix();
  return out;
}

/// Column means of the per-observation MSE rows.
inline Vector amse(const MatrixRef& per_observation) {
  if (per_observation.rows() < 1) throw InvalidArgument("amse: no observations");
  return per_observation.colwise().mean().transpose();
}

// ---------------------------------------------------------------- runs

struct ObservationResult {
  Vector theta_true;
  std::vector<Index> ids;  ///< pool index (rejection) or particle index (SMC)
  Matrix draws;
  Vector weights;
  Vector distances;
  Vector mse;
  Index simulations = 0;
  Index dimension = 0;  ///< constructed summary dimension
  double epsilon = 0.0;
  std::string stop_reason;
  std::vector<RoundTrace> trace;
  std::optional<SummaryConstructor> constructor;
};

struct RunRecord {
  std::string version = kSoftwareVersion;
  std::string config_hash;
  std::string model;
  std::string strategy;
  std::string sampler;
  std::string pool_key;
  std::vector<std::string> parameter_names;
  std::vector<std::uint64_t> observation_seeds;
  Matrix observation_theta;
  Matrix mse;  ///< observations x parameters
  Vector amse;
  Index simulations = 0;
  std::vector<Index> dimensions;
  std::optional<KernelParams> kernel;
  double wall_clock = 0.0;  ///< seconds; never part of metrics.json
};

struct RunOutput {
  RunRecord record;
  std::vector<ObservationResult> observations;
  std::optional<CvReport> cv;
};

namespace detail {

template <class F>
auto staged(const char* stage, F&& fn) -> decltype(fn()) {
  const std::string tag = std::string("stage ") + stage + ": ";
  try {
    return fn();
  } catch (const DegeneracyError& e) {
    throw DegeneracyError(tag + e.what());
  } catch (const NumericalError& e) {
    throw NumericalError(tag + e.what(), e.pivot());
  } catch (const ConfigError& e) {
    throw ConfigError(tag + e.what());
  } catch (const InvalidArgument& e) {
    throw InvalidArgument(tag + e.what());
  }
}

inline std::optional<Index> response_of(const StrategyConfig& s) {
  if (s.id == "lgkdr-focus") return s.focus - 1;
  return std::nullopt;
}

}  // namespace detail

/// Kernel for LGKDR strategies: the configured one, the cross-validated one,
/// or the median-heuristic centre with eps_n = 1e-3.
inline KernelParams select_kernel(const ExperimentConfig& cfg, const PreparedData& data, int threads,
                                  std::optional<CvReport>& report) {
  if (cfg.strategy.kernel) return *cfg.strategy.kernel;
  const std::optional<Index> response = detail::response_of(cfg.strategy);
  const bool local = cfg.sizes.training_pool > cfg.sizes.training;
  if (!cfg.cv.enabled) {
    TrainingSet ts = data.training.as_training();
    if (local) ts = nearest_subset(ts, data.observations.summaries.row(0).transpose(), cfg.sizes.training);
    const Matrix theta = Standardizer::fit(ts.parameters).apply_rows(ts.parameters);
    return {median_heuristic(Standardizer::fit(ts.summaries).apply_rows(ts.summaries), cfg.seed),
            median_heuristic(response_columns(theta, response), cfg.seed + 1), 1e-3};
  }
  CvSettings cs;
  cs.grid = cfg.cv.grid();
  cs.n_pseudo_obs = cfg.sizes.pseudo_obs;
  cs.target_dim = cfg.strategy.target_dim;
  cs.weight_quantile = cfg.strategy.weight_quantile;
  cs.response_index = response;
  if (local) cs.local_training = cfg.sizes.training;
  cs.threads = threads;
  report = cv_select(*data.model, data.training.as_training(), data.test.as_training(), cs, cfg.seed);
  return report->selected_kernel();
}

/// Fits the configured strategy for observation `j` and samples from it.
inline ObservationResult run_observation(const ExperimentConfig& cfg, const PreparedData& data, Index j,
                                         const std::optional<KernelParams>& kernel,
                                         const std::optional<LgkdrFitter>& shared_fitter,
                                         const std::optional<Matrix>& shared_pool_z,
                                         const std::optional<SummaryConstructor>& shared_constructor) {
  const Model& model = *data.model;
  const StrategyConfig& st = cfg.strategy;
  const Vector s_obs = data.observations.summaries.row(j).transpose();
  ObservationResult r;
  r.theta_true = data.observations.theta.row(j).transpose();

  SummaryConstructor sc = detail::staged("fit", [&]() -> SummaryConstructor {
    if (shared_constructor) return *shared_constructor;
    const TrainingSet all = data.training.as_training();
    if (st.id == "linear") return fit_linear_posterior_mean(all, st.local, st.weight_quantile, s_obs);
    const bool local = cfg.sizes.training_pool > cfg.sizes.training;
    SummaryConstructor fitted = [&]() {
      if (shared_fitter) return shared_fitter->fit(s_obs, st.target_dim, st.weight_quantile);
      const TrainingSet ts = local ? nearest_subset(all, s_obs, cfg.sizes.training) : all;
      return LgkdrFitter(ts, *kernel, detail::response_of(st)).fit(s_obs, st.target_dim, st.weight_quantile);
    }();
    if (st.id == "lgkdr-focus") return SummaryConstructor::composite({std::move(fitted)}, {st.focus - 1});
    return fitted;
  });
  r.dimension = sc.output_dim();

  if (cfg.sampler.id == "rejection") {
    const RejectionResult rr = detail::staged("sample", [&] {
      if (shared_pool_z) return rejection_abc(*shared_pool_z, data.pool.theta, sc.transform(s_obs), cfg.n_acc());
      return rejection_abc(sc, data.pool.summaries, data.pool.theta, s_obs, cfg.n_acc());
    });
    const auto n = static_cast<Index>(rr.accepted.size());
    r.draws.resize(n, data.pool.theta.cols());
    r.weights = Vector::Constant(n, 1.0 / static_cast<double>(n));
    r.distances.resize(n);
    for (Index i = 0; i < n; ++i) {
      const auto& a = rr.accepted[static_cast<std::size_t>(i)];
      r.ids.push_back(a.pool_index);
      r.draws.row(i) = a.theta.transpose();
      r.distances(i) = a.distance;
    }
    r.simulations = rr.total_simulated;
    r.epsilon = rr.epsilon_effective;
  } else {
    SmcOptions opt;
    opt.n_particles = cfg.sampler.particles;
    opt.eps_target = cfg.sampler.eps_target;
    opt.ess_fraction = cfg.sampler.ess_fraction;
    opt.max_rounds = cfg.sampler.max_rounds;
    opt.quantile = cfg.sampler.quantile;
    opt.move_repeats = cfg.sampler.move_repeats;
    const SimulationContext ctx{model, sc, sc.transform(s_obs)};
    const std::uint64_t master = derive_seed(cfg.seed, {0x534d43ULL, static_cast<std::uint64_t>(j)});
    const SmcState state = detail::staged("sample", [&] { return smc_abc(ctx, opt, master); });
    r.draws = state.thetas();
    r.weights = state.weights();
    r.distances.resize(static_cast<Index>(state.particles.size()));
    for (std::size_t i = 0; i < state.particles.size(); ++i) {
      r.ids.push_back(static_cast<Index>(i));
      r.distances(static_cast<Index>(i)) = state.particles[i].distance;
    }
    r.simulations = state.simulations;
    r.epsilon = state.epsilon;
    r.stop_reason = state.stop_reason;
    r.trace = state.trace;
  }
  r.mse = mse(r.draws, r.theta_true, r.weights);
  r.constructor = std::move(sc);
  return r;
}

/// Kernel selection, per-observation fits, sampling and metrics on prepared data.
inline RunOutput run_strategy(const ExperimentConfig& cfg, const PreparedData& data, int threads = 1) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  const StrategyConfig& st = cfg.strategy;
  const TrainingSet all = data.training.as_training();
  RunOutput out;

  std::optional<KernelParams> kernel;
  std::optional<LgkdrFitter> shared_fitter;
  std::optional<SummaryConstructor> shared_constructor;
  std::optional<Matrix> shared_pool_z;
  if (st.is_lgkdr()) {
    kernel = detail::staged("cv", [&] { return select_kernel(cfg, data, threads, out.cv); });
    if (cfg.sizes.training_pool <= cfg.sizes.training) {
      shared_fitter.emplace(detail::staged("fit", [&] {
        return LgkdrFitter(all, *kernel, detail::response_of(st));
      }));
    }
  } else if (st.id == "identity" || st.id == "identity-raw") {
    shared_constructor = st.id == "identity" ? fit_identity(all) : fit_identity_unscaled(all);
    if (cfg.sampler.id == "rejection") shared_pool_z = shared_constructor->transform_rows(data.pool.summaries);
  }

  const Index n_obs = data.observations.size();
  out.observations.resize(static_cast<std::size_t>(n_obs));
  parallel_for(static_cast<std::size_t>(n_obs), threads, [&](std::size_t j) {
    out.observations[j] = run_observation(cfg, data, static_cast<Index>(j), kernel, shared_fitter, shared_pool_z,
                                          shared_constructor);
  });

  RunRecord& rec = out.record;
  rec.config_hash = config_hash(cfg);
  rec.model = data.model->spec().summary_id;
  rec.strategy = st.label();
  rec.sampler = cfg.sampler.id;
  rec.pool_key = cfg.sampler.id == "rejection" ? data.pool_key : "";
  rec.parameter_names = data.model->spec().parameter_names;
  rec.observation_seeds = data.observations.item_seeds;
  rec.observation_theta = data.observations.theta;
  rec.mse.resize(n_obs, data.model->spec().parameter_dim());
  for (Index j = 0; j < n_obs; ++j) {
    const auto& o = out.observations[static_cast<std::size_t>(j)];
    rec.mse.row(j) = o.mse.transpose();
    rec.simulations += o.simulations;
    rec.dimensions.push_back(o.dimension);
  }
  rec.amse = amse(rec.mse);
  rec.kernel = kernel;
  rec.wall_clock = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

// ---------------------------------------------------------------- persistence

inline Json to_json(const RunRecord& r) {
  Json j;
  j["version"] = r.version;
  j["config_hash"] = r.config_hash;
  j["model"] = r.model;
  j["strategy"] = r.strategy;
  j["sampler"] = r.sampler;
  j["pool_key"] = r.pool_key;
  j["parameters"] = r.parameter_names;
  j["observation_seeds"] = r.observation_seeds;
  Json theta = Json::array(), mse_rows = Json::array();
  for (Index i = 0; i < r.mse.rows(); ++i) {
    theta.push_back(std::vector<double>(r.observation_theta.row(i).begin(), r.observation_theta.row(i).end()));
    mse_rows.push_back(std::vector<double>(r.mse.row(i).begin(), r.mse.row(i).end()));
  }
  j["observation_theta"] = theta;
  j["mse"] = mse_rows;
  j["amse"] = std::vector<double>(r.amse.begin(), r.amse.end());
  j["simulations"] = r.simulations;
  j["dimensions"] = r.dimensions;
  j["kernel"] = r.kernel ? to_json(*r.kernel) : Json(nullptr);
  return j;
}

inline RunRecord record_from_json(const Json& j) {
  try {
    RunRecord r;
    r.version = j.at("version").get<std::string>();
    r.config_hash = j.at("config_hash").get<std::string>();
    r.model = j.at("model").get<std::string>();
    r.strategy = j.at("strategy").get<std::string>();
    r.sampler = j.at("sampler").get<std::string>();
    r.pool_key = j.at("pool_key").get<std::string>();
    r.parameter_names = j.at("parameters").get<std::vector<std::string>>();
    r.observation_seeds = j.at("observation_seeds").get<std::vector<std::uint64_t>>();
    const auto theta = j.at("observation_theta").get<std::vector<std::vector<double>>>();
    const auto rows = j.at("mse").get<std::vector<std::vector<double>>>();
    const auto p = static_cast<Index>(r.parameter_names.size());
    const auto n = static_cast<Index>(rows.size());
    if (static_cast<Index>(theta.size()) != n) throw InvalidArgument("metrics: row counts disagree");
    r.mse.resize(n, p);
    r.observation_theta.resize(n, p);
    for (Index i = 0; i < n; ++i) {
      if (static_cast<Index>(rows[static_cast<std::size_t>(i)].size()) != p ||
          static_cast<Index>(theta[static_cast<std::size_t>(i)].size()) != p) {
        throw InvalidArgument("metrics: bad row width");
      }
      for (Index k = 0; k < p; ++k) {
        r.mse(i, k) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
        r.observation_theta(i, k) = theta[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
      }
    }
    const auto a = j.at("amse").get<std::vector<double>>();
    r.amse = Eigen::Map<const Vector>(a.data(), static_cast<Index>(a.size()));
    r.simulations = j.at("simulations").get<Index>();
    r.dimensions = j.at("dimensions").get<std::vector<Index>>();
    if (!j.at("kernel").is_null()) {
      const Json& k = j["kernel"];
      r.kernel = KernelParams{k.at("sigma_s").get<double>(), k.at("sigma_theta").get<double>(), k.at("eps_n").get<double>()};
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("metrics: ") + e.what());
  }
}

inline RunRecord load_record(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open " + path.string());
  try {
    return record_from_json(Json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw InvalidArgument(path.string() + ": " + e.what());
  }
}

inline Json to_json(const CvReport& r) {
  Json c = Json::array();
  for (const auto& cand : r.candidates) {
    Json e = to_json(cand.kernel);
    e["score"] = std::isfinite(cand.score) ? Json(cand.score) : Json(nullptr);
    e["error"] = cand.error;
    c.push_back(e);
  }
  return {{"n_pseudo_obs", r.n_pseudo_obs},
          {"sigma_s_center", r.sigma_s_center},
          {"sigma_theta_center", r.sigma_theta_center},
          {"selected", r.selected},
          {"candidates", c}};
}

inline std::string observations_csv(const SimulationBatch& obs, const ModelSpec& spec) {
  return batch_to_csv(obs, spec, "");
}

inline std::string posterior_csv(const ObservationResult& r, const ModelSpec& spec) {
  std::ostringstream out;
  out << "id";
  for (const auto& name : spec.parameter_names) out << ',' << name;
  out << ",weight,distance\n";
  for (Index i = 0; i < r.draws.rows(); ++i) {
    out << r.ids[static_cast<std::size_t>(i)];
    for (Index k = 0; k < r.draws.cols(); ++k) out << ',' << io::format_double(r.draws(i, k));
    out << ',' << io::format_double(r.weights(i)) << ',' << io::format_double(r.distances(i)) << '\n';
  }
  return out.str();
}

inline std::string trace_csv(const std::vector<RoundTrace>& trace) {
  std::ostringstream out;
  out << "round,epsilon,ess,acceptance_rate,cumulative_simulations,resampled\n";
  for (const auto& t : trace) {
    out << t.round << ',' << io::format_double(t.epsilon) << ',' << io::format_double(t.ess) << ','
        << io::format_double(t.acceptance_rate) << ',' << t.cumulative_simulations << ',' << (t.resampled ? 1 : 0)
        << '\n';
  }
  return out.str();
}

inline std::string dump_json(const Json& j) { return j.dump(2) + "\n"; }

/// Writes config.json, observations.csv, the pool (or a reference to it),
/// per-observation posteriors and traces, constructors, cv.json,
/// metrics.json and timing.json.
inline void write_run(const std::filesystem::path& dir, const ExperimentConfig& cfg, const PreparedData& data,
                      const RunOutput& run) {
  const ModelSpec& spec = data.model->spec();
  atomic_write(dir / "config.json", dump_json(to_json(cfg)));
  atomic_write(dir / "observations.csv", observations_csv(data.observations, spec));
  if (cfg.sampler.id == "rejection") {
    if (cfg.pool_path.empty()) {
      atomic_write(dir / "pool.csv", batch_to_csv(data.pool, spec, "lgabc-pool key=" + data.pool_key));
    } else {
      atomic_write(dir / "pool_ref.json", dump_json({{"pool_key", data.pool_key}, {"pool_path", cfg.pool_path}}));
    }
  }
  for (std::size_t j = 0; j < run.observations.size(); ++j) {
    const ObservationResult& o = run.observations[j];
    atomic_write(dir / ("posterior_" + std::to_string(j) + ".csv"), posterior_csv(o, spec));
    if (!o.trace.empty()) atomic_write(dir / ("trace_" + std::to_string(j) + ".csv"), trace_csv(o.trace));
    if (o.constructor) {
      std::ostringstream s;
      o.constructor->save(s);
      atomic_write(dir / ("summary_" + std::to_string(j) + ".txt"), s.str());
    }
  }
  if (run.cv) atomic_write(dir / "cv.json", dump_json(to_json(*run.cv)));
  atomic_write(dir / "metrics.json", dump_json(to_json(run.record)));
  atomic_write(dir / "timing.json", dump_json({{"wall_clock_seconds", run.record.wall_clock}}));
}

/// Data, strategy, sampling, metrics, and persistence when
/// `cfg.output_dir` is set.
inline RunOutput run_experiment(const ExperimentConfig& cfg, int threads = 1) {
  PrepareOptions po;
  po.pool = cfg.sampler.id == "rejection";
  po.threads = threads;
  const PreparedData data = detail::staged("prepare", [&] { return prepare_data(cfg, po); });
  RunOutput run = run_strategy(cfg, data, threads);
  if (!cfg.output_dir.empty()) write_run(cfg.output_dir, cfg, data, run);
  return run;
}

/// Recomputes MSE rows from a run directory's observations.csv and
/// posterior_<j>.csv files.
inline Matrix evaluate_run_dir(const std::filesystem::path& dir) {
  const ExperimentConfig cfg = load_config((dir / "config.json").string());
  const std::unique_ptr<Model> model = make_model(cfg.model);
  const ModelSpec& spec = model->spec();
  std::ifstream obs_in(dir / "observations.csv");
  if (!obs_in) throw InvalidArgument("cannot open observations.csv in " + dir.string());
  const auto obs = batch_from_csv(obs_in, spec, "");
  if (!obs) throw InvalidArgument("observations.csv: bad format");
  const Index p = spec.parameter_dim();
  Matrix rows(obs->size(), p);
  for (Index j = 0; j < obs->size(); ++j) {
    std::ifstream in(dir / ("posterior_" + std::to_string(j) + ".csv"));
    if (!in) throw InvalidArgument("missing posterior_" + std::to_string(j) + ".csv");
    std::string line;
    std::getline(in, line);
    std::vector<std::vector<double>> draws;
    std::vector<double> weights;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto cells = detail::split_csv(line);
      if (static_cast<Index>(cells.size()) != p + 3) throw InvalidArgument("posterior file: bad row width");
      std::vector<double> th;
      for (Index k = 0; k < p; ++k) th.push_back(io::parse_double(cells[static_cast<std::size_t>(1 + k)]));
      draws.push_back(th);
      weights.push_back(io::parse_double(cells[static_cast<std::size_t>(1 + p)]));
    }
    Matrix d(static_cast<Index>(draws.size()), p);
    for (Index i = 0; i < d.rows(); ++i)
      for (Index k = 0; k < p; ++k) d(i, k) = draws[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
    const Vector w = Eigen::Map<const Vector>(weights.data(), static_cast<Index>(weights.size()));
    rows.row(j) = mse(d, obs->theta.row(j).transpose(), w).transpose();
  }
  return rows;
}

// ---------------------------------------------------------------- reports

/// Aligned AMSE table, one row per record. Records must share the model and
/// observation seeds.
inline std::string compare_report(const std::vector<RunRecord>& records) {
  if (records.empty()) throw InvalidArgument("compare_report: no records");
  const RunRecord& first = records.front();
  for (const auto& r : records) {
    if (r.observation_seeds != first.observation_seeds) {
      throw InvalidArgument("compare_report: observation seeds differ between records");
    }
    if (r.parameter_names != first.parameter_names) throw InvalidArgument("compare_report: parameter sets differ");
  }
  auto label = [](const RunRecord& r) { return r.strategy + "/" + r.sampler; };
  std::size_t width = 8;
  for (const auto& r : records) width = std::max(width, label(r).size());
  std::ostringstream out;
  out << "model " << first.model << ", " << first.observation_seeds.size() << " observations\n";
  out << std::left << std::setw(static_cast<int>(width + 2)) << "strategy";
  for (const auto& name : first.parameter_names) out << std::right << std::setw(14) << name;
  out << std::right << std::setw(14) << "simulations" << "  pool\n";
  for (const auto& r : records) {
    out << std::left << std::setw(static_cast<int>(width + 2)) << label(r);
    for (Index k = 0; k < r.amse.size(); ++k) {
      std::ostringstream cell;
      cell << std::setprecision(6) << r.amse(k);
      out << std::right << std::setw(14) << cell.str();
    }
    out << std::right << std::setw(14) << r.simulations << "  " << (r.pool_key.empty() ? "-" : r.pool_key) << '\n';
  }
  return out.str();
}

/// Median over observations of one parameter's MSE.
inline double median_mse(const RunRecord& r, Index k) {
  std::vector<double> v(r.mse.col(k).begin(), r.mse.col(k).end());
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---------------------------------------------------------------- canned experiments

struct CannedExperiment {
  ExperimentConfig base;
  std::vector<StrategyConfig> strategies;
  std::vector<std::string> samplers;  ///< parallel to strategies
};

inline StrategyConfig strategy(const std::string& id, std::optional<Index> dim = 4, Index focus = 1) {
  StrategyConfig s;
  s.id = id;
  s.target_dim = dim;
  s.focus = focus;
  return s;
}

/// Desk-scale versions of the toy, M/G/1 and Ricker experiments.
inline CannedExperiment canned_experiment(const std::string& name) {
  CannedExperiment c;
  ExperimentConfig& b = c.base;
  if (name == "toy") {
    b.model.id = "gaussian_toy";
    b.sampler.pool_size = 10000;
    b.sampler.n_acc = 100;
    b.sampler.particles = 1000;
    b.sizes = {500, 0, 500, 3, 10};
    c.strategies = {strategy("identity"), strategy("identity")};
    c.samplers = {"rejection", "smc"};
  } else if (name == "mg1") {
    b.model.id = "mg1";
    b.sampler.pool_size = 100000;
    b.sizes = {2000, 20000, 2000, 3, 10};
    c.strategies = {strategy("identity"), strategy("identity-raw"), strategy("linear"), strategy("lgkdr", 4),
                    strategy("lgkdr-focus", 4, 1)};
    c.samplers.assign(c.strategies.size(), "rejection");
  } else if (name == "ricker") {
    b.model.id = "ricker";
    b.sampler.pool_size = 100000;
    b.sizes = {2000, 0, 2000, 3, 5};
    c.strategies = {strategy("identity"), strategy("lgkdr", 5)};
    c.samplers.assign(c.strategies.size(), "rejection");
  } else if (name == "ricker-smc") {
    b.model.id = "ricker";
    b.model.free_log_r_phi = true;
    b.sampler.particles = 1000;
    b.sampler.max_rounds = 100;
    b.sizes = {2000, 20000, 2000, 3, 1};
    c.strategies = {strategy("lgkdr", 3), strategy("lgkdr", 6)};
    c.samplers.assign(c.strategies.size(), "smc");
  } else {
    throw ConfigError("unknown experiment '" + name + "' (expected toy, mg1, ricker or ricker-smc)");
  }
  return c;
}

/// Summary set per strategy in the Ricker experiments: E0 for identity and
/// E1 otherwise.
inline ExperimentConfig canned_config(const CannedExperiment& c, std::size_t i) {
  ExperimentConfig cfg = c.base;
  cfg.strategy = c.strategies.at(i);
  cfg.sampler.id = c.samplers.at(i);
  if (cfg.model.id == "ricker") cfg.model.summary_set = cfg.strategy.id.rfind("identity", 0) == 0 ? "E0" : "E1";
  return cfg;
}

}  // namespace lgabc
