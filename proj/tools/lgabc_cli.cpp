// Command-line front end: pools, cross-validation, constructors, samplers,
// evaluation and canned experiment pipelines.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "lgabc/harness.hpp"

namespace fs = std::filesystem;
using namespace lgabc;

namespace {

struct GlobalOptions {
  std::optional<std::uint64_t> seed;
  std::string config;
  std::string out;
  int threads = 1;
};

ExperimentConfig resolve(const GlobalOptions& g) {
  ExperimentConfig cfg = g.config.empty() ? ExperimentConfig{} : load_config(g.config);
  if (g.seed) cfg.seed = *g.seed;
  if (!g.out.empty()) cfg.output_dir = g.out;
  cfg.validate();
  return cfg;
}

fs::path require_out(const ExperimentConfig& cfg) {
  if (cfg.output_dir.empty()) throw ConfigError("config: an output directory is required (--out)");
  return cfg.output_dir;
}

void print_amse(const RunRecord& r) {
  std::cout << r.strategy << " (" << r.sampler << ") AMSE:";
  for (std::size_t k = 0; k < r.parameter_names.size(); ++k) {
    std::cout << ' ' << r.parameter_names[k] << '=' << io::format_double(r.amse(static_cast<Index>(k)));
  }
  std::cout << '\n';
}

int cmd_simulate(const GlobalOptions& g) {
  const ExperimentConfig cfg = resolve(g);
  const fs::path dir = require_out(cfg);
  const PreparedData data = prepare_data(cfg, {true, true, g.threads});
  const ModelSpec& spec = data.model->spec();
  atomic_write(dir / "config.json", dump_json(to_json(cfg)));
  atomic_write(dir / "observations.csv", observations_csv(data.observations, spec));
  if (cfg.pool_path.empty()) {
    atomic_write(dir / "pool.csv", batch_to_csv(data.pool, spec, "lgabc-pool key=" + data.pool_key));
  } else {
    atomic_write(dir / "pool_ref.json", dump_json({{"pool_key", data.pool_key}, {"pool_path", cfg.pool_path}}));
  }
  atomic_write(dir / "training.csv", batch_to_csv(data.training, spec, ""));
  atomic_write(dir / "test.csv", batch_to_csv(data.test, spec, ""));
  std::cout << "pool " << data.pool_key << (data.pool_reused ? " (reused)" : "") << ": " << data.pool.size()
            << " simulations\n";
  return 0;
}

int cmd_cv(const GlobalOptions& g) {
  ExperimentConfig cfg = resolve(g);
  const fs::path dir = require_out(cfg);
  if (!cfg.strategy.is_lgkdr()) throw ConfigError("config: cross-validation needs an lgkdr strategy");
  cfg.strategy.kernel.reset();
  cfg.cv.enabled = true;
  const PreparedData data = prepare_data(cfg, {false, true, g.threads});
  std::optional<CvReport> report;
  const KernelParams kp = select_kernel(cfg, data, g.threads, report);
  atomic_write(dir / "cv.json", dump_json(to_json(*report)));
  std::cout << "selected sigma_s=" << io::format_double(kp.sigma_s) << " sigma_theta=" << io::format_double(kp.sigma_theta)
            << " eps_n=" << io::format_double(kp.eps_n) << '\n';
  return 0;
}

int cmd_fit_summary(const GlobalOptions& g, Index obs) {
  ExperimentConfig cfg = resolve(g);
  const fs::path dir = require_out(cfg);
  cfg.sizes.observations = std::max(cfg.sizes.observations, obs + 1);
  const PreparedData data = prepare_data(cfg, {false, true, g.threads});
  std::optional<CvReport> report;
  std::optional<KernelParams> kernel;
  if (cfg.strategy.is_lgkdr()) kernel = select_kernel(cfg, data, g.threads, report);
  const TrainingSet all = data.training.as_training();
  const Vector s_obs = data.observations.summaries.row(obs).transpose();
  const StrategyConfig& st = cfg.strategy;
  SummaryConstructor sc = [&]() {
    if (st.id == "identity") return fit_identity(all);
    if (st.id == "identity-raw") return fit_identity_unscaled(all);
    if (st.id == "linear") return fit_linear_posterior_mean(all, st.local, st.weight_quantile, s_obs);
    const bool local = cfg.sizes.training_pool > cfg.sizes.training;
    const TrainingSet ts = local ? nearest_subset(all, s_obs, cfg.sizes.training) : all;
    GkdrConfig gc;
    gc.kernel = *kernel;
    gc.target_dim = st.target_dim;
    gc.weight_quantile = st.weight_quantile;
    if (st.id == "lgkdr-focus") return fit_separated(ts, s_obs, gc, {st.focus - 1});
    return fit_lgkdr(ts, s_obs, gc);
  }();
  std::ostringstream s;
  sc.save(s);
  atomic_write(dir / "summary.txt", s.str());
  const SummaryConstructor* leaf = &sc;
  if (sc.kind() == SummaryConstructor::Kind::separated_composite) leaf = &sc.children().front();
  if (leaf->kind() == SummaryConstructor::Kind::lgkdr) {
    std::ostringstream p;
    save_projection(p, leaf->projection());
    atomic_write(dir / "projection.txt", p.str());
  }
  if (report) atomic_write(dir / "cv.json", dump_json(to_json(*report)));
  std::cout << SummaryConstructor::kind_name(sc.kind()) << " constructor, output dimension " << sc.output_dim() << '\n';
  return 0;
}

int cmd_sample(const GlobalOptions& g, const std::string& sampler) {
  ExperimentConfig cfg = resolve(g);
  require_out(cfg);
  cfg.sampler.id = sampler;
  const RunOutput run = run_experiment(cfg, g.threads);
  print_amse(run.record);
  return 0;
}

int cmd_evaluate(const GlobalOptions& g, const std::string& run_dir) {
  const fs::path dir = run_dir;
  const Matrix rows = evaluate_run_dir(dir);
  const Vector a = amse(rows);
  const RunRecord recorded = load_record(dir / "metrics.json");
  const bool match = recorded.amse.size() == a.size() && recorded.amse == a;
  Json j;
  j["amse"] = std::vector<double>(a.begin(), a.end());
  j["matches_metrics"] = match;
  const fs::path out = g.out.empty() ? dir : fs::path(g.out);
  atomic_write(out / "evaluation.json", dump_json(j));
  std::cout << "AMSE";
  for (Index k = 0; k < a.size(); ++k) std::cout << ' ' << io::format_double(a(k));
  std::cout << (match ? " (matches metrics.json)\n" : " (DIFFERS from metrics.json)\n");
  return match ? 0 : 3;
}

int cmd_compare(const GlobalOptions& g, const std::vector<std::string>& dirs) {
  std::vector<RunRecord> records;
  for (const auto& d : dirs) records.push_back(load_record(fs::path(d) / "metrics.json"));
  const std::string table = compare_report(records);
  std::cout << table;
  if (!g.out.empty()) atomic_write(fs::path(g.out) / "compare.txt", table);
  return 0;
}

int cmd_repro(const GlobalOptions& g, const std::string& name, std::optional<Index> observations,
              std::optional<Index> pool_size) {
  CannedExperiment c = canned_experiment(name);
  if (!g.config.empty()) c.base = load_config(g.config);
  if (g.seed) c.base.seed = *g.seed;
  if (observations) c.base.sizes.observations = *observations;
  if (pool_size) c.base.sampler.pool_size = *pool_size;
  const fs::path root = g.out;
  if (root.empty()) throw ConfigError("config: an output directory is required (--out)");

  std::map<std::string, std::shared_ptr<PreparedData>> cache;
  std::vector<RunRecord> records;
  for (std::size_t i = 0; i < c.strategies.size(); ++i) {
    ExperimentConfig cfg = canned_config(c, i);
    cfg.output_dir = (root / (cfg.strategy.label() + "-" + cfg.sampler.id)).string();
    cfg.validate();
    const std::string key = to_json(cfg)["model"].dump() + cfg.sampler.id;
    auto& data = cache[key];
    if (!data) data = std::make_shared<PreparedData>(prepare_data(cfg, {cfg.sampler.id == "rejection", true, g.threads}));
    const RunOutput run = run_strategy(cfg, *data, g.threads);
    write_run(cfg.output_dir, cfg, *data, run);
    print_amse(run.record);
    records.push_back(run.record);
  }
  const std::string table = compare_report(records);
  atomic_write(root / "compare.txt", table);
  std::cout << table;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Local gradient kernel dimension reduction for approximate Bayesian computation"};
  app.require_subcommand(1);
  app.fallthrough();
  GlobalOptions g;
  std::uint64_t seed = 0;
  auto* seed_opt = app.add_option("--seed", seed, "master seed (overrides the config)");
  app.add_option("--config", g.config, "experiment config (JSON)");
  app.add_option("--out", g.out, "output directory");
  app.add_option("--threads", g.threads, "worker threads; results do not depend on it")->check(CLI::PositiveNumber);

  auto* simulate = app.add_subcommand("simulate", "simulate observations, the frozen pool and training/test sets");
  auto* cv = app.add_subcommand("cv", "select kernel hyper-parameters by cross-validation");
  Index obs = 0;
  auto* fit = app.add_subcommand("fit-summary", "fit and persist the configured summary constructor");
  fit->add_option("--obs", obs, "observation index")->check(CLI::NonNegativeNumber);
  auto* reject = app.add_subcommand("reject", "rejection ABC against the frozen pool");
  auto* smc = app.add_subcommand("smc", "adaptive SMC ABC");
  std::string run_dir;
  auto* evaluate = app.add_subcommand("evaluate", "recompute MSE/AMSE from a run directory");
  evaluate->add_option("run_dir", run_dir)->required();
  std::vector<std::string> dirs;
  auto* compare = app.add_subcommand("compare", "AMSE table over run directories");
  compare->add_option("run_dirs", dirs)->required();
  std::string name;
  std::optional<Index> n_obs, n_pool;
  auto* repro = app.add_subcommand("repro", "canned pipeline: toy, mg1, ricker or ricker-smc");
  repro->add_option("experiment", name)->required();
  repro->add_option("--observations", n_obs, "override the observation count");
  repro->add_option("--pool-size", n_pool, "override the pool size");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  if (*seed_opt) g.seed = seed;

  try {
    if (*simulate) return cmd_simulate(g);
    if (*cv) return cmd_cv(g);
    if (*fit) return cmd_fit_summary(g, obs);
    if (*reject) return cmd_sample(g, "rejection");
    if (*smc) return cmd_sample(g, "smc");
    if (*evaluate) return cmd_evaluate(g, run_dir);
    if (*compare) return cmd_compare(g, dirs);
    if (*repro) return cmd_repro(g, name, n_obs, n_pool);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const InvalidArgument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return 3;
  } catch (const DegeneracyError& e) {
    std::cerr << "degeneracy: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
