#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "lgabc/harness.hpp"
#include "test_support.hpp"

using namespace lgabc;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("lgabc_test_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

ExperimentConfig small_toy() {
  ExperimentConfig c;
  c.model.id = "gaussian_toy";
  c.strategy.id = "identity";
  c.sampler.pool_size = 2000;
  c.sampler.n_acc = 50;
  c.sampler.particles = 200;
  c.sampler.max_rounds = 4;
  c.sizes = {100, 0, 100, 1, 3};
  c.seed = 9;
  return c;
}

ExperimentConfig small_mg1_lgkdr() {
  ExperimentConfig c;
  c.model.id = "mg1";
  c.strategy.id = "lgkdr";
  c.strategy.target_dim = 2;
  c.strategy.weight_quantile = 0.5;
  c.sampler.pool_size = 1000;
  c.sizes = {150, 0, 100, 1, 2};
  c.cv.enabled = false;
  c.seed = 4;
  return c;
}

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(LGABC_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Metrics, MseHandExamples) {
  Matrix draws(2, 1);
  draws << 1.0, 3.0;
  EXPECT_DOUBLE_EQ(mse(draws, support::vec({2.0}))(0), 1.0);
  EXPECT_DOUBLE_EQ(mse(draws, support::vec({2.0}), support::vec({3.0, 1.0}))(0), 1.0);
  EXPECT_DOUBLE_EQ(mse(draws, support::vec({1.0}), support::vec({3.0, 1.0}))(0), 1.0);
  EXPECT_DOUBLE_EQ(mse(draws, support::vec({1.0}), support::vec({1.0, 0.0}))(0), 0.0);
  Matrix two(3, 2);
  two << 0, 0, 1, 2, 2, 4;
  const Vector m = mse(two, support::vec({1.0, 2.0}));
  EXPECT_DOUBLE_EQ(m(0), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(m(1), 8.0 / 3.0);
  EXPECT_THROW(mse(draws, support::vec({0.0}), support::vec({-1.0, 2.0})), InvalidArgument);
  EXPECT_THROW(mse(draws, support::vec({0.0, 1.0})), InvalidArgument);
}

TEST(Metrics, AmseIsColumnMean) {
  Matrix rows(3, 2);
  rows << 1, 10, 2, 20, 6, 0;
  const Vector a = amse(rows);
  EXPECT_DOUBLE_EQ(a(0), 3.0);
  EXPECT_DOUBLE_EQ(a(1), 10.0);
}

TEST(Config, JsonRoundTrip) {
  ExperimentConfig c = small_mg1_lgkdr();
  c.strategy.kernel = KernelParams{1.5, 0.7, 1e-4};
  c.strategy.target_dim.reset();
  c.sampler.n_acc = 17;
  c.output_dir = "out";
  const ExperimentConfig back = config_from_json(to_json(c));
  EXPECT_EQ(back, c);
  EXPECT_EQ(config_hash(back), config_hash(c));
  EXPECT_EQ(to_json(back).dump(), to_json(c).dump());
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  Json j = to_json(small_toy());
  j["sampler"]["particels"] = 10;
  EXPECT_THROW(config_from_json(j), ConfigError);
  j = to_json(small_toy());
  j["extra"] = 1;
  EXPECT_THROW(config_from_json(j), ConfigError);
  j = to_json(small_toy());
  j["model"]["id"] = "lotka";
  EXPECT_THROW(config_from_json(j), ConfigError);
  j = to_json(small_toy());
  j["sampler"]["quantile"] = 1.0;
  EXPECT_THROW(config_from_json(j), ConfigError);
  j = to_json(small_toy());
  j["sizes"]["training"] = "many";
  EXPECT_THROW(config_from_json(j), ConfigError);
  j = to_json(small_toy());
  j["schema_version"] = 99;
  EXPECT_THROW(config_from_json(j), ConfigError);
}

TEST(Config, HashIgnoresOutputLocations) {
  ExperimentConfig a = small_toy(), b = small_toy();
  b.output_dir = "elsewhere";
  b.pool_path = "/tmp/p.csv";
  EXPECT_EQ(config_hash(a), config_hash(b));
  b.seed = 10;
  EXPECT_NE(config_hash(a), config_hash(b));
}

TEST(Config, PoolKeySharedAcrossStrategies) {
  ExperimentConfig a = small_toy(), b = small_toy();
  b.strategy.id = "linear";
  b.sampler.n_acc = 7;
  EXPECT_EQ(pool_key(a), pool_key(b));
  b.sampler.pool_size = 2001;
  EXPECT_NE(pool_key(a), pool_key(b));
}

TEST(Config, DefaultAcceptanceRates) {
  ExperimentConfig c;
  c.sampler.pool_size = 100000;
  c.strategy.id = "lgkdr";
  EXPECT_EQ(c.n_acc(), 1000);
  c.strategy.id = "identity";
  EXPECT_EQ(c.n_acc(), 100);
}

TEST(Data, BatchIsThreadInvariantAndSeeded) {
  const Mg1Model m;
  const SimulationBatch a = simulate_batch(m, 50, 3, Stream::pool, 1);
  const SimulationBatch b = simulate_batch(m, 50, 3, Stream::pool, 4);
  EXPECT_EQ(a.theta, b.theta);
  EXPECT_EQ(a.summaries, b.summaries);
  EXPECT_EQ(a.data_seeds, b.data_seeds);
  const SimulationBatch c = simulate_batch(m, 50, 3, Stream::training, 1);
  EXPECT_NE(a.theta, c.theta);
  // raw data regenerates from the stored seed
  const Vector s = m.summaries(m.simulate_seeded(a.theta.row(7).transpose(), a.data_seeds[7]));
  EXPECT_EQ(s, a.summaries.row(7).transpose());
}

TEST(Data, PoolCsvRoundTripIsExact) {
  const Mg1Model m;
  const SimulationBatch a = simulate_batch(m, 20, 5, Stream::pool, 1);
  std::istringstream in(batch_to_csv(a, m.spec(), "tag"));
  const auto b = batch_from_csv(in, m.spec(), "tag");
  ASSERT_TRUE(b);
  EXPECT_EQ(a.theta, b->theta);
  EXPECT_EQ(a.summaries, b->summaries);
  EXPECT_EQ(a.item_seeds, b->item_seeds);
  std::istringstream in2(batch_to_csv(a, m.spec(), "tag"));
  EXPECT_FALSE(batch_from_csv(in2, m.spec(), "other"));
}

TEST(Data, PoolCacheIsReused) {
  const fs::path dir = scratch("pool");
  ExperimentConfig c = small_toy();
  c.pool_path = (dir / "pool.csv").string();
  const PreparedData first = prepare_data(c);
  EXPECT_FALSE(first.pool_reused);
  ASSERT_TRUE(fs::exists(c.pool_path));
  c.strategy.id = "linear";
  const PreparedData second = prepare_data(c);
  EXPECT_TRUE(second.pool_reused);
  EXPECT_EQ(first.pool.theta, second.pool.theta);
  EXPECT_EQ(first.pool.summaries, second.pool.summaries);
  c.sampler.pool_size = 1500;  // key changes: regenerated
  EXPECT_FALSE(prepare_data(c).pool_reused);
}

TEST(Runs, DeterministicAcrossThreadCounts) {
  const ExperimentConfig c = small_mg1_lgkdr();
  const RunOutput a = run_experiment(c, 1);
  const RunOutput b = run_experiment(c, 3);
  EXPECT_EQ(a.record.mse, b.record.mse);
  EXPECT_EQ(to_json(a.record).dump(), to_json(b.record).dump());
  ASSERT_EQ(a.observations.size(), 2u);
  EXPECT_EQ(a.observations[0].ids, b.observations[0].ids);
  EXPECT_EQ(a.observations[0].draws.rows(), c.n_acc());
}

TEST(Runs, SmcRunRecordsTraces) {
  ExperimentConfig c = small_toy();
  c.sampler.id = "smc";
  const RunOutput r = run_experiment(c, 1);
  ASSERT_EQ(r.observations.size(), 3u);
  for (const auto& o : r.observations) {
    EXPECT_FALSE(o.trace.empty());
    EXPECT_FALSE(o.stop_reason.empty());
    EXPECT_NEAR(o.weights.sum(), 1.0, 1e-12);
  }
  EXPECT_GT(r.record.simulations, 0);
}

TEST(Runs, WrittenRunEvaluatesToRecordedMetrics) {
  const fs::path dir = scratch("run");
  ExperimentConfig c = small_toy();
  c.output_dir = (dir / "r").string();
  const RunOutput r = run_experiment(c, 1);
  for (const char* f : {"config.json", "observations.csv", "pool.csv", "posterior_0.csv", "metrics.json",
                        "timing.json", "summary_0.txt"})
    EXPECT_TRUE(fs::exists(dir / "r" / f)) << f;
  const Matrix rows = evaluate_run_dir(dir / "r");
  EXPECT_EQ(rows, r.record.mse);
  const RunRecord back = load_record(dir / "r" / "metrics.json");
  EXPECT_EQ(back.amse, r.record.amse);
  EXPECT_EQ(back.observation_seeds, r.record.observation_seeds);
}

TEST(Reports, CompareMatchesGolden) {
  RunRecord a, b;
  for (RunRecord* r : {&a, &b}) {
    r->model = "mg1";
    r->parameter_names = {"theta1", "theta2", "theta3"};
    r->observation_seeds = {11, 12};
    r->sampler = "rejection";
  }
  a.strategy = "identity";
  a.amse = support::vec({0.25, 1.5, 0.000125});
  a.simulations = 100000;
  a.pool_key = "00000000000000aa";
  b.strategy = "lgkdr-focus-1-d4";
  b.sampler = "smc";
  b.amse = support::vec({0.125, 2.0, 1e-5});
  b.simulations = 5400;
  EXPECT_EQ(compare_report({a, b}), slurp(fs::path(LGABC_GOLDEN_DIR) / "compare.txt"));
  b.observation_seeds = {11, 13};
  EXPECT_THROW(compare_report({a, b}), InvalidArgument);
}

TEST(Cli, ExitCodes) {
  const fs::path dir = scratch("cli_codes");
  EXPECT_EQ(run_cli("--help", dir / "h.log"), 0);
  EXPECT_EQ(run_cli("nonsense-command", dir / "a.log"), 2);
  EXPECT_EQ(run_cli("reject --config " + (dir / "missing.json").string() + " --out " + dir.string(), dir / "b.log"), 2);
  std::ofstream(dir / "bad.json") << R"({"model": {"id": "gaussian_toy", "colour": 1}})";
  EXPECT_EQ(run_cli("reject --config " + (dir / "bad.json").string() + " --out " + dir.string(), dir / "c.log"), 2);
  EXPECT_NE(slurp(dir / "c.log").find("colour"), std::string::npos);
  EXPECT_EQ(run_cli("repro nowhere --out " + dir.string(), dir / "d.log"), 2);
  ExperimentConfig c = small_mg1_lgkdr();
  c.strategy.weight_quantile = 0.001;  // too few positive weights is a setup problem
  std::ofstream(dir / "few.json") << to_json(c).dump();
  EXPECT_EQ(run_cli("reject --config " + (dir / "few.json").string() + " --out " + (dir / "f").string(), dir / "e.log"),
            2);
  ExperimentConfig r = small_toy();
  r.model.id = "ricker";
  r.model.log_r = 800.0;  // latent state overflows
  std::ofstream(dir / "overflow.json") << to_json(r).dump();
  EXPECT_EQ(run_cli("simulate --config " + (dir / "overflow.json").string() + " --out " + (dir / "o").string(),
                    dir / "g.log"),
            3);
}

TEST(Cli, RejectAndEvaluateRoundTrip) {
  const fs::path dir = scratch("cli_run");
  std::ofstream(dir / "toy.json") << to_json(small_toy()).dump();
  ASSERT_EQ(run_cli("reject --config " + (dir / "toy.json").string() + " --out " + (dir / "a").string() +
                        " --threads 1",
                    dir / "a.log"),
            0);
  ASSERT_EQ(run_cli("reject --config " + (dir / "toy.json").string() + " --out " + (dir / "b").string() +
                        " --threads 2",
                    dir / "b.log"),
            0);
  for (const char* f : {"posterior_0.csv", "posterior_2.csv", "pool.csv", "observations.csv"})
    EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
  EXPECT_EQ(run_cli("evaluate " + (dir / "a").string(), dir / "c.log"), 0);
  EXPECT_NE(slurp(dir / "c.log").find("matches metrics.json"), std::string::npos);
  EXPECT_EQ(run_cli("compare " + (dir / "a").string() + " " + (dir / "b").string(), dir / "d.log"), 0);
  EXPECT_EQ(run_cli("--seed 3 reject --config " + (dir / "toy.json").string() + " --out " + (dir / "s").string(),
                    dir / "e.log"),
            0);
  EXPECT_NE(slurp(dir / "a" / "posterior_0.csv"), slurp(dir / "s" / "posterior_0.csv"));
}

TEST(Cli, FitSummaryWritesProjection) {
  const fs::path dir = scratch("cli_fit");
  ExperimentConfig c = small_mg1_lgkdr();
  c.strategy.kernel = KernelParams{2.0, 1.0, 1e-3};
  std::ofstream(dir / "c.json") << to_json(c).dump();
  ASSERT_EQ(run_cli("fit-summary --obs 1 --config " + (dir / "c.json").string() + " --out " + dir.string(),
                    dir / "f.log"),
            0);
  std::ifstream p(dir / "projection.txt");
  const ProjectionMatrix proj = load_projection(p);
  EXPECT_EQ(proj.matrix().cols(), 2);
  EXPECT_LT((proj.matrix().transpose() * proj.matrix() - Matrix::Identity(2, 2)).norm(), 1e-10);
  std::ifstream s(dir / "summary.txt");
  EXPECT_EQ(SummaryConstructor::load(s).output_dim(), 2);
}
