#include <doctest.h>
#include <unistd.h>

#include <atomic>
#include <fstream>
#include <sstream>

#include "curvlab/errors.hpp"
#include "curvlab/harness.hpp"
#include "oracles.hpp"

using namespace curvlab;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() /
           ("curvlab_harness_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Dataset tiny_dataset() {
  const ModelSpec spec = oracle::tiny_mlp(Activation::Tanh);
  Dataset ds;
  ds.shape = spec.input_shape;
  ds.train = oracle::random_batch(spec, 60, 11);
  ds.test = oracle::random_batch(spec, 24, 12);
  return ds;
}

ExperimentConfig tiny_config(ExperimentKind kind) {
  ExperimentConfig c;
  c.kind = kind;
  c.model = oracle::tiny_mlp(Activation::Tanh);
  c.train_size = 60;
  c.total_steps = 12;
  c.batch_size = 10;
  c.eval_every = 4;
  c.energy_every = 4;
  c.energy_probes = 4;
  c.seed = 5;
  c.optimizer.eta = 0.05;
  c.optimizer.k = 3;
  c.optimizer.refresh_period = 4;
  c.optimizer.holdout_size = 20;
  c.grid_eta = {0.05, 0.1};
  c.grid_k = {1, 3};
  c.grid_holdout = {20, 60};
  c.switch_steps = {0, 4, 8};
  c.warmup_steps = 6;
  c.slope_window = 6;
  c.grid_alpha = {1.0, 2.0, Coefficient::infinity()};
  c.grid_beta = {1.0, 2.0, Coefficient::infinity()};
  return c;
}

const CellResult& cell(const ExperimentResult& r, const std::string& id) {
  for (const CellResult& c : r.cells) {
    if (c.run_id == id) return c;
  }
  FAIL("missing cell " << id);
  return r.cells.front();
}

std::string extra(const CellResult& c, const std::string& key) {
  for (const auto& [k, v] : c.extra) {
    if (k == key) return v;
  }
  return "";
}

}  // namespace

TEST_CASE("config parsing is strict and the echo round-trips") {
  CHECK_THROWS_AS(ExperimentConfig::from_json(json{{"kind", "ablate"}, {"bogus", 1}}),
                  ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_json(json{{"optimizer", {{"etaa", 0.1}}}}),
                  ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_json(json{{"kind", "nope"}}), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_json(json{{"optimizer", {{"eta", -1.0}}}}),
                  ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_json(json{{"optimizer", {{"eta", "fast"}}}}),
                  ConfigError);

  const json in = {{"kind", "interpolate"},
                   {"model", {{"activation", "tanh"}, {"loss", "ce"}}},
                   {"optimizer", {{"eta", 0.02}, {"alpha_dom", "inf"}, {"beta_bulk", 2}}},
                   {"interpolate", {{"alpha_dom", {1, "inf"}}, {"beta_bulk", {"Inf", 5}}}},
                   {"total_steps", 300}};
  const ExperimentConfig c = ExperimentConfig::from_json(in);
  CHECK(c.kind == ExperimentKind::Interpolate);
  CHECK(c.model.loss == LossKind::CrossEntropy);
  CHECK(c.optimizer.alpha_dom.is_infinite());
  CHECK(c.optimizer.beta_bulk == Coefficient(2.0));
  REQUIRE(c.grid_beta.size() == 2);
  CHECK(c.grid_beta[0].is_infinite());
  CHECK(c.resolved_steps(5000) == 300);

  const json echo = c.to_json();
  CHECK(echo.at("epochs") == 200);  // defaults are echoed too
  CHECK(ExperimentConfig::from_json(echo).to_json() == echo);
}

TEST_CASE("smoke mode shortens runs proportionally") {
  ExperimentConfig c;
  CHECK(c.resolved_steps(5000) == 20000);
  c.apply_smoke();
  CHECK(c.epochs == 20);
  CHECK(c.resolved_steps(5000) == 2000);
  CHECK(c.warmup_steps == 600);
  CHECK(c.optimizer.holdout_size == 200);
  CHECK(c.grid_holdout == std::vector<int>{200});

  const ExperimentConfig s = ExperimentConfig::from_json(json{{"smoke", true}, {"total_steps", 50}});
  CHECK_FALSE(s.total_steps.has_value());
  CHECK(s.smoke);
}

TEST_CASE("parallel_for visits every index once") {
  std::vector<std::atomic<int>> hits(37);
  parallel_for(37, 4, [&](int i) { hits[i]++; });
  for (const auto& h : hits) CHECK(h.load() == 1);
  parallel_for(0, 4, [&](int) { FAIL("no tasks expected"); });
}

TEST_CASE("loss_slope fits the minibatch loss") {
  std::vector<RunRecord> recs;
  for (long t = 0; t < 20; ++t) {
    RunRecord r;
    r.step = t;
    r.train_loss = 3.0 - 0.25 * t;
    recs.push_back(r);
  }
  const auto s = loss_slope(recs, 5, 10);
  REQUIRE(s.has_value());
  CHECK(*s == doctest::Approx(-0.25).epsilon(1e-12));
  CHECK_FALSE(loss_slope(recs, 19, 10).has_value());
}

TEST_CASE("ablation grid shares baselines, isolates failures and is reproducible") {
  const Dataset ds = tiny_dataset();
  ExperimentConfig cfg = tiny_config(ExperimentKind::Ablate);
  cfg.grid_holdout = {20, 500};  // 500 exceeds the 60 training examples
  TempDir a;
  TempDir b;
  const ExperimentResult ra = run_ablation(cfg, ds, {a.path, 1, {}});
  const ExperimentResult rb = run_ablation(cfg, ds, {b.path, 3, {}});

  // one SGD baseline per eta plus l x k Bulk cells
  REQUIRE(ra.cells.size() == 2 * (1 + 2 * 2));
  int sgd = 0;
  for (const CellResult& c : ra.cells) {
    sgd += c.run_id.rfind("sgd_", 0) == 0 ? 1 : 0;
    const bool bad = c.run_id.find("_l=500_") != std::string::npos;
    CHECK(c.error.empty() != bad);
    CHECK(c.summary.has_value() != bad);
  }
  CHECK(sgd == 2);

  CHECK(slurp(a.path / "grid.csv") == slurp(b.path / "grid.csv"));
  for (const CellResult& c : ra.cells) {
    if (!c.summary) continue;
    CHECK(slurp(a.path / c.run_id / "metrics.csv") == slurp(b.path / c.run_id / "metrics.csv"));
    CHECK(slurp(a.path / c.run_id / "summary.json") ==
          slurp(b.path / c.run_id / "summary.json"));
  }

  const json echo = json::parse(slurp(a.path / "bulk_eta=0.05_l=20_k=3" / "config.json"));
  CHECK(echo.at("run").at("optimizer").at("mode") == "bulk");
  CHECK(echo.at("run").at("optimizer").at("k") == 3);
  CHECK(echo.at("run").at("holdout_id") == "l=20,seed=" + std::to_string(holdout_seed(5)));
  CHECK(echo.at("experiment").at("ablate").at("holdout_size") == json{20, 500});
}

TEST_CASE("interpolation diagonal reproduces SGD at eta / alpha") {
  const Dataset ds = tiny_dataset();
  const ExperimentConfig cfg = tiny_config(ExperimentKind::Interpolate);
  TempDir grid;
  const ExperimentResult r = run_interpolate(cfg, ds, {grid.path, 2, {}});
  REQUIRE(r.cells.size() == 9);
  for (const CellResult& c : r.cells) CHECK(c.error.empty());

  for (double alpha : {1.0, 2.0}) {
    ExperimentConfig single = tiny_config(ExperimentKind::Train);
    single.optimizer.mode = UpdateMode::SGD;
    single.optimizer.eta = cfg.optimizer.eta / alpha;
    TempDir one;
    run_train(single, ds, {one.path, 1, {}});
    const std::string a = to_string(Coefficient(alpha));
    CHECK(slurp(grid.path / ("alpha=" + a + "_beta=" + a) / "metrics.csv") ==
          slurp(one.path / "train" / "metrics.csv"));
  }

  const std::string heat = slurp(grid.path / "heatmap_train_loss.csv");
  CHECK(heat.rfind("alpha_dom\\beta_bulk,1,2,inf\n", 0) == 0);
  CHECK(std::count(heat.begin(), heat.end(), '\n') == 4);
  CHECK(fs::exists(grid.path / "heatmap_test_accuracy.csv"));
  CHECK(fs::exists(grid.path / "heatmap_diverged.csv"));

  // alpha = beta = inf never moves: training loss stays at its initial value
  const RunSummary& frozen = *cell(r, "alpha=inf_beta=inf").summary;
  const auto recs = read_records(grid.path / "alpha=inf_beta=inf" / "metrics.csv");
  CHECK(*frozen.final_train_loss == *recs.front().full_train_loss);
}

TEST_CASE("switchpoint continuations start from the shared baseline") {
  const Dataset ds = tiny_dataset();
  ExperimentConfig cfg = tiny_config(ExperimentKind::Switchpoint);
  cfg.switch_steps = {0, 4, 8, 40};  // 40 lies beyond the run and is dropped
  TempDir out;
  const ExperimentResult r = run_switchpoint(cfg, ds, {out.path, 2, {}});
  REQUIRE(r.cells.size() == 1 + 3 * 2);
  const auto base = read_records(out.path / "sgd" / "metrics.csv");
  for (const CellResult& c : r.cells) CHECK(c.error.empty());
  for (long s : {0L, 4L, 8L}) {
    for (const std::string mode : {"dom", "bulk"}) {
      const auto recs =
          read_records(out.path / (mode + "_switch=" + std::to_string(s)) / "metrics.csv");
      REQUIRE(recs.size() == static_cast<std::size_t>(12 - s + 1));
      CHECK(recs.front().step == s);
      // the first post-switch evaluation sees the baseline's parameters
      if (s % cfg.eval_every == 0) {
        CHECK(*recs.front().full_train_loss == *base[s].full_train_loss);
      }
    }
  }
}

TEST_CASE("accelerate reports post-switch slopes for each leg") {
  const Dataset ds = tiny_dataset();
  const ExperimentConfig cfg = tiny_config(ExperimentKind::Accelerate);
  TempDir out;
  const ExperimentResult r = run_accelerate(cfg, ds, {out.path, 2, {}});
  REQUIRE(r.cells.size() == 3);
  for (const CellResult& c : r.cells) {
    CHECK(c.error.empty());
    CHECK_FALSE(extra(c, "post_switch_slope").empty());
  }
  const json echo = json::parse(slurp(out.path / "bulk_eta_x2" / "config.json"));
  CHECK(echo.at("run").at("optimizer").at("eta") == doctest::Approx(0.1));
  CHECK(echo.at("run").at("start_step") == 6);
  CHECK(slurp(out.path / "grid.csv").find("post_switch_slope") != std::string::npos);
}

TEST_CASE("energy runs write energy tables for each combination") {
  const Dataset ds = tiny_dataset();
  ExperimentConfig cfg = tiny_config(ExperimentKind::Energy);
  cfg.combinations = {{LossKind::MSE, Activation::Tanh}, {LossKind::CrossEntropy, Activation::ReLU}};
  TempDir out;
  const ExperimentResult r = run_energy(cfg, ds, {out.path, 2, {}});
  REQUIRE(r.cells.size() == 2);
  for (const CellResult& c : r.cells) {
    CHECK(c.error.empty());
    const std::string table = slurp(out.path / c.run_id / "energy.csv");
    CHECK(std::count(table.begin(), table.end(), '\n') == 1 + 3);  // steps 0, 4, 8
  }
  CHECK(fs::exists(out.path / "energy_ce_relu" / "metrics.csv"));
}
