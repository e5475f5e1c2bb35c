#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "curvlab/errors.hpp"
#include "curvlab/metrics.hpp"
#include "oracles.hpp"

using namespace curvlab;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() /
           ("curvlab_metrics_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& f) {
  std::ifstream in(f, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ModelSpec linear10() {
  ModelSpec s;
  s.architecture = Architecture::Linear;
  s.input_shape = {1, 1, 10};
  return s;
}

// One-hot inputs with balanced labels 0..9.
Batch one_hot_split(int per_class) {
  Batch b;
  b.inputs = Eigen::MatrixXd::Zero(10, 10 * per_class);
  for (int j = 0; j < 10 * per_class; ++j) {
    b.inputs(j % 10, j) = 1.0;
    b.labels.push_back(j % 10);
  }
  return b;
}

std::vector<RunRecord> sample_records() {
  std::vector<RunRecord> rs(3);
  rs[0].step = 0;
  rs[0].train_loss = 1.0 / 3.0;
  rs[0].full_train_loss = 0.9;
  rs[0].test_loss = 0.95;
  rs[0].test_accuracy = 12.5;
  rs[0].grad_norm = 2.0;
  rs[0].chi_k = 0.75;
  rs[0].ritz_residual_max = 1e-9;
  rs[0].lanczos_converged = true;
  rs[0].lambdas = {3.0, 2.0, 1.0};
  rs[0].energy = EnergyColumns{10, 0.1, 9, 0.2, 0.5, 0.01, 8, 7.5, 0.01, 14};
  rs[1].step = 1;
  rs[1].train_loss = 0.7;
  rs[1].grad_norm = 1.5;
  rs[2].step = 2;
  rs[2].full_train_loss = 0.6;
  rs[2].test_accuracy = 40.0;
  rs[2].diverged = true;
  return rs;
}

}  // namespace

TEST_CASE("evaluate: chance level, perfect predictor and tie breaking") {
  const ModelSpec spec = linear10();
  const Batch split = one_hot_split(7);

  const ParamVector zero = ParamVector::Zero(spec.param_count());
  const Evaluation chance = evaluate(spec, zero, split);
  CHECK(chance.accuracy == doctest::Approx(10.0));
  CHECK(chance.loss == doctest::Approx(1.0));

  const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(10, 10);
  const ParamVector perfect = Eigen::Map<const ParamVector>(eye.data(), 100);
  const Evaluation best = evaluate(spec, perfect, split);
  CHECK(best.accuracy == 100.0);
  CHECK(best.loss == doctest::Approx(0.0).epsilon(1e-15));

  ParamVector bad = zero;
  bad(3) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(evaluate(spec, bad, split), DivergedError);
  CHECK_THROWS_AS(evaluate(spec, zero, Batch{Eigen::MatrixXd(10, 0), {}}), InvalidSize);
}

TEST_CASE("accuracy at initialization sits in the chance band") {
  const ModelSpec spec = oracle::tiny_mlp();
  ModelSpec ten = spec;
  ten.num_classes = 10;
  Batch b = oracle::random_batch(ten, 1000, 4);
  for (int j = 0; j < b.size(); ++j) b.labels[j] = j % 10;
  for (std::uint64_t s = 1; s <= 5; ++s) {
    const Evaluation e = evaluate(ten, init_params(ten, s), b);
    CHECK(e.accuracy >= 0.0);
    CHECK(e.accuracy <= 100.0);
    CHECK(e.accuracy >= 5.0);
    CHECK(e.accuracy <= 20.0);
  }
}

TEST_CASE("sharpness snapshots are sorted and constant on a fixed quadratic") {
  const Eigen::VectorXd d = (Eigen::VectorXd(6) << 0.5, 4, 1, 3, 2, 0.1).finished();
  MatVec op = [&](const ParamVector& v) -> ParamVector { return d.cwiseProduct(v); };
  const auto first = sharpness_snapshot(lanczos_topk(op, 6, 4, {0, 1e-10, 1}));
  const auto second = sharpness_snapshot(lanczos_topk(op, 6, 4, {0, 1e-10, 2}));
  REQUIRE(first.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) CHECK(first[i] == doctest::Approx(second[i]).epsilon(1e-10));
  CHECK(first[0] == doctest::Approx(4.0));
  CHECK(first[3] == doctest::Approx(1.0));
  for (std::size_t i = 0; i + 1 < first.size(); ++i) CHECK(first[i] >= first[i + 1]);
}

TEST_CASE("csv header and cell formatting") {
  const auto h = csv_header(2);
  const std::vector<std::string> expect = {
      "step",      "train_loss", "full_train_loss",   "test_loss",         "test_accuracy",
      "grad_norm", "chi_k",      "ritz_residual_max", "lanczos_converged", "diverged",
      "lambda_1",  "lambda_2",   "frob_h",            "frob_h_se",         "frob_ho",
      "frob_ho_se", "frob_hf",   "frob_hf_se",        "sub_h",             "sub_ho",
      "sub_hf",    "spectrum"};
  CHECK(h == expect);
  CHECK(format_cell(std::nullopt).empty());
  CHECK(format_cell(0.1) == "0.10000000000000001");
  CHECK(std::stod(format_cell(1.0 / 3.0)) == 1.0 / 3.0);
}

TEST_CASE("write_records: files, sparse cells, round trip and determinism") {
  TempDir tmp;
  const auto records = sample_records();
  const nlohmann::json cfg = {{"eta", 0.01}, {"mode", "sgd"}};
  const RunSummary s = write_records(records, cfg, tmp.path / "run");

  const std::string csv = slurp(tmp.path / "run" / "metrics.csv");
  std::istringstream lines(csv);
  std::string header;
  std::string row1;
  std::string row2;
  std::getline(lines, header);
  std::getline(lines, row1);
  std::getline(lines, row2);
  CHECK(header.rfind("step,train_loss,full_train_loss,", 0) == 0);
  CHECK(row2.rfind("1,0.69999999999999996,,,,1.5,,,,0,,,,", 0) == 0);

  const auto back = read_records(tmp.path / "run" / "metrics.csv");
  REQUIRE(back.size() == 3);
  CHECK(*back[0].train_loss == 1.0 / 3.0);
  CHECK(back[0].lambdas == records[0].lambdas);
  CHECK(back[0].energy->sub_hf == 0.01);
  CHECK(*back[0].lanczos_converged);
  CHECK_FALSE(back[1].energy.has_value());
  CHECK_FALSE(back[1].test_loss.has_value());
  CHECK(back[1].lambdas.empty());
  CHECK(back[2].diverged);

  CHECK(s.diverged);
  CHECK(*s.final_train_loss == 0.6);
  CHECK(*s.best_train_loss == 0.6);
  CHECK(*s.final_test_accuracy == 40.0);
  CHECK(*s.best_test_accuracy == 40.0);
  CHECK(s.steps == 2);

  const auto summary = nlohmann::json::parse(slurp(tmp.path / "run" / "summary.json"));
  CHECK(summary["diverged"] == true);
  CHECK(summary["final_test_loss"] == 0.95);
  CHECK(nlohmann::json::parse(slurp(tmp.path / "run" / "config.json")) == cfg);

  write_records(records, cfg, tmp.path / "again");
  CHECK(slurp(tmp.path / "again" / "metrics.csv") == csv);
}
