#pragma once

// Declarative experiments: single runs, Bulk-SGD ablation grids, switch-point
// sweeps, acceleration, (alpha, beta) interpolation heatmaps and energy
// studies. Each cell writes its own run directory; grids add grid.csv.

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "curvlab/data.hpp"
#include "curvlab/metrics.hpp"
#include "curvlab/optim.hpp"
#include "curvlab/train.hpp"

namespace curvlab {

enum class ExperimentKind { Train, Ablate, Switchpoint, Accelerate, Interpolate, Energy };

std::string to_string(ExperimentKind k);
ExperimentKind parse_kind(const std::string& s);

struct LossActivation {
  LossKind loss = LossKind::MSE;
  Activation activation = Activation::Tanh;
};

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::Train;
  DatasetName dataset = DatasetName::MNIST5k;
  int train_size = 5000;
  std::uint64_t subset_seed = 0;
  ModelSpec model;  // input shape is taken from the dataset
  OptimizerConfig optimizer;
  long epochs = 200;
  std::optional<long> total_steps;  // overrides epochs
  int batch_size = 50;
  int eval_every = 100;
  int energy_every = 500;
  int energy_probes = 20;
  bool track_subspace = false;
  std::uint64_t seed = 0;

  // ablate
  std::vector<double> grid_eta = {0.01};
  std::vector<int> grid_k = {1, 5, 10, 20};
  std::vector<int> grid_holdout = {200, 500, 5000};
  // switchpoint
  std::vector<long> switch_steps = {0, 10, 20, 30, 40, 50, 100, 200, 500, 1000};
  std::optional<double> switch_eta;
  // accelerate
  long warmup_steps = 6000;
  double eta_multiplier = 2.0;
  long slope_window = 500;
  // interpolate
  std::vector<Coefficient> grid_alpha = {1.0, 2.0, 5.0, Coefficient::infinity()};
  std::vector<Coefficient> grid_beta = {1.0, 2.0, 5.0, Coefficient::infinity()};
  // energy
  std::vector<LossActivation> combinations = {{LossKind::MSE, Activation::Tanh},
                                              {LossKind::CrossEntropy, Activation::Tanh},
                                              {LossKind::MSE, Activation::ReLU}};

  bool smoke = false;

  // Strict parse: unknown keys are errors. Missing keys keep the defaults.
  static ExperimentConfig from_json(const nlohmann::json& j);
  // Fully resolved echo, including defaulted values.
  [[nodiscard]] nlohmann::json to_json() const;

  // 20 epochs, holdout 200 and a proportionally shortened warmup.
  void apply_smoke();
  [[nodiscard]] long resolved_steps(int train_examples) const;
  void validate() const;
};

ExperimentConfig load_config(const std::filesystem::path& file);

// One grid cell as written to grid.csv.
struct CellResult {
  std::string run_id;
  std::vector<std::pair<std::string, std::string>> coords;
  std::optional<RunSummary> summary;
  std::vector<std::pair<std::string, std::string>> extra;  // kind-specific finals
  std::string error;  // non-empty when the cell failed
};

struct ExperimentResult {
  std::vector<CellResult> cells;
};

struct RunnerOptions {
  std::filesystem::path out;
  int workers = 1;
  std::function<void(const std::string&)> log;
};

// Applies `fn(i)` for i in [0, n) on a pool of `workers` threads. Exceptions
// escape from no task; callers record them per cell.
void parallel_for(int n, int workers, const std::function<void(int)>& fn);

Dataset load_dataset(const ExperimentConfig& cfg, const std::filesystem::path& data_dir);

ExperimentResult run_experiment(const ExperimentConfig& cfg, const Dataset& ds,
                                const RunnerOptions& opts);

ExperimentResult run_train(const ExperimentConfig& cfg, const Dataset& ds, const RunnerOptions& opts);
ExperimentResult run_ablation(const ExperimentConfig& cfg, const Dataset& ds,
                              const RunnerOptions& opts);
ExperimentResult run_switchpoint(const ExperimentConfig& cfg, const Dataset& ds,
                                 const RunnerOptions& opts);
ExperimentResult run_accelerate(const ExperimentConfig& cfg, const Dataset& ds,
                                const RunnerOptions& opts);
ExperimentResult run_interpolate(const ExperimentConfig& cfg, const Dataset& ds,
                                 const RunnerOptions& opts);
ExperimentResult run_energy(const ExperimentConfig& cfg, const Dataset& ds,
                            const RunnerOptions& opts);

// Least-squares slope of the minibatch loss over steps [from, from + window).
std::optional<double> loss_slope(const std::vector<RunRecord>& records, long from, long window);

void write_grid(const ExperimentResult& result, const std::filesystem::path& file);

}  // namespace curvlab
