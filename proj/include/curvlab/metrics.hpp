#pragma once

// Per-step observables and their on-disk form: metrics.csv, config.json,
// summary.json.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "curvlab/models.hpp"
#include "curvlab/spectral.hpp"

namespace curvlab {

struct EnergyColumns {
  double frob_h = 0.0;
  double frob_h_se = 0.0;
  double frob_ho = 0.0;
  double frob_ho_se = 0.0;
  double frob_hf = 0.0;
  double frob_hf_se = 0.0;
  double sub_h = 0.0;
  double sub_ho = 0.0;
  double sub_hf = 0.0;
  double spectrum = 0.0;

  static EnergyColumns from(const EnergyReport& r);
};

// One row of metrics.csv. Unset optionals are written as empty cells.
struct RunRecord {
  long step = 0;
  std::optional<double> train_loss;       // minibatch loss before the step
  std::optional<double> full_train_loss;  // whole training split, at the eval cadence
  std::optional<double> test_loss;
  std::optional<double> test_accuracy;  // percent
  std::optional<double> grad_norm;
  std::optional<double> chi_k;
  std::optional<double> ritz_residual_max;
  std::optional<bool> lanczos_converged;
  bool diverged = false;
  std::vector<double> lambdas;  // k+1 leading eigenvalues at refresh steps
  std::optional<EnergyColumns> energy;
};

struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;  // percent
};

// Mean loss and argmax accuracy over the split; ties go to the lowest class.
Evaluation evaluate(const ModelSpec& spec, const ParamVector& params, const Batch& split);

// lambda_1 .. lambda_{k+1} in non-increasing order.
std::vector<double> sharpness_snapshot(const DominantSubspace& pairs);

// Column names of metrics.csv for a run tracking `lambda_count` eigenvalues.
std::vector<std::string> csv_header(int lambda_count);

// 17 significant digits, or "" for an absent value.
std::string format_cell(const std::optional<double>& v);

struct RunSummary {
  std::optional<double> final_train_loss;
  std::optional<double> best_train_loss;
  std::optional<double> final_test_accuracy;
  std::optional<double> best_test_accuracy;
  std::optional<double> final_test_loss;
  bool diverged = false;
  long steps = 0;

  [[nodiscard]] nlohmann::json to_json() const;
};

// Finals are taken from the last row carrying each value; "train loss" uses
// full_train_loss.
RunSummary summarize(const std::vector<RunRecord>& records);

// Writes metrics.csv, config.json and summary.json into run_dir (created if
// needed). Returns the summary.
RunSummary write_records(const std::vector<RunRecord>& records, const nlohmann::json& config,
                         const std::filesystem::path& run_dir);

// Parses a metrics.csv written by write_records.
std::vector<RunRecord> read_records(const std::filesystem::path& csv);

}  // namespace curvlab
