#pragma once

// The training loop: seeded minibatch stream, subspace refreshes on the
// Hessian holdout, optional mid-run switch of optimizer config, and per-step
// records.

#include <functional>
#include <map>
#include <optional>
#include <vector>

#include "curvlab/data.hpp"
#include "curvlab/metrics.hpp"
#include "curvlab/optim.hpp"

namespace curvlab {

struct Switch {
  long at_step = 0;
  OptimizerConfig cfg;
};

struct TrainOptions {
  long total_steps = 0;
  int batch_size = 50;
  int eval_every = 100;   // full-train and test evaluation cadence; 0 = first and last only
  int energy_every = 0;   // 0 disables energy reports
  int energy_probes = 20;
  bool track_subspace = false;  // refresh even when the update does not project
  std::uint64_t seed = 0;       // init, holdout and minibatch order
  std::vector<long> checkpoint_steps;
  std::optional<TrainState> start;  // resume from this state instead of a fresh init
  std::optional<Switch> switch_to;
  std::function<void(const RunRecord&)> on_record;
};

struct TrainResult {
  std::vector<RunRecord> records;
  TrainState final_state;
  std::map<long, TrainState> checkpoints;
  std::string holdout_id;
  bool halted = false;  // stopped early on a non-finite loss
};

TrainResult train(const ModelSpec& spec, const Dataset& ds, const OptimizerConfig& cfg,
                  const TrainOptions& options);

// Seeds derived from the run seed.
std::uint64_t init_seed(std::uint64_t run_seed);
std::uint64_t holdout_seed(std::uint64_t run_seed);
std::uint64_t epoch_seed(std::uint64_t run_seed, long epoch);

}  // namespace curvlab
