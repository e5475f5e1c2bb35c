#include "curvlab/train.hpp"

#include <algorithm>
#include <cmath>

#include "curvlab/errors.hpp"
#include "curvlab/seeding.hpp"

namespace curvlab {

std::uint64_t init_seed(std::uint64_t run_seed) { return derive_seed({run_seed, 0x1417ULL}); }
std::uint64_t holdout_seed(std::uint64_t run_seed) { return derive_seed({run_seed, 0x401dULL}); }
std::uint64_t epoch_seed(std::uint64_t run_seed, long epoch) {
  return derive_seed({run_seed, 0xba7cULL, static_cast<std::uint64_t>(epoch)});
}

namespace {

std::uint64_t energy_seed(std::uint64_t run_seed, long step) {
  return derive_seed({run_seed, 0xe4e9ULL, static_cast<std::uint64_t>(step)});
}

void evaluate_into(RunRecord& rec, const ModelSpec& spec, const ParamVector& params,
                   const Dataset& ds) {
  rec.full_train_loss = loss(spec, params, ds.train);
  if (ds.test.size() > 0) {
    const Evaluation e = evaluate(spec, params, ds.test);
    rec.test_loss = e.loss;
    rec.test_accuracy = e.accuracy;
  }
}

}  // namespace

TrainResult train(const ModelSpec& spec, const Dataset& ds, const OptimizerConfig& cfg,
                  const TrainOptions& options) {
  spec.validate();
  cfg.validate();
  if (options.total_steps < 0) throw ConfigError("total_steps must be >= 0");
  if (options.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (options.eval_every < 0 || options.energy_every < 0) throw ConfigError("negative cadence");
  if (options.energy_every > 0 && options.energy_probes < 1) {
    throw ConfigError("energy_probes must be >= 1");
  }
  if (options.switch_to) {
    options.switch_to->cfg.validate();
    if (options.switch_to->at_step < 0 || options.switch_to->at_step > options.total_steps) {
      throw ConfigError("switch step outside [0, total_steps]");
    }
  }

  const int n = ds.train.size();
  const long steps_per_epoch = (n + options.batch_size - 1) / options.batch_size;
  OptimizerConfig active = cfg;
  HoldoutSet holdout = sample_holdout(ds, active.holdout_size, holdout_seed(options.seed));

  TrainResult result;
  TrainState& state = result.final_state;
  if (options.start) {
    state = *options.start;
  } else {
    state.params = init_params(spec, init_seed(options.seed));
    try {
      state.loss_at_start = loss(spec, state.params, ds.train);
    } catch (const DivergedError&) {
      state.loss_at_start = std::numeric_limits<double>::infinity();
    }
  }
  if (static_cast<std::size_t>(state.params.size()) != spec.param_count()) {
    throw DimensionMismatch("start state does not match the model");
  }

  auto emit = [&](RunRecord rec) {
    if (options.on_record) options.on_record(rec);
    result.records.push_back(std::move(rec));
  };
  auto wants_checkpoint = [&](long t) {
    return std::find(options.checkpoint_steps.begin(), options.checkpoint_steps.end(), t) !=
           options.checkpoint_steps.end();
  };

  long cached_epoch = -1;
  std::vector<std::vector<int>> epoch_batches;

  for (long t = state.step; t < options.total_steps; ++t) {
    if (options.switch_to && t == options.switch_to->at_step) {
      const OptimizerConfig& next = options.switch_to->cfg;
      if (next.holdout_size != active.holdout_size) {
        holdout = sample_holdout(ds, next.holdout_size, holdout_seed(options.seed));
        state.subspace.reset();
      }
      if (next.k != active.k) state.subspace.reset();
      active = next;
    }
    if (wants_checkpoint(t)) result.checkpoints[t] = state;

    RunRecord rec;
    rec.step = t;
    rec.diverged = state.diverged;
    try {
      if ((active.needs_subspace() || options.track_subspace) &&
          (should_refresh(t, active) || subspace_stale(state, active))) {
        const Refresh r = refresh_subspace(spec, state.params, holdout.batch, active, t);
        rec.lambdas = sharpness_snapshot(r.pairs);
        rec.ritz_residual_max = r.pairs.max_residual();
        rec.lanczos_converged = r.converged;
        state.subspace = r.pairs.leading(active.k);
        state.subspace->holdout_id = holdout.id;
      }
      if (options.eval_every > 0 ? t % options.eval_every == 0 : t == state.step) {
        evaluate_into(rec, spec, state.params, ds);
      }
      if (options.energy_every > 0 && t % options.energy_every == 0 && state.subspace) {
        rec.energy = EnergyColumns::from(energy_report(spec, state.params, holdout.batch,
                                                       *state.subspace, options.energy_probes,
                                                       energy_seed(options.seed, t)));
      }

      const long epoch = t / steps_per_epoch;
      if (epoch != cached_epoch) {
        epoch_batches = batches(n, options.batch_size, epoch_seed(options.seed, epoch));
        cached_epoch = epoch;
      }
      const Batch batch = gather(ds.train, epoch_batches[t % steps_per_epoch]);
      const StepOutcome out = step(state, spec, batch, active);
      rec.train_loss = out.loss;
      rec.grad_norm = out.grad_norm;
      rec.chi_k = out.chi;
      check_divergence(out.loss, state, active);
      if (rec.full_train_loss) check_divergence(*rec.full_train_loss, state, active);
      rec.diverged = state.diverged;
    } catch (const DivergedError&) {
      state.diverged = true;
      rec.diverged = true;
      emit(std::move(rec));
      for (long pad = t + 1; pad <= options.total_steps; ++pad) {
        RunRecord r;
        r.step = pad;
        r.diverged = true;
        emit(std::move(r));
      }
      result.halted = true;
      return result;
    }
    emit(std::move(rec));
  }

  if (wants_checkpoint(options.total_steps)) result.checkpoints[options.total_steps] = state;
  RunRecord last;
  last.step = options.total_steps;
  try {
    evaluate_into(last, spec, state.params, ds);
    check_divergence(*last.full_train_loss, state, active);
  } catch (const DivergedError&) {
    state.diverged = true;
  }
  last.diverged = state.diverged;
  emit(std::move(last));
  result.holdout_id = holdout.id;
  return result;
}

}  // namespace curvlab
