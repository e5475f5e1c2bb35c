#include "curvlab/optim.hpp"

#include <cmath>

#include "curvlab/errors.hpp"
#include "curvlab/seeding.hpp"

namespace curvlab {

Coefficient parse_coefficient(const std::string& s) {
  if (s == "inf" || s == "INF" || s == "Inf" || s == "infinity") return Coefficient::infinity();
  double v = 0.0;
  try {
    std::size_t used = 0;
    v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
  } catch (const std::exception&) {
    throw ConfigError("bad coefficient '" + s + "'");
  }
  if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError("coefficient must be positive: " + s);
  return v;
}

std::string to_string(const Coefficient& c) {
  if (c.is_infinite()) return "inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", c.value());
  return buf;
}

std::string to_string(UpdateMode m) {
  switch (m) {
    case UpdateMode::SGD: return "sgd";
    case UpdateMode::Dom: return "dom";
    case UpdateMode::Bulk: return "bulk";
    case UpdateMode::Interpolated: return "interpolated";
  }
  return "?";
}

UpdateMode parse_mode(const std::string& s) {
  if (s == "sgd" || s == "SGD") return UpdateMode::SGD;
  if (s == "dom" || s == "Dom") return UpdateMode::Dom;
  if (s == "bulk" || s == "Bulk") return UpdateMode::Bulk;
  if (s == "interpolated" || s == "interp") return UpdateMode::Interpolated;
  throw ConfigError("unknown update mode '" + s + "'");
}

Coefficient OptimizerConfig::effective_alpha() const {
  switch (mode) {
    case UpdateMode::Bulk: return Coefficient::infinity();
    case UpdateMode::Interpolated: return alpha_dom;
    default: return 1.0;
  }
}

Coefficient OptimizerConfig::effective_beta() const {
  switch (mode) {
    case UpdateMode::Dom: return Coefficient::infinity();
    case UpdateMode::Interpolated: return beta_bulk;
    default: return 1.0;
  }
}

bool OptimizerConfig::needs_subspace() const { return !(effective_alpha() == effective_beta()); }

void OptimizerConfig::validate() const {
  if (!(eta > 0.0) || !std::isfinite(eta)) throw ConfigError("eta must be positive");
  for (const Coefficient& c : {alpha_dom, beta_bulk}) {
    if (!c.is_infinite() && !(c.value() > 0.0)) throw ConfigError("coefficients must be positive");
  }
  if (k < 1) throw ConfigError("k must be >= 1");
  if (refresh_period < 1) throw ConfigError("refresh_period must be >= 1");
  if (holdout_size < 1) throw ConfigError("holdout_size must be >= 1");
  if (!(divergence_factor > 0.0)) throw ConfigError("divergence_factor must be positive");
  if (lanczos_max_iters < 0) throw ConfigError("lanczos_max_iters must be >= 0");
  if (!(lanczos_tol > 0.0)) throw ConfigError("lanczos_tol must be positive");
}

ParamVector apply_update(const ParamVector& params, const ParamVector& g,
                         const DominantSubspace* sub, const OptimizerConfig& cfg) {
  if (g.size() != params.size()) throw DimensionMismatch("gradient length differs from params");
  const Coefficient alpha = cfg.effective_alpha();
  const Coefficient beta = cfg.effective_beta();
  if (alpha == beta) {
    if (alpha.is_infinite()) return params;
    return params - (cfg.eta / alpha.value()) * g;
  }
  if (sub == nullptr) throw StaleSubspace("projected update without a subspace");
  const ParamVector dom = project_dom(*sub, g);
  const ParamVector bulk = g - dom;
  return params - (cfg.eta * alpha.reciprocal()) * dom - (cfg.eta * beta.reciprocal()) * bulk;
}

bool should_refresh(long step, const OptimizerConfig& cfg) {
  return step % cfg.refresh_period == 0;
}

bool subspace_stale(const TrainState& state, const OptimizerConfig& cfg) {
  return !state.subspace || state.step - state.subspace->computed_at_step >= cfg.refresh_period ||
         state.step < state.subspace->computed_at_step;
}

StepOutcome step(TrainState& state, const ModelSpec& spec, const Batch& batch,
                 const OptimizerConfig& cfg) {
  const bool project = cfg.needs_subspace();
  if (project && subspace_stale(state, cfg)) {
    throw StaleSubspace("subspace missing or older than refresh_period at step " +
                        std::to_string(state.step));
  }
  LossAndGradient lg;
  try {
    lg = loss_and_gradient(spec, state.params, batch);
  } catch (const DivergedError&) {
    state.diverged = true;
    throw;
  }
  StepOutcome out;
  out.loss = lg.loss;
  out.grad_norm = lg.gradient.norm();
  if (state.subspace && out.grad_norm > 1e-300) out.chi = alignment(*state.subspace, lg.gradient);

  ParamVector next =
      apply_update(state.params, lg.gradient, state.subspace ? &*state.subspace : nullptr, cfg);
  if (!next.allFinite()) {
    state.diverged = true;
    throw DivergedError("non-finite parameters after step " + std::to_string(state.step));
  }
  state.params = std::move(next);
  ++state.step;
  return out;
}

bool check_divergence(double current_loss, TrainState& state, const OptimizerConfig& cfg) {
  if (!std::isfinite(current_loss) || current_loss > cfg.divergence_factor * state.loss_at_start) {
    state.diverged = true;
  }
  return state.diverged;
}

Refresh refresh_subspace(const ModelSpec& spec, const ParamVector& params, const Batch& holdout,
                         const OptimizerConfig& cfg, long step) {
  const auto p = static_cast<Eigen::Index>(params.size());
  MatVec op = [&](const ParamVector& v) { return hvp(spec, params, holdout, v); };
  LanczosOptions opts;
  opts.max_iters = cfg.lanczos_max_iters > 0 ? cfg.lanczos_max_iters : cfg.k + 1 + 60;
  opts.tol = cfg.lanczos_tol;
  opts.seed = derive_seed({cfg.seed, 0x1a9c05ULL, static_cast<std::uint64_t>(step)});
  Refresh r;
  try {
    r.pairs = lanczos_topk(op, p, cfg.k + 1, opts);
  } catch (const NoConvergence& e) {
    r.pairs = e.best();
    r.converged = false;
  }
  r.pairs.computed_at_step = step;
  return r;
}

}  // namespace curvlab
