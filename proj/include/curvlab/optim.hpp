#pragma once

// Interpolated projected-gradient update
//   theta' = theta - (eta / alpha) P g - (eta / beta) (I - P) g
// with SGD, Dom-SGD and Bulk-SGD as special cases, plus refresh scheduling
// and divergence detection.

#include <optional>
#include <string>

#include "curvlab/models.hpp"
#include "curvlab/spectral.hpp"

namespace curvlab {

// Positive step-size divisor or an explicit infinity with 1/INF = 0.
class Coefficient {
 public:
  constexpr Coefficient() = default;
  constexpr Coefficient(double value) : value_(value) {}  // NOLINT(google-explicit-constructor)
  static constexpr Coefficient infinity() {
    Coefficient c;
    c.infinite_ = true;
    return c;
  }

  [[nodiscard]] constexpr bool is_infinite() const { return infinite_; }
  [[nodiscard]] constexpr double value() const { return value_; }
  [[nodiscard]] constexpr double reciprocal() const { return infinite_ ? 0.0 : 1.0 / value_; }

  friend constexpr bool operator==(const Coefficient& a, const Coefficient& b) {
    return a.infinite_ == b.infinite_ && (a.infinite_ || a.value_ == b.value_);
  }

 private:
  double value_ = 1.0;
  bool infinite_ = false;
};

// "inf" / "INF" or a positive number.
Coefficient parse_coefficient(const std::string& s);
std::string to_string(const Coefficient& c);

enum class UpdateMode { SGD, Dom, Bulk, Interpolated };

std::string to_string(UpdateMode m);
UpdateMode parse_mode(const std::string& s);

struct OptimizerConfig {
  UpdateMode mode = UpdateMode::SGD;
  double eta = 0.01;
  Coefficient alpha_dom = 1.0;  // used by Interpolated only
  Coefficient beta_bulk = 1.0;  // used by Interpolated only
  int k = 10;
  int refresh_period = 10;
  int holdout_size = 200;
  double divergence_factor = 10.0;
  std::uint64_t seed = 0;
  int lanczos_max_iters = 0;  // 0 selects (k + 1) + 60
  double lanczos_tol = 1e-6;

  // (alpha, beta) after resolving the mode sugar.
  [[nodiscard]] Coefficient effective_alpha() const;
  [[nodiscard]] Coefficient effective_beta() const;
  // False when alpha == beta, where the projector cancels out.
  [[nodiscard]] bool needs_subspace() const;
  void validate() const;
};

struct TrainState {
  ParamVector params;
  long step = 0;
  std::optional<DominantSubspace> subspace;
  bool diverged = false;
  double loss_at_start = 0.0;
};

// New parameters from a gradient.
// `sub` may be null only when cfg.needs_subspace() is false.
ParamVector apply_update(const ParamVector& params, const ParamVector& g,
                         const DominantSubspace* sub, const OptimizerConfig& cfg);

struct StepOutcome {
  double loss = 0.0;  // minibatch loss before the update
  double grad_norm = 0.0;
  std::optional<double> chi;  // alignment of the minibatch gradient, when a subspace is held
};

// One optimizer step on `batch`. Requires a subspace younger than
// refresh_period whenever the mode projects.
StepOutcome step(TrainState& state, const ModelSpec& spec, const Batch& batch,
                 const OptimizerConfig& cfg);

bool should_refresh(long step, const OptimizerConfig& cfg);

// True when the subspace is absent or at least refresh_period steps old.
bool subspace_stale(const TrainState& state, const OptimizerConfig& cfg);

// Sets the permanent diverged flag when `current_loss` is non-finite or
// exceeds divergence_factor * loss_at_start.
bool check_divergence(double current_loss, TrainState& state, const OptimizerConfig& cfg);

struct Refresh {
  DominantSubspace pairs;  // k + 1 leading pairs
  bool converged = true;
};

// Top k+1 Hessian eigenpairs on the holdout batch. A solver that runs out
// of iterations returns its best pairs with converged = false.
Refresh refresh_subspace(const ModelSpec& spec, const ParamVector& params, const Batch& holdout,
                         const OptimizerConfig& cfg, long step);

}  // namespace curvlab
