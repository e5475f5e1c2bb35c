#pragma once

// Dominant Hessian eigenspace: Lanczos top-k solver, projectors onto the
// subspace and its complement, gradient alignment, and curvature energies.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>

#include <Eigen/Dense>

#include "curvlab/errors.hpp"
#include "curvlab/models.hpp"

namespace curvlab {

// Symmetric linear operator on parameter space.
using MatVec = std::function<ParamVector(const ParamVector&)>;

struct DominantSubspace {
  Eigen::MatrixXd basis;        // p x k, orthonormal columns, descending eigenvalue order
  Eigen::VectorXd eigenvalues;  // non-increasing
  Eigen::VectorXd residuals;    // ||H u_i - lambda_i u_i|| at computation time
  long computed_at_step = -1;
  std::string holdout_id;

  [[nodiscard]] int k() const { return static_cast<int>(basis.cols()); }
  [[nodiscard]] Eigen::Index dim() const { return basis.rows(); }
  [[nodiscard]] double max_residual() const {
    return residuals.size() == 0 ? 0.0 : residuals.maxCoeff();
  }

  // Leading `count` pairs as a new subspace (count <= k).
  [[nodiscard]] DominantSubspace leading(int count) const;
};

struct LanczosOptions {
  int max_iters = 0;  // 0 selects max(3k, k + 30), capped at p
  double tol = 1e-6;  // residual bound relative to max(1, |lambda_i|)
  std::uint64_t seed = 0;
};

// Raised when the iteration budget runs out; carries the best Ritz pairs.
class NoConvergence : public Error {
 public:
  NoConvergence(const std::string& what, DominantSubspace best)
      : Error(what), best_(std::move(best)) {}
  [[nodiscard]] const DominantSubspace& best() const { return best_; }

 private:
  DominantSubspace best_;
};

// Top-k eigenpairs by algebraic value via Lanczos with full
// reorthogonalization from a seeded Gaussian start vector.
DominantSubspace lanczos_topk(const MatVec& matvec, Eigen::Index p, int k,
                              const LanczosOptions& options = {});

ParamVector project_dom(const DominantSubspace& sub, const ParamVector& g);
ParamVector project_bulk(const DominantSubspace& sub, const ParamVector& g);

// ||P_k g|| / ||g||, clamped to [0, 1].
double alignment(const DominantSubspace& sub, const ParamVector& g);

// sum_i ||M u_i||^2 over the subspace basis.
double subspace_energy(const MatVec& matvec, const DominantSubspace& sub);

struct FrobeniusEstimate {
  double value = 0.0;
  double std_error = 0.0;
  int probes = 0;
};

// Hutchinson estimate of ||M||_F^2 = E ||M z||^2 over Rademacher z.
FrobeniusEstimate frob_energy(const MatVec& matvec, Eigen::Index p, int probes,
                              std::uint64_t seed);

struct EnergyReport {
  FrobeniusEstimate frob_h;
  FrobeniusEstimate frob_ho;
  FrobeniusEstimate frob_hf;
  double sub_h = 0.0;
  double sub_ho = 0.0;
  double sub_hf = 0.0;
  double spectrum = 0.0;  // sum_i lambda_i^2

  // Empty when the denominator is zero.
  using Ratio = std::optional<double>;
  [[nodiscard]] static Ratio ratio(double num, double den);
  [[nodiscard]] Ratio sub_over_frob_h() const { return ratio(sub_h, frob_h.value); }
  [[nodiscard]] Ratio sub_over_frob_ho() const { return ratio(sub_ho, frob_ho.value); }
  [[nodiscard]] Ratio sub_over_frob_hf() const { return ratio(sub_hf, frob_hf.value); }
  [[nodiscard]] Ratio sub_over_spectrum_h() const { return ratio(sub_h, spectrum); }
  [[nodiscard]] Ratio sub_over_spectrum_ho() const { return ratio(sub_ho, spectrum); }
  [[nodiscard]] Ratio sub_over_spectrum_hf() const { return ratio(sub_hf, spectrum); }
};

// Energies of H, H_o and H_f = H - H_o on the holdout batch. The Frobenius
// terms share the same probes across the three operators.
EnergyReport energy_report(const ModelSpec& spec, const ParamVector& params, const Batch& holdout,
                           const DominantSubspace& sub, int probes, std::uint64_t seed);

}  // namespace curvlab
