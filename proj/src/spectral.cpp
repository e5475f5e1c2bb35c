#include "curvlab/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace curvlab {

namespace {

Eigen::VectorXd gaussian_vector(Eigen::Index p, std::mt19937_64& rng) {
  std::normal_distribution<double> dist;
  Eigen::VectorXd v(p);
  for (Eigen::Index i = 0; i < p; ++i) v(i) = dist(rng);
  return v;
}

// Two passes of classical Gram-Schmidt against the first `cols` basis vectors.
void orthogonalize(const Eigen::MatrixXd& q, Eigen::Index cols, Eigen::VectorXd& w) {
  if (cols == 0) return;
  for (int pass = 0; pass < 2; ++pass) {
    const Eigen::VectorXd c = q.leftCols(cols).transpose() * w;
    w.noalias() -= q.leftCols(cols) * c;
  }
}

void fix_sign(Eigen::Ref<Eigen::VectorXd> u) {
  Eigen::Index idx = 0;
  u.cwiseAbs().maxCoeff(&idx);
  if (u(idx) < 0.0) u = -u;
}

void check_dim(const DominantSubspace& sub, const ParamVector& g) {
  if (g.size() != sub.dim()) {
    throw DimensionMismatch("vector length " + std::to_string(g.size()) +
                            " does not match subspace dimension " + std::to_string(sub.dim()));
  }
}

struct RitzPairs {
  Eigen::VectorXd values;  // descending
  Eigen::MatrixXd vectors;  // columns of eigenvectors of T, descending order
};

RitzPairs tridiagonal_eigen(const Eigen::VectorXd& alpha, const Eigen::VectorXd& beta,
                            Eigen::Index m) {
  Eigen::MatrixXd t = Eigen::MatrixXd::Zero(m, m);
  for (Eigen::Index i = 0; i < m; ++i) {
    t(i, i) = alpha(i);
    if (i + 1 < m) t(i, i + 1) = t(i + 1, i) = beta(i);
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(t);
  return {es.eigenvalues().reverse(), es.eigenvectors().rowwise().reverse()};
}

}  // namespace

DominantSubspace DominantSubspace::leading(int count) const {
  DominantSubspace out;
  out.basis = basis.leftCols(count);
  out.eigenvalues = eigenvalues.head(count);
  out.residuals = residuals.head(std::min<Eigen::Index>(count, residuals.size()));
  out.computed_at_step = computed_at_step;
  out.holdout_id = holdout_id;
  return out;
}

DominantSubspace lanczos_topk(const MatVec& matvec, Eigen::Index p, int k,
                              const LanczosOptions& options) {
  if (k < 1 || k >= p) {
    throw DimensionMismatch("lanczos_topk needs 1 <= k < p (k=" + std::to_string(k) +
                            ", p=" + std::to_string(p) + ")");
  }
  Eigen::Index budget = options.max_iters > 0 ? options.max_iters : std::max(3 * k, k + 30);
  budget = std::min(budget, p);

  std::mt19937_64 rng(options.seed);
  Eigen::MatrixXd q(p, budget);
  Eigen::VectorXd alpha = Eigen::VectorXd::Zero(budget);
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(budget);

  Eigen::VectorXd start = gaussian_vector(p, rng);
  q.col(0) = start / start.norm();

  RitzPairs ritz;
  Eigen::VectorXd residuals;
  Eigen::VectorXd top_at_last_collapse;
  Eigen::Index m = 0;
  double scale = 0.0;  // running estimate of ||A||
  bool converged = false;

  auto within_tol = [&](const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    for (int i = 0; i < k; ++i) {
      if (std::abs(a(i) - b(i)) > options.tol * std::max(1.0, std::abs(a(i)))) return false;
    }
    return true;
  };

  for (Eigen::Index j = 0; j < budget; ++j) {
    Eigen::VectorXd w = matvec(q.col(j));
    if (w.size() != p) throw DimensionMismatch("matvec returned a vector of the wrong length");
    alpha(j) = q.col(j).dot(w);
    w.noalias() -= alpha(j) * q.col(j);
    if (j > 0) w.noalias() -= beta(j - 1) * q.col(j - 1);
    orthogonalize(q, j + 1, w);
    beta(j) = w.norm();
    m = j + 1;
    scale = std::max({scale, std::abs(alpha(j)), beta(j)});

    if (j == 0 && scale == 0.0) throw ZeroOperator("operator annihilates the start vector");

    const bool collapsed = beta(j) <= 1e-12 * scale;
    if (collapsed) beta(j) = 0.0;
    if (m >= k) {
      ritz = tridiagonal_eigen(alpha, beta, m);
      residuals = (beta(j) * ritz.vectors.row(m - 1).head(k).transpose()).cwiseAbs();
      if (collapsed) {
        // An exact invariant subspace may still miss copies of repeated
        // eigenvalues; accept once a restarted block leaves the top k unchanged.
        const Eigen::VectorXd top = ritz.values.head(k);
        converged = m == p || (top_at_last_collapse.size() == k && within_tol(top, top_at_last_collapse));
        top_at_last_collapse = top;
      } else {
        converged = true;
        for (int i = 0; i < k; ++i) {
          if (residuals(i) > options.tol * std::max(1.0, std::abs(ritz.values(i)))) {
            converged = false;
            break;
          }
        }
      }
      if (converged) break;
    }
    if (j + 1 == budget) break;

    if (collapsed) {
      // Continue from a fresh direction orthogonal to everything seen so far.
      Eigen::VectorXd fresh = gaussian_vector(p, rng);
      orthogonalize(q, j + 1, fresh);
      const double n = fresh.norm();
      if (n == 0.0) throw ZeroOperator("Krylov space collapsed");
      q.col(j + 1) = fresh / n;
    } else {
      q.col(j + 1) = w / beta(j);
    }
  }

  if (m < k) throw ZeroOperator("Krylov space smaller than k");

  DominantSubspace sub;
  sub.basis = q.leftCols(m) * ritz.vectors.leftCols(k);
  for (int i = 0; i < k; ++i) fix_sign(sub.basis.col(i));
  sub.eigenvalues = ritz.values.head(k);
  sub.residuals = residuals;
  if (!converged) {
    throw NoConvergence("Lanczos did not converge in " + std::to_string(budget) +
                            " iterations (max residual " + std::to_string(residuals.maxCoeff()) +
                            ")",
                        std::move(sub));
  }
  return sub;
}

ParamVector project_dom(const DominantSubspace& sub, const ParamVector& g) {
  check_dim(sub, g);
  return sub.basis * (sub.basis.transpose() * g);
}

ParamVector project_bulk(const DominantSubspace& sub, const ParamVector& g) {
  return g - project_dom(sub, g);
}

double alignment(const DominantSubspace& sub, const ParamVector& g) {
  check_dim(sub, g);
  const double g_norm = g.norm();
  if (g_norm <= 1e-300) throw ZeroGradient("alignment undefined for a zero gradient");
  const double chi = (sub.basis.transpose() * g).norm() / g_norm;
  return std::clamp(chi, 0.0, 1.0);
}

double subspace_energy(const MatVec& matvec, const DominantSubspace& sub) {
  double total = 0.0;
  for (int i = 0; i < sub.k(); ++i) {
    const ParamVector mu = matvec(sub.basis.col(i));
    if (mu.size() != sub.dim()) throw DimensionMismatch("matvec output length mismatch");
    total += mu.squaredNorm();
  }
  return total;
}

namespace {

ParamVector rademacher(Eigen::Index p, std::mt19937_64& rng) {
  ParamVector z(p);
  std::uint64_t bits = 0;
  for (Eigen::Index i = 0; i < p; ++i) {
    if (i % 64 == 0) bits = rng();
    z(i) = (bits & 1U) != 0U ? 1.0 : -1.0;
    bits >>= 1U;
  }
  return z;
}

FrobeniusEstimate summarize(const std::vector<double>& samples) {
  FrobeniusEstimate est;
  est.probes = static_cast<int>(samples.size());
  if (samples.empty()) return est;
  double sum = 0.0;
  for (double s : samples) sum += s;
  est.value = sum / samples.size();
  if (samples.size() > 1) {
    double sq = 0.0;
    for (double s : samples) sq += (s - est.value) * (s - est.value);
    est.std_error = std::sqrt(sq / (samples.size() - 1) / samples.size());
  }
  return est;
}

}  // namespace

FrobeniusEstimate frob_energy(const MatVec& matvec, Eigen::Index p, int probes,
                              std::uint64_t seed) {
  if (probes < 1) throw ConfigError("frob_energy needs at least one probe");
  std::mt19937_64 rng(seed);
  std::vector<double> samples;
  samples.reserve(probes);
  for (int i = 0; i < probes; ++i) samples.push_back(matvec(rademacher(p, rng)).squaredNorm());
  return summarize(samples);
}

EnergyReport::Ratio EnergyReport::ratio(double num, double den) {
  if (den == 0.0) return std::nullopt;
  return num / den;
}

EnergyReport energy_report(const ModelSpec& spec, const ParamVector& params, const Batch& holdout,
                           const DominantSubspace& sub, int probes, std::uint64_t seed) {
  if (probes < 1) throw ConfigError("energy_report needs at least one probe");
  check_dim(sub, params);
  EnergyReport r;
  for (int i = 0; i < sub.k(); ++i) {
    const CurvatureProducts c = curvature_products(spec, params, holdout, sub.basis.col(i));
    r.sub_h += c.hessian.squaredNorm();
    r.sub_ho += c.gauss_newton.squaredNorm();
    r.sub_hf += (c.hessian - c.gauss_newton).squaredNorm();
  }
  r.spectrum = sub.eigenvalues.squaredNorm();

  std::mt19937_64 rng(seed);
  std::vector<double> h;
  std::vector<double> ho;
  std::vector<double> hf;
  for (int i = 0; i < probes; ++i) {
    const ParamVector z = rademacher(params.size(), rng);
    const CurvatureProducts c = curvature_products(spec, params, holdout, z);
    h.push_back(c.hessian.squaredNorm());
    ho.push_back(c.gauss_newton.squaredNorm());
    hf.push_back((c.hessian - c.gauss_newton).squaredNorm());
  }
  r.frob_h = summarize(h);
  r.frob_ho = summarize(ho);
  r.frob_hf = summarize(hf);
  return r;
}

}  // namespace curvlab
