#pragma once

// Internal layer engine behind the models.hpp oracles.
//
// Activations are batched column-per-example. Each layer implements four
// passes: forward, R-forward (directional derivative of the forward pass
// along a parameter direction), backward, and the joint backward/R-backward
// sweep that yields the gradient and the Hessian-vector product together.

#include <cstddef>
#include <memory>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "curvlab/models.hpp"

namespace curvlab::detail {

using Matrix = Eigen::MatrixXd;

struct LayerCache {
  std::vector<int> argmax;  // max-pool routing, one entry per output element
};

class Layer {
 public:
  virtual ~Layer() = default;

  [[nodiscard]] virtual std::size_t param_count() const { return 0; }
  [[nodiscard]] virtual int out_size() const = 0;
  virtual void init(std::mt19937_64& /*rng*/, double* /*w*/) const {}

  virtual void forward(const double* w, const Matrix& x, Matrix& y, LayerCache& cache) const = 0;

  // ry = d/dt forward(w + t vw, x + t rx) at t = 0.
  virtual void rforward(const double* w, const double* vw, const Matrix& x, const Matrix& rx,
                        const Matrix& y, Matrix& ry, const LayerCache& cache) const = 0;

  // Given dL/dy, accumulates dL/dw into grad (if non-null) and writes dL/dx
  // into dx (if non-null).
  virtual void backward(const double* w, const Matrix& x, const Matrix& y, const Matrix& dy,
                        Matrix* dx, double* grad, const LayerCache& cache) const = 0;

  // R-operator applied to backward(): accumulates R{dL/dw} into rgrad and
  // writes R{dL/dx} into rdx.
  virtual void rbackward(const double* w, const double* vw, const Matrix& x, const Matrix& rx,
                         const Matrix& y, const Matrix& dy, const Matrix& rdy, Matrix* rdx,
                         double* rgrad, const LayerCache& cache) const = 0;

  std::size_t offset = 0;
};

class Network {
 public:
  explicit Network(const ModelSpec& spec);

  [[nodiscard]] std::size_t param_count() const { return param_count_; }
  [[nodiscard]] const ModelSpec& spec() const { return spec_; }

  void init(double* params, std::uint64_t seed) const;

  struct Trace {
    std::vector<Matrix> acts;  // acts[0] = input, acts.back() = outputs
    std::vector<LayerCache> caches;
  };

  void forward(const double* params, const Matrix& x, Trace& trace) const;

  // racts[i] = R{acts[i]}, with R{input} = 0.
  void rforward(const double* params, const double* v, const Trace& trace,
                std::vector<Matrix>& racts) const;

  // Accumulates J^T dF into grad.
  void backward(const double* params, const Trace& trace, const Matrix& d_out,
                double* grad) const;

  // Accumulates R{grad} into rgrad given the output seeds dF and R{dF}.
  void rbackward(const double* params, const double* v, const Trace& trace,
                 const std::vector<Matrix>& racts, const Matrix& d_out, const Matrix& rd_out,
                 double* rgrad) const;

 private:
  ModelSpec spec_;
  std::vector<std::unique_ptr<Layer>> layers_;
  std::size_t param_count_ = 0;
};

}  // namespace curvlab::detail
