#pragma once

// Small classifiers with exact first- and second-order oracles.
//
// Every oracle works on a flat parameter vector and a batch whose inputs are
// stored one example per column (CHW order for image inputs). All quantities
// are averaged over the batch. Second-order products use forward-over-reverse
// differentiation, so hvp() is exact up to rounding.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace curvlab {

using ParamVector = Eigen::VectorXd;

enum class Architecture {
  MLP3,    // affine(in -> h), act, affine(h -> h), act, affine(h -> K)
  CNN3,    // 3 x [conv3x3(pad 1) -> act -> maxpool2] then affine head
  Linear,  // F(x) = W x, no bias; zero functional Hessian
};

enum class Activation { ReLU, Tanh };

enum class LossKind { MSE, CrossEntropy };

struct InputShape {
  int channels = 1;
  int height = 28;
  int width = 28;

  [[nodiscard]] int size() const { return channels * height * width; }
  bool operator==(const InputShape&) const = default;
};

struct ModelSpec {
  Architecture architecture = Architecture::MLP3;
  Activation activation = Activation::ReLU;
  LossKind loss = LossKind::MSE;
  InputShape input_shape{};
  int num_classes = 10;
  int hidden = 100;   // MLP3 width
  int channels = 32;  // CNN3 width

  // Number of trainable scalars; deterministic in the fields above.
  [[nodiscard]] std::size_t param_count() const;
  [[nodiscard]] std::string describe() const;
  void validate() const;
};

struct Batch {
  Eigen::MatrixXd inputs;   // input_size x n
  std::vector<int> labels;  // n entries in [0, K)

  [[nodiscard]] int size() const { return static_cast<int>(labels.size()); }
};

// Throws DimensionMismatch / InvalidSize when the batch does not fit the spec.
void validate_batch(const ModelSpec& spec, const Batch& batch);

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) per layer, biases included.
ParamVector init_params(const ModelSpec& spec, std::uint64_t seed);

// Network outputs F(x), num_classes x n.
Eigen::MatrixXd forward(const ModelSpec& spec, const ParamVector& params,
                        const Eigen::MatrixXd& inputs);

double loss(const ModelSpec& spec, const ParamVector& params, const Batch& batch);

ParamVector gradient(const ModelSpec& spec, const ParamVector& params, const Batch& batch);

struct LossAndGradient {
  double loss = 0.0;
  ParamVector gradient;
};

LossAndGradient loss_and_gradient(const ModelSpec& spec, const ParamVector& params,
                                  const Batch& batch);

// Exact Hessian-vector product of the batch-mean loss.
ParamVector hvp(const ModelSpec& spec, const ParamVector& params, const Batch& batch,
                const ParamVector& v);

// Generalized Gauss-Newton product  mean_x J^T (d^2 l / dF^2) J v.
ParamVector ggn_vp(const ModelSpec& spec, const ParamVector& params, const Batch& batch,
                   const ParamVector& v);

// Functional Hessian product, defined as hvp(v) - ggn_vp(v).
ParamVector fh_vp(const ModelSpec& spec, const ParamVector& params, const Batch& batch,
                  const ParamVector& v);

struct CurvatureProducts {
  ParamVector hessian;       // H v
  ParamVector gauss_newton;  // H_o v
};

// H v and H_o v from a single shared forward pass.
CurvatureProducts curvature_products(const ModelSpec& spec, const ParamVector& params,
                                     const Batch& batch, const ParamVector& v);

std::string to_string(Architecture a);
std::string to_string(Activation a);
std::string to_string(LossKind l);
Architecture parse_architecture(const std::string& s);
Activation parse_activation(const std::string& s);
LossKind parse_loss(const std::string& s);

}  // namespace curvlab
