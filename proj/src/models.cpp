#include "curvlab/models.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "curvlab/errors.hpp"
#include "network.hpp"

namespace curvlab {

namespace {

using detail::Matrix;
using detail::Network;

// Examples per internal pass; bounds activation memory for large holdouts.
constexpr int kChunk = 256;

struct PassRequest {
  bool grad = false;
  bool hessian = false;
  bool gauss_newton = false;
  const ParamVector* direction = nullptr;
};

struct PassResult {
  double loss = 0.0;
  ParamVector grad;
  ParamVector hessian;
  ParamVector gauss_newton;
};

void require_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) throw DivergedError(std::string("non-finite ") + what);
}

// Per-example loss sum over a chunk, plus the output-space derivative and
// (for CrossEntropy) the softmax probabilities used by the loss Hessian.
struct HeadEval {
  double loss_sum = 0.0;
  Matrix d_out;  // dl/dF scaled by 1/n_total
  Matrix probs;  // CrossEntropy only
};

HeadEval evaluate_head(LossKind kind, const Matrix& outputs, const std::vector<int>& labels,
                       int first, double inv_total) {
  HeadEval h;
  const auto n = outputs.cols();
  h.d_out.resize(outputs.rows(), n);
  if (kind == LossKind::MSE) {
    Matrix residual = outputs;
    for (Eigen::Index j = 0; j < n; ++j) residual(labels[first + j], j) -= 1.0;
    h.loss_sum = residual.squaredNorm();
    h.d_out = (2.0 * inv_total) * residual;
  } else {
    h.probs.resize(outputs.rows(), n);
    for (Eigen::Index j = 0; j < n; ++j) {
      const double m = outputs.col(j).maxCoeff();
      const Eigen::VectorXd shifted = outputs.col(j).array() - m;
      const double log_z = std::log(shifted.array().exp().sum());
      h.loss_sum += log_z - shifted(labels[first + j]);
      h.probs.col(j) = (shifted.array() - log_z).exp();
    }
    h.d_out = h.probs;
    for (Eigen::Index j = 0; j < n; ++j) h.d_out(labels[first + j], j) -= 1.0;
    h.d_out *= inv_total;
  }
  if (!std::isfinite(h.loss_sum)) throw DivergedError("non-finite loss");
  return h;
}

// (d^2 l / dF^2) applied to the output perturbation, scaled by 1/n_total.
Matrix apply_loss_hessian(LossKind kind, const HeadEval& head, const Matrix& r_out,
                          double inv_total) {
  if (kind == LossKind::MSE) return (2.0 * inv_total) * r_out;
  Matrix out = head.probs.cwiseProduct(r_out);
  const Eigen::RowVectorXd dots = out.colwise().sum();
  out -= head.probs * dots.asDiagonal();
  return inv_total * out;
}

PassResult run_pass(const ModelSpec& spec, const ParamVector& params, const Batch& batch,
                    const PassRequest& req) {
  validate_batch(spec, batch);
  const Network net(spec);
  const auto p = static_cast<Eigen::Index>(net.param_count());
  if (params.size() != p) {
    throw DimensionMismatch("parameter vector has length " + std::to_string(params.size()) +
                            ", model expects " + std::to_string(p));
  }
  const bool second_order = req.hessian || req.gauss_newton;
  if (second_order && (req.direction == nullptr || req.direction->size() != p)) {
    throw DimensionMismatch("direction vector length does not match parameter count");
  }

  PassResult result;
  if (req.grad) result.grad.setZero(p);
  if (req.hessian) result.hessian.setZero(p);
  if (req.gauss_newton) result.gauss_newton.setZero(p);

  const int n = batch.size();
  const double inv_total = 1.0 / n;
  Network::Trace trace;
  std::vector<Matrix> racts;
  for (int first = 0; first < n; first += kChunk) {
    const int count = std::min(kChunk, n - first);
    net.forward(params.data(), batch.inputs.middleCols(first, count), trace);
    require_finite(trace.acts.back(), "network output");
    const HeadEval head = evaluate_head(spec.loss, trace.acts.back(), batch.labels, first,
                                        inv_total);
    result.loss += head.loss_sum;

    if (req.grad) net.backward(params.data(), trace, head.d_out, result.grad.data());
    if (!second_order) continue;

    const double* v = req.direction->data();
    net.rforward(params.data(), v, trace, racts);
    const Matrix curv = apply_loss_hessian(spec.loss, head, racts.back(), inv_total);
    if (req.hessian) {
      net.rbackward(params.data(), v, trace, racts, head.d_out, curv, result.hessian.data());
    }
    if (req.gauss_newton) net.backward(params.data(), trace, curv, result.gauss_newton.data());
  }
  result.loss *= inv_total;
  if (req.grad && !result.grad.allFinite()) throw DivergedError("non-finite gradient");
  if (req.hessian && !result.hessian.allFinite()) throw DivergedError("non-finite hvp");
  return result;
}

}  // namespace

std::size_t ModelSpec::param_count() const { return detail::Network(*this).param_count(); }

void ModelSpec::validate() const {
  if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
  if (input_shape.channels < 1 || input_shape.height < 1 || input_shape.width < 1) {
    throw ConfigError("input shape dimensions must be positive");
  }
  if (architecture == Architecture::MLP3 && hidden < 1) throw ConfigError("hidden must be >= 1");
  if (architecture == Architecture::CNN3) {
    if (channels < 1) throw ConfigError("channels must be >= 1");
    if (input_shape.height < 8 || input_shape.width < 8) {
      throw ConfigError("CNN3 needs inputs of at least 8x8 (three 2x2 poolings)");
    }
  }
}

std::string ModelSpec::describe() const {
  std::ostringstream os;
  os << to_string(architecture);
  if (architecture == Architecture::MLP3) os << "(hidden=" << hidden << ")";
  if (architecture == Architecture::CNN3) os << "(channels=" << channels << ")";
  os << "/" << to_string(activation) << "/" << to_string(loss) << " input=" << input_shape.channels
     << "x" << input_shape.height << "x" << input_shape.width << " K=" << num_classes;
  return os.str();
}

void validate_batch(const ModelSpec& spec, const Batch& batch) {
  if (batch.size() < 1) throw InvalidSize("batch must contain at least one example");
  if (batch.inputs.cols() != batch.size()) {
    throw DimensionMismatch("batch inputs and labels disagree on example count");
  }
  if (batch.inputs.rows() != spec.input_shape.size()) {
    throw DimensionMismatch("batch input size " + std::to_string(batch.inputs.rows()) +
                            " does not match model input size " +
                            std::to_string(spec.input_shape.size()));
  }
  for (int label : batch.labels) {
    if (label < 0 || label >= spec.num_classes) {
      throw LabelOutOfRange("label " + std::to_string(label) + " outside [0, " +
                            std::to_string(spec.num_classes) + ")");
    }
  }
}

ParamVector init_params(const ModelSpec& spec, std::uint64_t seed) {
  const Network net(spec);
  ParamVector params(static_cast<Eigen::Index>(net.param_count()));
  net.init(params.data(), seed);
  return params;
}

Eigen::MatrixXd forward(const ModelSpec& spec, const ParamVector& params,
                        const Eigen::MatrixXd& inputs) {
  const Network net(spec);
  if (params.size() != static_cast<Eigen::Index>(net.param_count())) {
    throw DimensionMismatch("parameter vector length does not match model");
  }
  if (inputs.rows() != spec.input_shape.size()) {
    throw DimensionMismatch("input size does not match model");
  }
  Eigen::MatrixXd out(spec.num_classes, inputs.cols());
  Network::Trace trace;
  for (Eigen::Index first = 0; first < inputs.cols(); first += kChunk) {
    const auto count = std::min<Eigen::Index>(kChunk, inputs.cols() - first);
    net.forward(params.data(), inputs.middleCols(first, count), trace);
    out.middleCols(first, count) = trace.acts.back();
  }
  require_finite(out, "network output");
  return out;
}

double loss(const ModelSpec& spec, const ParamVector& params, const Batch& batch) {
  return run_pass(spec, params, batch, {}).loss;
}

ParamVector gradient(const ModelSpec& spec, const ParamVector& params, const Batch& batch) {
  return loss_and_gradient(spec, params, batch).gradient;
}

LossAndGradient loss_and_gradient(const ModelSpec& spec, const ParamVector& params,
                                  const Batch& batch) {
  PassRequest req;
  req.grad = true;
  PassResult r = run_pass(spec, params, batch, req);
  return {r.loss, std::move(r.grad)};
}

ParamVector hvp(const ModelSpec& spec, const ParamVector& params, const Batch& batch,
                const ParamVector& v) {
  PassRequest req;
  req.hessian = true;
  req.direction = &v;
  return std::move(run_pass(spec, params, batch, req).hessian);
}

ParamVector ggn_vp(const ModelSpec& spec, const ParamVector& params, const Batch& batch,
                   const ParamVector& v) {
  PassRequest req;
  req.gauss_newton = true;
  req.direction = &v;
  return std::move(run_pass(spec, params, batch, req).gauss_newton);
}

ParamVector fh_vp(const ModelSpec& spec, const ParamVector& params, const Batch& batch,
                  const ParamVector& v) {
  CurvatureProducts c = curvature_products(spec, params, batch, v);
  return c.hessian - c.gauss_newton;
}

CurvatureProducts curvature_products(const ModelSpec& spec, const ParamVector& params,
                                     const Batch& batch, const ParamVector& v) {
  PassRequest req;
  req.hessian = true;
  req.gauss_newton = true;
  req.direction = &v;
  PassResult r = run_pass(spec, params, batch, req);
  return {std::move(r.hessian), std::move(r.gauss_newton)};
}

std::string to_string(Architecture a) {
  switch (a) {
    case Architecture::MLP3: return "mlp3";
    case Architecture::CNN3: return "cnn3";
    case Architecture::Linear: return "linear";
  }
  return "?";
}

std::string to_string(Activation a) { return a == Activation::ReLU ? "relu" : "tanh"; }

std::string to_string(LossKind l) { return l == LossKind::MSE ? "mse" : "ce"; }

Architecture parse_architecture(const std::string& s) {
  if (s == "mlp3" || s == "mlp") return Architecture::MLP3;
  if (s == "cnn3" || s == "cnn") return Architecture::CNN3;
  if (s == "linear") return Architecture::Linear;
  throw ConfigError("unknown architecture '" + s + "'");
}

Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::ReLU;
  if (s == "tanh") return Activation::Tanh;
  throw ConfigError("unknown activation '" + s + "'");
}

LossKind parse_loss(const std::string& s) {
  if (s == "mse") return LossKind::MSE;
  if (s == "ce" || s == "cross_entropy") return LossKind::CrossEntropy;
  throw ConfigError("unknown loss '" + s + "'");
}

}  // namespace curvlab
