#include "network.hpp"

#include <cmath>
#include <limits>

#include "curvlab/errors.hpp"

namespace curvlab::detail {

namespace {

using ConstMap = Eigen::Map<const Eigen::MatrixXd>;
using MutMap = Eigen::Map<Eigen::MatrixXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;
using MutVecMap = Eigen::Map<Eigen::VectorXd>;

// An empty matrix stands for an identically-zero R-activation (network input).
bool is_zero(const Matrix& m) { return m.size() == 0; }

void fill_uniform(std::mt19937_64& rng, double* w, std::size_t count, double half_width) {
  std::uniform_real_distribution<double> dist(-half_width, half_width);
  for (std::size_t i = 0; i < count; ++i) w[i] = dist(rng);
}

class Dense final : public Layer {
 public:
  Dense(int in, int out, bool bias) : in_(in), out_(out), bias_(bias) {}

  std::size_t param_count() const override {
    return static_cast<std::size_t>(in_) * out_ + (bias_ ? out_ : 0);
  }
  int out_size() const override { return out_; }

  void init(std::mt19937_64& rng, double* w) const override {
    fill_uniform(rng, w, param_count(), 1.0 / std::sqrt(static_cast<double>(in_)));
  }

  void forward(const double* w, const Matrix& x, Matrix& y, LayerCache&) const override {
    y.noalias() = weights(w) * x;
    if (bias_) y.colwise() += bias(w);
  }

  void rforward(const double* w, const double* vw, const Matrix& x, const Matrix& rx,
                const Matrix&, Matrix& ry, const LayerCache&) const override {
    ry.noalias() = weights(vw) * x;
    if (!is_zero(rx)) ry.noalias() += weights(w) * rx;
    if (bias_) ry.colwise() += bias(vw);
  }

  void backward(const double* w, const Matrix& x, const Matrix&, const Matrix& dy, Matrix* dx,
                double* grad, const LayerCache&) const override {
    if (grad != nullptr) {
      MutMap gw(grad, out_, in_);
      gw.noalias() += dy * x.transpose();
      if (bias_) MutVecMap(grad + out_ * in_, out_) += dy.rowwise().sum();
    }
    if (dx != nullptr) dx->noalias() = weights(w).transpose() * dy;
  }

  void rbackward(const double* w, const double* vw, const Matrix& x, const Matrix& rx,
                 const Matrix&, const Matrix& dy, const Matrix& rdy, Matrix* rdx, double* rgrad,
                 const LayerCache&) const override {
    if (rgrad != nullptr) {
      MutMap gw(rgrad, out_, in_);
      gw.noalias() += rdy * x.transpose();
      if (!is_zero(rx)) gw.noalias() += dy * rx.transpose();
      if (bias_) MutVecMap(rgrad + out_ * in_, out_) += rdy.rowwise().sum();
    }
    if (rdx != nullptr) {
      rdx->noalias() = weights(w).transpose() * rdy;
      rdx->noalias() += weights(vw).transpose() * dy;
    }
  }

 private:
  ConstMap weights(const double* w) const { return ConstMap(w, out_, in_); }
  ConstVecMap bias(const double* w) const { return ConstVecMap(w + out_ * in_, out_); }

  int in_;
  int out_;
  bool bias_;
};

class Pointwise final : public Layer {
 public:
  Pointwise(Activation act, int size) : act_(act), size_(size) {}

  int out_size() const override { return size_; }

  void forward(const double*, const Matrix& x, Matrix& y, LayerCache&) const override {
    if (act_ == Activation::ReLU) {
      y = x.cwiseMax(0.0);
    } else {
      y = x.array().tanh().matrix();
    }
  }

  void rforward(const double*, const double*, const Matrix& x, const Matrix& rx, const Matrix& y,
                Matrix& ry, const LayerCache&) const override {
    if (is_zero(rx)) {
      ry.setZero(x.rows(), x.cols());
      return;
    }
    ry = (first_derivative(x, y).array() * rx.array()).matrix();
  }

  void backward(const double*, const Matrix& x, const Matrix& y, const Matrix& dy, Matrix* dx,
                double*, const LayerCache&) const override {
    if (dx != nullptr) *dx = (first_derivative(x, y).array() * dy.array()).matrix();
  }

  void rbackward(const double*, const double*, const Matrix& x, const Matrix& rx, const Matrix& y,
                 const Matrix& dy, const Matrix& rdy, Matrix* rdx, double*,
                 const LayerCache&) const override {
    if (rdx == nullptr) return;
    *rdx = (first_derivative(x, y).array() * rdy.array()).matrix();
    // ReLU has zero curvature everywhere.
    if (act_ == Activation::Tanh && !is_zero(rx)) {
      const auto t = y.array();
      rdx->array() += (-2.0 * t * (1.0 - t * t)) * rx.array() * dy.array();
    }
  }

 private:
  // sigma'(z); for ReLU sigma'(0) = 0.
  Matrix first_derivative(const Matrix& x, const Matrix& y) const {
    if (act_ == Activation::ReLU) return (x.array() > 0.0).cast<double>().matrix();
    return (1.0 - y.array().square()).matrix();
  }

  Activation act_;
  int size_;
};

// 3x3 convolution, stride 1, zero padding 1, CHW layout per example column.
class Conv3x3 final : public Layer {
 public:
  Conv3x3(int in_channels, int height, int width, int out_channels)
      : cin_(in_channels), h_(height), w_(width), cout_(out_channels) {}

  std::size_t param_count() const override {
    return static_cast<std::size_t>(cout_) * patch() + cout_;
  }
  int out_size() const override { return cout_ * h_ * w_; }

  void init(std::mt19937_64& rng, double* w) const override {
    fill_uniform(rng, w, param_count(), 1.0 / std::sqrt(static_cast<double>(patch())));
  }

  void forward(const double* w, const Matrix& x, Matrix& y, LayerCache&) const override {
    const auto n = x.cols();
    y.resize(out_size(), n);
    Matrix cols;
    for (Eigen::Index j = 0; j < n; ++j) {
      im2col(x.col(j).data(), cols);
      MutMap z(y.col(j).data(), pixels(), cout_);
      z.noalias() = cols * kernel(w).transpose();
      z.rowwise() += bias(w).transpose();
    }
  }

  void rforward(const double* w, const double* vw, const Matrix& x, const Matrix& rx,
                const Matrix&, Matrix& ry, const LayerCache&) const override {
    const auto n = x.cols();
    ry.resize(out_size(), n);
    Matrix cols;
    for (Eigen::Index j = 0; j < n; ++j) {
      MutMap rz(ry.col(j).data(), pixels(), cout_);
      im2col(x.col(j).data(), cols);
      rz.noalias() = cols * kernel(vw).transpose();
      if (!is_zero(rx)) {
        im2col(rx.col(j).data(), cols);
        rz.noalias() += cols * kernel(w).transpose();
      }
      rz.rowwise() += bias(vw).transpose();
    }
  }

  void backward(const double* w, const Matrix& x, const Matrix&, const Matrix& dy, Matrix* dx,
                double* grad, const LayerCache&) const override {
    const auto n = x.cols();
    if (dx != nullptr) dx->setZero(x.rows(), n);
    Matrix cols;
    Matrix dcols;
    for (Eigen::Index j = 0; j < n; ++j) {
      ConstMap dz(dy.col(j).data(), pixels(), cout_);
      if (grad != nullptr) {
        im2col(x.col(j).data(), cols);
        MutMap(grad, cout_, patch()).noalias() += dz.transpose() * cols;
        MutVecMap(grad + cout_ * patch(), cout_) += dz.colwise().sum().transpose();
      }
      if (dx != nullptr) {
        dcols.noalias() = dz * kernel(w);
        col2im(dcols, dx->col(j).data());
      }
    }
  }

  void rbackward(const double* w, const double* vw, const Matrix& x, const Matrix& rx,
                 const Matrix&, const Matrix& dy, const Matrix& rdy, Matrix* rdx, double* rgrad,
                 const LayerCache&) const override {
    const auto n = x.cols();
    if (rdx != nullptr) rdx->setZero(x.rows(), n);
    Matrix cols;
    Matrix dcols;
    for (Eigen::Index j = 0; j < n; ++j) {
      ConstMap dz(dy.col(j).data(), pixels(), cout_);
      ConstMap rdz(rdy.col(j).data(), pixels(), cout_);
      if (rgrad != nullptr) {
        MutMap gw(rgrad, cout_, patch());
        im2col(x.col(j).data(), cols);
        gw.noalias() += rdz.transpose() * cols;
        if (!is_zero(rx)) {
          im2col(rx.col(j).data(), cols);
          gw.noalias() += dz.transpose() * cols;
        }
        MutVecMap(rgrad + cout_ * patch(), cout_) += rdz.colwise().sum().transpose();
      }
      if (rdx != nullptr) {
        dcols.noalias() = rdz * kernel(w);
        dcols.noalias() += dz * kernel(vw);
        col2im(dcols, rdx->col(j).data());
      }
    }
  }

 private:
  int patch() const { return cin_ * 9; }
  int pixels() const { return h_ * w_; }
  ConstMap kernel(const double* w) const { return ConstMap(w, cout_, patch()); }
  ConstVecMap bias(const double* w) const { return ConstVecMap(w + cout_ * patch(), cout_); }

  // cols(pixel, c*9 + ky*3 + kx) = x[c, py + ky - 1, px + kx - 1] (zero outside).
  void im2col(const double* x, Matrix& cols) const {
    cols.setZero(pixels(), patch());
    for (int c = 0; c < cin_; ++c) {
      for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
          double* out = cols.col(c * 9 + ky * 3 + kx).data();
          for (int py = 0; py < h_; ++py) {
            const int sy = py + ky - 1;
            if (sy < 0 || sy >= h_) continue;
            for (int px = 0; px < w_; ++px) {
              const int sx = px + kx - 1;
              if (sx < 0 || sx >= w_) continue;
              out[py * w_ + px] = x[(c * h_ + sy) * w_ + sx];
            }
          }
        }
      }
    }
  }

  // Adjoint of im2col: scatter-add patches back onto the image.
  void col2im(const Matrix& cols, double* x) const {
    for (int c = 0; c < cin_; ++c) {
      for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
          const double* in = cols.col(c * 9 + ky * 3 + kx).data();
          for (int py = 0; py < h_; ++py) {
            const int sy = py + ky - 1;
            if (sy < 0 || sy >= h_) continue;
            for (int px = 0; px < w_; ++px) {
              const int sx = px + kx - 1;
              if (sx < 0 || sx >= w_) continue;
              x[(c * h_ + sy) * w_ + sx] += in[py * w_ + px];
            }
          }
        }
      }
    }
  }

  int cin_;
  int h_;
  int w_;
  int cout_;
};

// 2x2 max pooling, stride 2, floor on odd sizes. Ties route to the first
// element in row-major window order.
class MaxPool2 final : public Layer {
 public:
  MaxPool2(int channels, int height, int width) : c_(channels), h_(height), w_(width) {}

  int out_size() const override { return c_ * (h_ / 2) * (w_ / 2); }

  void forward(const double*, const Matrix& x, Matrix& y, LayerCache& cache) const override {
    const auto n = x.cols();
    const int oh = h_ / 2;
    const int ow = w_ / 2;
    y.resize(out_size(), n);
    cache.argmax.resize(static_cast<std::size_t>(out_size()) * n);
    for (Eigen::Index j = 0; j < n; ++j) {
      const double* in = x.col(j).data();
      for (int c = 0; c < c_; ++c) {
        for (int oy = 0; oy < oh; ++oy) {
          for (int ox = 0; ox < ow; ++ox) {
            int best = (c * h_ + 2 * oy) * w_ + 2 * ox;
            for (int dy = 0; dy < 2; ++dy) {
              for (int dx = 0; dx < 2; ++dx) {
                const int idx = (c * h_ + 2 * oy + dy) * w_ + 2 * ox + dx;
                if (in[idx] > in[best]) best = idx;
              }
            }
            const int o = (c * oh + oy) * ow + ox;
            y(o, j) = in[best];
            cache.argmax[static_cast<std::size_t>(j) * out_size() + o] = best;
          }
        }
      }
    }
  }

  void rforward(const double*, const double*, const Matrix& x, const Matrix& rx, const Matrix&,
                Matrix& ry, const LayerCache& cache) const override {
    const auto n = x.cols();
    ry.setZero(out_size(), n);
    if (is_zero(rx)) return;
    for (Eigen::Index j = 0; j < n; ++j) {
      for (int o = 0; o < out_size(); ++o) {
        ry(o, j) = rx(route(cache, j, o), j);
      }
    }
  }

  void backward(const double*, const Matrix& x, const Matrix&, const Matrix& dy, Matrix* dx,
                double*, const LayerCache& cache) const override {
    if (dx != nullptr) scatter(x, dy, *dx, cache);
  }

  void rbackward(const double*, const double*, const Matrix& x, const Matrix&, const Matrix&,
                 const Matrix&, const Matrix& rdy, Matrix* rdx, double*,
                 const LayerCache& cache) const override {
    if (rdx != nullptr) scatter(x, rdy, *rdx, cache);
  }

 private:
  int route(const LayerCache& cache, Eigen::Index j, int o) const {
    return cache.argmax[static_cast<std::size_t>(j) * out_size() + o];
  }

  void scatter(const Matrix& x, const Matrix& dy, Matrix& dx, const LayerCache& cache) const {
    dx.setZero(x.rows(), x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      for (int o = 0; o < out_size(); ++o) dx(route(cache, j, o), j) += dy(o, j);
    }
  }

  int c_;
  int h_;
  int w_;
};

}  // namespace

Network::Network(const ModelSpec& spec) : spec_(spec) {
  spec.validate();
  const int in = spec.input_shape.size();
  const int k = spec.num_classes;
  switch (spec.architecture) {
    case Architecture::MLP3:
      layers_.push_back(std::make_unique<Dense>(in, spec.hidden, true));
      layers_.push_back(std::make_unique<Pointwise>(spec.activation, spec.hidden));
      layers_.push_back(std::make_unique<Dense>(spec.hidden, spec.hidden, true));
      layers_.push_back(std::make_unique<Pointwise>(spec.activation, spec.hidden));
      layers_.push_back(std::make_unique<Dense>(spec.hidden, k, true));
      break;
    case Architecture::CNN3: {
      int c = spec.input_shape.channels;
      int h = spec.input_shape.height;
      int w = spec.input_shape.width;
      for (int i = 0; i < 3; ++i) {
        layers_.push_back(std::make_unique<Conv3x3>(c, h, w, spec.channels));
        c = spec.channels;
        layers_.push_back(std::make_unique<Pointwise>(spec.activation, c * h * w));
        layers_.push_back(std::make_unique<MaxPool2>(c, h, w));
        h /= 2;
        w /= 2;
      }
      layers_.push_back(std::make_unique<Dense>(c * h * w, k, true));
      break;
    }
    case Architecture::Linear:
      layers_.push_back(std::make_unique<Dense>(in, k, false));
      break;
  }
  for (auto& layer : layers_) {
    layer->offset = param_count_;
    param_count_ += layer->param_count();
  }
}

void Network::init(double* params, std::uint64_t seed) const {
  std::mt19937_64 rng(seed);
  for (const auto& layer : layers_) layer->init(rng, params + layer->offset);
}

void Network::forward(const double* params, const Matrix& x, Trace& trace) const {
  const std::size_t n_layers = layers_.size();
  trace.acts.resize(n_layers + 1);
  trace.caches.resize(n_layers);
  trace.acts[0] = x;
  for (std::size_t i = 0; i < n_layers; ++i) {
    const auto& layer = *layers_[i];
    layer.forward(params + layer.offset, trace.acts[i], trace.acts[i + 1], trace.caches[i]);
  }
}

void Network::rforward(const double* params, const double* v, const Trace& trace,
                       std::vector<Matrix>& racts) const {
  const std::size_t n_layers = layers_.size();
  racts.resize(n_layers + 1);
  racts[0].resize(0, 0);
  for (std::size_t i = 0; i < n_layers; ++i) {
    const auto& layer = *layers_[i];
    layer.rforward(params + layer.offset, v + layer.offset, trace.acts[i], racts[i],
                   trace.acts[i + 1], racts[i + 1], trace.caches[i]);
  }
}

void Network::backward(const double* params, const Trace& trace, const Matrix& d_out,
                       double* grad) const {
  Matrix dy = d_out;
  Matrix dx;
  for (std::size_t i = layers_.size(); i-- > 0;) {
    const auto& layer = *layers_[i];
    Matrix* dx_ptr = i > 0 ? &dx : nullptr;
    layer.backward(params + layer.offset, trace.acts[i], trace.acts[i + 1], dy, dx_ptr,
                   grad + layer.offset, trace.caches[i]);
    if (i > 0) std::swap(dy, dx);
  }
}

void Network::rbackward(const double* params, const double* v, const Trace& trace,
                        const std::vector<Matrix>& racts, const Matrix& d_out,
                        const Matrix& rd_out, double* rgrad) const {
  Matrix dy = d_out;
  Matrix rdy = rd_out;
  Matrix dx;
  Matrix rdx;
  for (std::size_t i = layers_.size(); i-- > 0;) {
    const auto& layer = *layers_[i];
    const double* w = params + layer.offset;
    const bool propagate = i > 0;
    // R{dx} needs dy of this layer, so it is computed before dy is advanced.
    layer.rbackward(w, v + layer.offset, trace.acts[i], racts[i], trace.acts[i + 1], dy, rdy,
                    propagate ? &rdx : nullptr, rgrad + layer.offset, trace.caches[i]);
    if (propagate) {
      layer.backward(w, trace.acts[i], trace.acts[i + 1], dy, &dx, nullptr, trace.caches[i]);
      std::swap(dy, dx);
      std::swap(rdy, rdx);
    }
  }
}

}  // namespace curvlab::detail
