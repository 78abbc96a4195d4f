#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <unsupported/Eigen/SpecialFunctions>
#include <vector>

#include "cassensing/error.hpp"
#include "cassensing/nn/module.hpp"

namespace cas::nn {

// Exact GELU, x * Phi(x).
template <class T>
Matrix<T> gelu(const Matrix<T>& x) {
  const T inv_sqrt2 = T(1.0 / std::numbers::sqrt2);
  Matrix<T> y(x.rows(), x.cols());
  y.array() = x.array() * (T(0.5) * (T(1) + (x.array() * inv_sqrt2).erf()));
  return y;
}

// d/dx GELU(x) = Phi(x) + x phi(x).
template <class T>
Matrix<T> gelu_grad(const Matrix<T>& x) {
  const T inv_sqrt2 = T(1.0 / std::numbers::sqrt2);
  const T inv_sqrt_2pi = T(1.0 / std::sqrt(2.0 * std::numbers::pi));
  Matrix<T> g(x.rows(), x.cols());
  g.array() = T(0.5) * (T(1) + (x.array() * inv_sqrt2).erf()) +
              x.array() * inv_sqrt_2pi * (T(-0.5) * x.array().square()).exp();
  return g;
}

// Affine map on row-batched inputs: Y = X W^T + b, W is out x in.
template <class T>
class Linear {
 public:
  using Scalar = T;

  Linear() = default;
  Linear(int in, int out) : weight_(Matrix<T>::Zero(out, in)), bias_(RowVector<T>::Zero(out)) {}

  int in_features() const { return static_cast<int>(weight_.cols()); }
  int out_features() const { return static_cast<int>(weight_.rows()); }

  Matrix<T>& weight() { return weight_; }
  const Matrix<T>& weight() const { return weight_; }
  RowVector<T>& bias() { return bias_; }
  const RowVector<T>& bias() const { return bias_; }

  // PyTorch-style default: U(-1/sqrt(in), 1/sqrt(in)) for weight and bias.
  void init(Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_features()));
    fill_uniform(as_span(weight_), bound, rng);
    fill_uniform(as_span(bias_), bound, rng);
  }

  Matrix<T> forward(const Matrix<T>& x) const {
    if (x.cols() != weight_.cols()) {
      throw ShapeError("linear layer expects " + std::to_string(weight_.cols()) + " input features, got " +
                       std::to_string(x.cols()));
    }
    Matrix<T> y = x * weight_.transpose();
    y.rowwise() += bias_;
    return y;
  }

  // Accumulates parameter gradients into `grad` (when non-null) and returns
  // dL/dX.
  Matrix<T> backward(const Matrix<T>& x, const Matrix<T>& dy, Linear* grad, bool want_input_grad = true) const {
    if (grad != nullptr) {
      grad->weight_.noalias() += dy.transpose() * x;
      grad->bias_ += dy.colwise().sum();
    }
    if (!want_input_grad) {
      return {};
    }
    return dy * weight_;
  }

  template <class Out>
  void params(Out& out, const std::string& prefix) {
    out.push_back({prefix + "weight", {out_features(), in_features()}, as_span(weight_), true});
    out.push_back({prefix + "bias", {out_features()}, as_span(bias_), true});
  }
  template <class Out>
  void params(Out& out, const std::string& prefix) const {
    out.push_back({prefix + "weight", {out_features(), in_features()}, as_span(weight_), true});
    out.push_back({prefix + "bias", {out_features()}, as_span(bias_), true});
  }

 private:
  Matrix<T> weight_;
  RowVector<T> bias_;
};

// Multilayer perceptron: GELU on hidden layers, identity on the output.
template <class T>
class Mlp {
 public:
  using Scalar = T;

  struct Cache {
    std::vector<Matrix<T>> inputs;  // input of each layer
    std::vector<Matrix<T>> pre;     // pre-activation of each hidden layer
  };

  Mlp() = default;

  // widths = {in, hidden..., out}; at least one hidden layer unless
  // allow_no_hidden is set (used for plain affine maps in tests).
  explicit Mlp(const std::vector<int>& widths, bool allow_no_hidden = false) : widths_(widths) {
    if (widths.size() < 2 || (!allow_no_hidden && widths.size() < 3)) {
      throw ParameterError("MLP needs an input width, at least one hidden layer and an output width");
    }
    for (int w : widths) {
      if (w < 1) {
        throw ParameterError("MLP layer widths must be positive");
      }
    }
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
      layers_.emplace_back(widths[i], widths[i + 1]);
    }
  }

  void init(Rng& rng) {
    for (auto& l : layers_) {
      l.init(rng);
    }
  }

  const std::vector<int>& widths() const { return widths_; }
  int in_features() const { return widths_.front(); }
  int out_features() const { return widths_.back(); }
  std::vector<Linear<T>>& layers() { return layers_; }
  const std::vector<Linear<T>>& layers() const { return layers_; }

  Matrix<T> forward(const Matrix<T>& x, Cache* cache = nullptr) const {
    if (x.cols() != in_features()) {
      throw ShapeError("MLP expects " + std::to_string(in_features()) + " input features, got " +
                       std::to_string(x.cols()));
    }
    if (cache != nullptr) {
      cache->inputs.clear();
      cache->pre.clear();
    }
    Matrix<T> h = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      Matrix<T> z = layers_[i].forward(h);
      if (cache != nullptr) {
        cache->inputs.push_back(std::move(h));
      }
      if (i + 1 == layers_.size()) {
        return z;
      }
      h = gelu(z);
      if (cache != nullptr) {
        cache->pre.push_back(std::move(z));
      }
    }
    return h;
  }

  // Same map evaluated one row at a time, so each output row depends only on
  // its own input row (bit-for-bit, whatever else is in the batch).
  Matrix<T> forward_rows(const Matrix<T>& x) const {
    if (x.cols() != in_features()) {
      throw ShapeError("MLP expects " + std::to_string(in_features()) + " input features, got " +
                       std::to_string(x.cols()));
    }
    Matrix<T> out(x.rows(), out_features());
    Matrix<T> h;
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      h = x.row(r);
      for (std::size_t i = 0; i < layers_.size(); ++i) {
        Matrix<T> z = layers_[i].forward(h);
        h = i + 1 == layers_.size() ? std::move(z) : gelu(z);
      }
      out.row(r) = h;
    }
    return out;
  }

  Matrix<T> backward(const Cache& cache, const Matrix<T>& dy, Mlp* grad, bool want_input_grad = true) const {
    Matrix<T> d = dy;
    for (std::size_t k = layers_.size(); k-- > 0;) {
      if (k + 1 < layers_.size()) {
        d.array() *= gelu_grad(cache.pre[k]).array();
      }
      Linear<T>* g = grad != nullptr ? &grad->layers_[k] : nullptr;
      const bool need_dx = k > 0 || want_input_grad;
      d = layers_[k].backward(cache.inputs[k], d, g, need_dx);
    }
    return d;
  }

  template <class Out>
  void params(Out& out, const std::string& prefix) {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      layers_[i].params(out, prefix + "layer" + std::to_string(i) + ".");
    }
  }
  template <class Out>
  void params(Out& out, const std::string& prefix) const {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      layers_[i].params(out, prefix + "layer" + std::to_string(i) + ".");
    }
  }

 private:
  std::vector<int> widths_;
  std::vector<Linear<T>> layers_;
};

}  // namespace cas::nn
