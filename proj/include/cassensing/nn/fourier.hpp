#pragma once

#include <cmath>
#include <numbers>
#include <string>

#include "cassensing/error.hpp"
#include "cassensing/nn/module.hpp"

namespace cas::nn {

// Random Fourier features: x -> [cos(2 pi B x), sin(2 pi B x), x].
// B is n_f x d with N(0, scale^2) entries, drawn once and kept fixed.
template <class T>
class FourierFeatures {
 public:
  using Scalar = T;

  FourierFeatures() = default;
  FourierFeatures(int frequencies, int dim) : b_(Matrix<T>::Zero(frequencies, dim)) {
    if (frequencies < 1 || dim < 1) {
      throw ParameterError("Fourier feature map needs positive frequency count and dimension");
    }
  }

  void init(double scale, Rng& rng) { fill_normal(as_span(b_), scale, rng); }

  int frequencies() const { return static_cast<int>(b_.rows()); }
  int dim() const { return static_cast<int>(b_.cols()); }
  int out_features() const { return 2 * frequencies() + dim(); }
  Matrix<T>& frequency_matrix() { return b_; }
  const Matrix<T>& frequency_matrix() const { return b_; }

  // x: N x d, row per point.
  Matrix<T> forward(const Matrix<T>& x) const {
    if (x.cols() != b_.cols()) {
      throw ShapeError("Fourier features expect " + std::to_string(b_.cols()) + "-dimensional coordinates, got " +
                       std::to_string(x.cols()));
    }
    const int nf = frequencies();
    Matrix<T> angle = (T(2.0 * std::numbers::pi) * x) * b_.transpose();
    Matrix<T> out(x.rows(), out_features());
    out.leftCols(nf).array() = angle.array().cos();
    out.middleCols(nf, nf).array() = angle.array().sin();
    out.rightCols(dim()) = x;
    return out;
  }

  // B is persisted with the model but never trained.
  template <class Out>
  void params(Out& out, const std::string& prefix) {
    out.push_back({prefix + "B", {frequencies(), dim()}, as_span(b_), false});
  }
  template <class Out>
  void params(Out& out, const std::string& prefix) const {
    out.push_back({prefix + "B", {frequencies(), dim()}, as_span(b_), false});
  }

 private:
  Matrix<T> b_;
};

}  // namespace cas::nn
