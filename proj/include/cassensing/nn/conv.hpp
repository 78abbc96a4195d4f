#pragma once

#include <cmath>
#include <string>

#include "cassensing/error.hpp"
#include "cassensing/nn/module.hpp"

// Grid feature maps are stored channel-major: a (C, H*W) row-major matrix,
// one row per channel, pixels in row-major lattice order.
namespace cas::nn {

// k x k patches (zero padded, stride 1, k odd) as columns: (C*k*k, H*W).
template <class T>
Matrix<T> im2col(const Matrix<T>& x, int h, int w, int k) {
  const int c = static_cast<int>(x.rows());
  const int r = k / 2;
  Matrix<T> cols = Matrix<T>::Zero(static_cast<Eigen::Index>(c) * k * k, static_cast<Eigen::Index>(h) * w);
  for (int ch = 0; ch < c; ++ch) {
    const T* src = x.row(ch).data();
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* dst = cols.row((static_cast<Eigen::Index>(ch) * k + ky) * k + kx).data();
        const int dy = ky - r;
        const int dx = kx - r;
        for (int y = std::max(0, -dy); y < std::min(h, h - dy); ++y) {
          const T* s = src + static_cast<std::ptrdiff_t>(y + dy) * w;
          T* d = dst + static_cast<std::ptrdiff_t>(y) * w;
          for (int xx = std::max(0, -dx); xx < std::min(w, w - dx); ++xx) {
            d[xx] = s[xx + dx];
          }
        }
      }
    }
  }
  return cols;
}

// Adjoint of im2col.
template <class T>
Matrix<T> col2im(const Matrix<T>& cols, int c, int h, int w, int k) {
  const int r = k / 2;
  Matrix<T> x = Matrix<T>::Zero(c, static_cast<Eigen::Index>(h) * w);
  for (int ch = 0; ch < c; ++ch) {
    T* dst = x.row(ch).data();
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* src = cols.row((static_cast<Eigen::Index>(ch) * k + ky) * k + kx).data();
        const int dy = ky - r;
        const int dx = kx - r;
        for (int y = std::max(0, -dy); y < std::min(h, h - dy); ++y) {
          T* d = dst + static_cast<std::ptrdiff_t>(y + dy) * w;
          const T* s = src + static_cast<std::ptrdiff_t>(y) * w;
          for (int xx = std::max(0, -dx); xx < std::min(w, w - dx); ++xx) {
            d[xx + dx] += s[xx];
          }
        }
      }
    }
  }
  return x;
}

template <class T>
class Conv2d {
 public:
  using Scalar = T;

  struct Cache {
    Matrix<T> cols;
    int h = 0;
    int w = 0;
  };

  Conv2d() = default;
  Conv2d(int in, int out, int kernel) : in_(in), kernel_(kernel) {
    if (in < 1 || out < 1 || kernel < 1 || kernel % 2 == 0) {
      throw ParameterError("convolution needs positive channel counts and an odd kernel size");
    }
    weight_ = Matrix<T>::Zero(out, static_cast<Eigen::Index>(in) * kernel * kernel);
    bias_ = RowVector<T>::Zero(out);
  }

  int in_channels() const { return in_; }
  int out_channels() const { return static_cast<int>(weight_.rows()); }
  Matrix<T>& weight() { return weight_; }
  RowVector<T>& bias() { return bias_; }

  void init(Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(weight_.cols()));
    fill_uniform(as_span(weight_), bound, rng);
    fill_uniform(as_span(bias_), bound, rng);
  }

  Matrix<T> forward(const Matrix<T>& x, int h, int w, Cache* cache) const {
    if (x.rows() != in_ || x.cols() != static_cast<Eigen::Index>(h) * w) {
      throw ShapeError("convolution expects " + std::to_string(in_) + " channels on a " + std::to_string(h) + "x" +
                       std::to_string(w) + " grid");
    }
    Matrix<T> cols = im2col(x, h, w, kernel_);
    Matrix<T> y = weight_ * cols;
    y.colwise() += bias_.transpose();
    if (cache != nullptr) {
      cache->cols = std::move(cols);
      cache->h = h;
      cache->w = w;
    }
    return y;
  }

  Matrix<T> backward(const Cache& cache, const Matrix<T>& dy, Conv2d* grad, bool want_input_grad) const {
    if (grad != nullptr) {
      grad->weight_.noalias() += dy * cache.cols.transpose();
      grad->bias_ += dy.rowwise().sum().transpose();
    }
    if (!want_input_grad) {
      return {};
    }
    const Matrix<T> dcols = weight_.transpose() * dy;
    return col2im(dcols, in_, cache.h, cache.w, kernel_);
  }

  template <class Out>
  void params(Out& out, const std::string& prefix) {
    out.push_back({prefix + "weight", {out_channels(), in_, kernel_, kernel_}, as_span(weight_), true});
    out.push_back({prefix + "bias", {out_channels()}, as_span(bias_), true});
  }
  template <class Out>
  void params(Out& out, const std::string& prefix) const {
    out.push_back({prefix + "weight", {out_channels(), in_, kernel_, kernel_}, as_span(weight_), true});
    out.push_back({prefix + "bias", {out_channels()}, as_span(bias_), true});
  }

 private:
  int in_ = 0;
  int kernel_ = 3;
  Matrix<T> weight_;
  RowVector<T> bias_;
};

template <class T>
class GroupNorm {
 public:
  using Scalar = T;

  struct Cache {
    Matrix<T> xhat;
    std::vector<T> rstd;
  };

  GroupNorm() = default;
  GroupNorm(int channels, int groups)
      : groups_(groups), gamma_(RowVector<T>::Ones(channels)), beta_(RowVector<T>::Zero(channels)) {
    if (groups < 1 || channels % groups != 0) {
      throw ParameterError("group count must divide the channel count");
    }
  }

  int channels() const { return static_cast<int>(gamma_.size()); }

  Matrix<T> forward(const Matrix<T>& x, Cache* cache) const {
    const Eigen::Index cpg = channels() / groups_;
    const Eigen::Index n = cpg * x.cols();
    Matrix<T> xhat(x.rows(), x.cols());
    std::vector<T> rstd(static_cast<std::size_t>(groups_));
    for (int g = 0; g < groups_; ++g) {
      const auto block = x.middleRows(g * cpg, cpg);
      const double mean = static_cast<double>(block.sum()) / static_cast<double>(n);
      const double var = static_cast<double>((block.array() - T(mean)).square().sum()) / static_cast<double>(n);
      const T rs = T(1.0 / std::sqrt(var + kEps));
      xhat.middleRows(g * cpg, cpg).array() = (block.array() - T(mean)) * rs;
      rstd[static_cast<std::size_t>(g)] = rs;
    }
    Matrix<T> y = xhat;
    for (Eigen::Index c = 0; c < y.rows(); ++c) {
      y.row(c).array() = y.row(c).array() * gamma_(c) + beta_(c);
    }
    if (cache != nullptr) {
      cache->xhat = std::move(xhat);
      cache->rstd = std::move(rstd);
    }
    return y;
  }

  Matrix<T> backward(const Cache& cache, const Matrix<T>& dy, GroupNorm* grad) const {
    const Eigen::Index cpg = channels() / groups_;
    const T n = T(cpg * dy.cols());
    if (grad != nullptr) {
      grad->gamma_ += (dy.array() * cache.xhat.array()).rowwise().sum().matrix().transpose();
      grad->beta_ += dy.rowwise().sum().transpose();
    }
    Matrix<T> dxhat = dy;
    for (Eigen::Index c = 0; c < dy.rows(); ++c) {
      dxhat.row(c) *= gamma_(c);
    }
    Matrix<T> dx(dy.rows(), dy.cols());
    for (int g = 0; g < groups_; ++g) {
      const auto dh = dxhat.middleRows(g * cpg, cpg);
      const auto xh = cache.xhat.middleRows(g * cpg, cpg);
      const T sum_d = dh.sum();
      const T sum_dx = (dh.array() * xh.array()).sum();
      dx.middleRows(g * cpg, cpg).array() =
          (cache.rstd[static_cast<std::size_t>(g)] / n) * (n * dh.array() - sum_d - xh.array() * sum_dx);
    }
    return dx;
  }

  template <class Out>
  void params(Out& out, const std::string& prefix) {
    out.push_back({prefix + "gamma", {channels()}, as_span(gamma_), true});
    out.push_back({prefix + "beta", {channels()}, as_span(beta_), true});
  }
  template <class Out>
  void params(Out& out, const std::string& prefix) const {
    out.push_back({prefix + "gamma", {channels()}, as_span(gamma_), true});
    out.push_back({prefix + "beta", {channels()}, as_span(beta_), true});
  }

 private:
  static constexpr double kEps = 1e-5;
  int groups_ = 1;
  RowVector<T> gamma_;
  RowVector<T> beta_;
};

template <class T>
Matrix<T> avg_pool2(const Matrix<T>& x, int h, int w) {
  const int h2 = h / 2;
  const int w2 = w / 2;
  Matrix<T> y(x.rows(), static_cast<Eigen::Index>(h2) * w2);
  for (Eigen::Index c = 0; c < x.rows(); ++c) {
    const T* s = x.row(c).data();
    T* d = y.row(c).data();
    for (int i = 0; i < h2; ++i) {
      for (int j = 0; j < w2; ++j) {
        const T* p = s + static_cast<std::ptrdiff_t>(2 * i) * w + 2 * j;
        d[i * w2 + j] = T(0.25) * (p[0] + p[1] + p[w] + p[w + 1]);
      }
    }
  }
  return y;
}

template <class T>
Matrix<T> avg_pool2_backward(const Matrix<T>& dy, int h, int w) {
  const int w2 = w / 2;
  Matrix<T> dx(dy.rows(), static_cast<Eigen::Index>(h) * w);
  for (Eigen::Index c = 0; c < dy.rows(); ++c) {
    const T* s = dy.row(c).data();
    T* d = dx.row(c).data();
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        d[i * w + j] = T(0.25) * s[(i / 2) * w2 + j / 2];
      }
    }
  }
  return dx;
}

// Nearest-neighbour x2 upsampling from an (h, w) map.
template <class T>
Matrix<T> upsample2(const Matrix<T>& x, int h, int w) {
  const int w2 = 2 * w;
  Matrix<T> y(x.rows(), static_cast<Eigen::Index>(4) * h * w);
  for (Eigen::Index c = 0; c < x.rows(); ++c) {
    const T* s = x.row(c).data();
    T* d = y.row(c).data();
    for (int i = 0; i < 2 * h; ++i) {
      for (int j = 0; j < w2; ++j) {
        d[i * w2 + j] = s[(i / 2) * w + j / 2];
      }
    }
  }
  return y;
}

template <class T>
Matrix<T> upsample2_backward(const Matrix<T>& dy, int h, int w) {
  const int w2 = 2 * w;
  Matrix<T> dx = Matrix<T>::Zero(dy.rows(), static_cast<Eigen::Index>(h) * w);
  for (Eigen::Index c = 0; c < dy.rows(); ++c) {
    const T* s = dy.row(c).data();
    T* d = dx.row(c).data();
    for (int i = 0; i < 2 * h; ++i) {
      for (int j = 0; j < w2; ++j) {
        d[(i / 2) * w + j / 2] += s[i * w2 + j];
      }
    }
  }
  return dx;
}

}  // namespace cas::nn
