#pragma once

#include <string>
#include <vector>

#include "cassensing/nn/conv.hpp"
#include "cassensing/nn/layers.hpp"
#include "json.hpp"

namespace cas {

// Grid U-Net used as the noise predictor. Each level holds `blocks_per_level`
// blocks of conv3x3 -> + timestep projection -> GroupNorm -> GELU; levels are
// joined by 2x2 average pooling on the way down and nearest-neighbour
// upsampling plus skip concatenation on the way up.
struct UNetArchitecture {
  int channels = 1;        // residual channels m; the input carries 2m (d_t and the condition)
  std::vector<int> widths{32, 64, 128};
  int blocks_per_level = 2;
  int time_embed_dim = 64;  // sinusoidal features; the hidden time MLP is 4 * widths[0] wide
  int max_groups = 8;

  void validate() const;
  int levels() const { return static_cast<int>(widths.size()); }
  int input_channels() const { return 2 * channels; }
  int time_hidden() const { return 4 * widths.front(); }
  // Grid sides must be divisible by this.
  int grid_multiple() const { return 1 << (levels() - 1); }
  nlohmann::json to_json() const;
  static UNetArchitecture from_json(const nlohmann::json& j);
};

// Sinusoidal embedding of an integer step: [sin(t f_k), cos(t f_k)] with
// f_k = 10000^(-k / (dim/2)).
template <class T>
nn::RowVector<T> timestep_embedding(int t, int dim);

template <class T>
class UNetBlock {
 public:
  using Scalar = T;

  struct Cache {
    typename nn::Conv2d<T>::Cache conv;
    typename nn::GroupNorm<T>::Cache norm;
    nn::Matrix<T> pre_act;
  };

  UNetBlock() = default;
  UNetBlock(int in, int out, int time_dim, int groups);
  void init(Rng& rng);

  nn::Matrix<T> forward(const nn::Matrix<T>& x, int h, int w, const nn::Matrix<T>& temb, Cache* cache) const;
  // Adds the block's contribution to dtemb.
  nn::Matrix<T> backward(const Cache& cache, const nn::Matrix<T>& dy, const nn::Matrix<T>& temb, UNetBlock* grad,
                         nn::Matrix<T>& dtemb, bool want_input_grad) const;

  template <class Out>
  void params(Out& out, const std::string& prefix) {
    conv_.params(out, prefix + "conv.");
    time_.params(out, prefix + "time.");
    norm_.params(out, prefix + "norm.");
  }
  template <class Out>
  void params(Out& out, const std::string& prefix) const {
    conv_.params(out, prefix + "conv.");
    time_.params(out, prefix + "time.");
    norm_.params(out, prefix + "norm.");
  }

 private:
  nn::Conv2d<T> conv_;
  nn::Linear<T> time_;
  nn::GroupNorm<T> norm_;
};

template <class T>
class UNet {
 public:
  using Scalar = T;

  struct Cache {
    int h = 0;
    int w = 0;
    nn::Matrix<T> temb;
    typename nn::Mlp<T>::Cache time;
    std::vector<std::vector<typename UNetBlock<T>::Cache>> down;
    std::vector<std::vector<typename UNetBlock<T>::Cache>> up;
    typename nn::Conv2d<T>::Cache out;
  };

  UNet() = default;
  UNet(const UNetArchitecture& arch, std::uint64_t seed);

  const UNetArchitecture& architecture() const { return arch_; }

  // x: (2m, h*w) channel-major, rows [d_t channels..., condition channels...].
  // Returns the predicted noise, (m, h*w).
  nn::Matrix<T> forward(const nn::Matrix<T>& x, int h, int w, int t, Cache* cache = nullptr) const;

  // Accumulates parameter gradients into grad (when non-null); returns dL/dx
  // when want_input_grad is set.
  nn::Matrix<T> backward(const Cache& cache, const nn::Matrix<T>& dy, UNet* grad, bool want_input_grad) const;

  template <class Out>
  void params(Out& out, const std::string& prefix) {
    params_impl(*this, out, prefix);
  }
  template <class Out>
  void params(Out& out, const std::string& prefix) const {
    params_impl(*this, out, prefix);
  }

 private:
  template <class Self, class Out>
  static void params_impl(Self& self, Out& out, const std::string& prefix) {
    self.time_mlp_.params(out, prefix + "time_mlp.");
    for (std::size_t l = 0; l < self.down_.size(); ++l) {
      for (std::size_t b = 0; b < self.down_[l].size(); ++b) {
        self.down_[l][b].params(out, prefix + "down" + std::to_string(l) + ".block" + std::to_string(b) + ".");
      }
    }
    for (std::size_t l = 0; l < self.up_.size(); ++l) {
      for (std::size_t b = 0; b < self.up_[l].size(); ++b) {
        self.up_[l][b].params(out, prefix + "up" + std::to_string(l) + ".block" + std::to_string(b) + ".");
      }
    }
    self.out_.params(out, prefix + "out.");
  }

  UNetArchitecture arch_;
  nn::Mlp<T> time_mlp_;
  std::vector<std::vector<UNetBlock<T>>> down_;
  std::vector<std::vector<UNetBlock<T>>> up_;  // up_[l] runs at level l, l = 0..levels-2
  nn::Conv2d<T> out_;
};

}  // namespace cas
