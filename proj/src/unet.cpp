#include "cassensing/unet.hpp"

#include <cmath>
#include <numeric>

#include "cassensing/error.hpp"
#include "cassensing/rng.hpp"

namespace cas {

using nlohmann::json;
using nn::Matrix;

namespace {

int group_count(int channels, int max_groups) {
  for (int g = std::min(channels, max_groups); g > 1; --g) {
    if (channels % g == 0) {
      return g;
    }
  }
  return 1;
}

}  // namespace

void UNetArchitecture::validate() const {
  if (channels < 1 || widths.empty() || blocks_per_level < 1 || time_embed_dim < 2 || time_embed_dim % 2 != 0 ||
      max_groups < 1) {
    throw ParameterError("invalid U-Net architecture");
  }
  for (int w : widths) {
    if (w < 1) {
      throw ParameterError("U-Net widths must be positive");
    }
  }
}

json UNetArchitecture::to_json() const {
  return json{{"channels", channels},
              {"widths", widths},
              {"blocks_per_level", blocks_per_level},
              {"time_embed_dim", time_embed_dim},
              {"max_groups", max_groups}};
}

UNetArchitecture UNetArchitecture::from_json(const json& j) {
  UNetArchitecture a;
  a.channels = j.at("channels").get<int>();
  a.widths = j.at("widths").get<std::vector<int>>();
  a.blocks_per_level = j.at("blocks_per_level").get<int>();
  a.time_embed_dim = j.at("time_embed_dim").get<int>();
  a.max_groups = j.at("max_groups").get<int>();
  a.validate();
  return a;
}

template <class T>
nn::RowVector<T> timestep_embedding(int t, int dim) {
  const int half = dim / 2;
  nn::RowVector<T> e(dim);
  for (int k = 0; k < half; ++k) {
    const double f = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
    e(k) = static_cast<T>(std::sin(t * f));
    e(half + k) = static_cast<T>(std::cos(t * f));
  }
  return e;
}

template <class T>
UNetBlock<T>::UNetBlock(int in, int out, int time_dim, int groups)
    : conv_(in, out, 3), time_(time_dim, out), norm_(out, groups) {}

template <class T>
void UNetBlock<T>::init(Rng& rng) {
  conv_.init(rng);
  time_.init(rng);
}

template <class T>
Matrix<T> UNetBlock<T>::forward(const Matrix<T>& x, int h, int w, const Matrix<T>& temb, Cache* cache) const {
  Matrix<T> a = conv_.forward(x, h, w, cache != nullptr ? &cache->conv : nullptr);
  const Matrix<T> proj = time_.forward(temb);
  a.colwise() += proj.row(0).transpose();
  Matrix<T> z = norm_.forward(a, cache != nullptr ? &cache->norm : nullptr);
  Matrix<T> y = nn::gelu(z);
  if (cache != nullptr) {
    cache->pre_act = std::move(z);
  }
  return y;
}

template <class T>
Matrix<T> UNetBlock<T>::backward(const Cache& cache, const Matrix<T>& dy, const Matrix<T>& temb, UNetBlock* grad,
                                 Matrix<T>& dtemb, bool want_input_grad) const {
  Matrix<T> dz = dy;
  dz.array() *= nn::gelu_grad(cache.pre_act).array();
  const Matrix<T> da = norm_.backward(cache.norm, dz, grad != nullptr ? &grad->norm_ : nullptr);
  const Matrix<T> dproj = da.rowwise().sum().transpose();
  dtemb += time_.backward(temb, dproj, grad != nullptr ? &grad->time_ : nullptr, true);
  return conv_.backward(cache.conv, da, grad != nullptr ? &grad->conv_ : nullptr, want_input_grad);
}

template <class T>
UNet<T>::UNet(const UNetArchitecture& arch, std::uint64_t seed)
    : arch_(arch),
      time_mlp_({arch.time_embed_dim, arch.time_hidden(), arch.time_hidden()}),
      out_(arch.widths.front(), arch.channels, 3) {
  arch.validate();
  const int levels = arch.levels();
  const int td = arch.time_hidden();
  down_.resize(static_cast<std::size_t>(levels));
  for (int l = 0; l < levels; ++l) {
    const int w = arch.widths[static_cast<std::size_t>(l)];
    int in = l == 0 ? arch.input_channels() : arch.widths[static_cast<std::size_t>(l - 1)];
    for (int b = 0; b < arch.blocks_per_level; ++b) {
      down_[static_cast<std::size_t>(l)].emplace_back(in, w, td, group_count(w, arch.max_groups));
      in = w;
    }
  }
  up_.resize(static_cast<std::size_t>(levels - 1));
  for (int l = 0; l + 1 < levels; ++l) {
    const int w = arch.widths[static_cast<std::size_t>(l)];
    int in = arch.widths[static_cast<std::size_t>(l + 1)] + w;
    for (int b = 0; b < arch.blocks_per_level; ++b) {
      up_[static_cast<std::size_t>(l)].emplace_back(in, w, td, group_count(w, arch.max_groups));
      in = w;
    }
  }
  Rng rng(derive_seed(seed, {0x756e6574}));
  time_mlp_.init(rng);
  for (auto& level : down_) {
    for (auto& b : level) {
      b.init(rng);
    }
  }
  for (auto& level : up_) {
    for (auto& b : level) {
      b.init(rng);
    }
  }
  out_.init(rng);
}

template <class T>
Matrix<T> UNet<T>::forward(const Matrix<T>& x, int h, int w, int t, Cache* cache) const {
  const int mult = arch_.grid_multiple();
  if (h < 1 || w < 1 || h % mult != 0 || w % mult != 0) {
    throw ShapeError("U-Net grid " + std::to_string(h) + "x" + std::to_string(w) + " is not divisible by " +
                     std::to_string(mult));
  }
  if (x.rows() != arch_.input_channels() || x.cols() != static_cast<Eigen::Index>(h) * w) {
    throw ShapeError("U-Net input must have " + std::to_string(arch_.input_channels()) + " channels on the grid");
  }
  const int levels = arch_.levels();
  Cache local;
  Cache& c = cache != nullptr ? *cache : local;
  const bool keep = cache != nullptr;
  c.h = h;
  c.w = w;
  const Matrix<T> sinus = timestep_embedding<T>(t, arch_.time_embed_dim);
  c.temb = time_mlp_.forward(sinus, keep ? &c.time : nullptr);
  c.down.assign(static_cast<std::size_t>(levels), {});
  c.up.assign(static_cast<std::size_t>(levels - 1), {});

  std::vector<Matrix<T>> skips(static_cast<std::size_t>(levels));
  Matrix<T> cur = x;
  int ch = h;
  int cw = w;
  for (int l = 0; l < levels; ++l) {
    if (l > 0) {
      cur = nn::avg_pool2(cur, ch, cw);
      ch /= 2;
      cw /= 2;
    }
    const auto& blocks = down_[static_cast<std::size_t>(l)];
    auto& caches = c.down[static_cast<std::size_t>(l)];
    caches.resize(blocks.size());
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      cur = blocks[b].forward(cur, ch, cw, c.temb, keep ? &caches[b] : nullptr);
    }
    if (l + 1 < levels) {
      skips[static_cast<std::size_t>(l)] = cur;
    }
  }
  for (int l = levels - 2; l >= 0; --l) {
    Matrix<T> upsampled = nn::upsample2(cur, ch, cw);
    ch *= 2;
    cw *= 2;
    const Matrix<T>& skip = skips[static_cast<std::size_t>(l)];
    cur.resize(upsampled.rows() + skip.rows(), upsampled.cols());
    cur.topRows(upsampled.rows()) = upsampled;
    cur.bottomRows(skip.rows()) = skip;
    const auto& blocks = up_[static_cast<std::size_t>(l)];
    auto& caches = c.up[static_cast<std::size_t>(l)];
    caches.resize(blocks.size());
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      cur = blocks[b].forward(cur, ch, cw, c.temb, keep ? &caches[b] : nullptr);
    }
  }
  return out_.forward(cur, h, w, keep ? &c.out : nullptr);
}

template <class T>
Matrix<T> UNet<T>::backward(const Cache& c, const Matrix<T>& dy, UNet* grad, bool want_input_grad) const {
  const int levels = arch_.levels();
  Matrix<T> dtemb = Matrix<T>::Zero(1, arch_.time_hidden());
  Matrix<T> d = out_.backward(c.out, dy, grad != nullptr ? &grad->out_ : nullptr, true);
  std::vector<Matrix<T>> dskips(static_cast<std::size_t>(levels));
  int ch = c.h;
  int cw = c.w;
  for (int l = 0; l + 1 < levels; ++l) {
    const auto& blocks = up_[static_cast<std::size_t>(l)];
    const auto& caches = c.up[static_cast<std::size_t>(l)];
    for (std::size_t b = blocks.size(); b-- > 0;) {
      UNetBlock<T>* g = grad != nullptr ? &grad->up_[static_cast<std::size_t>(l)][b] : nullptr;
      d = blocks[b].backward(caches[b], d, c.temb, g, dtemb, true);
    }
    const Eigen::Index up_rows = arch_.widths[static_cast<std::size_t>(l + 1)];
    dskips[static_cast<std::size_t>(l)] = d.bottomRows(d.rows() - up_rows);
    const Matrix<T> dup = d.topRows(up_rows);
    ch /= 2;
    cw /= 2;
    d = nn::upsample2_backward(dup, ch, cw);
  }
  for (int l = levels - 1; l >= 0; --l) {
    if (l + 1 < levels) {
      d += dskips[static_cast<std::size_t>(l)];
    }
    const auto& blocks = down_[static_cast<std::size_t>(l)];
    const auto& caches = c.down[static_cast<std::size_t>(l)];
    for (std::size_t b = blocks.size(); b-- > 0;) {
      UNetBlock<T>* g = grad != nullptr ? &grad->down_[static_cast<std::size_t>(l)][b] : nullptr;
      const bool need = want_input_grad || l > 0 || b > 0;
      d = blocks[b].backward(caches[b], d, c.temb, g, dtemb, need);
    }
    if (l > 0) {
      d = nn::avg_pool2_backward(d, ch * 2, cw * 2);
      ch *= 2;
      cw *= 2;
    }
  }
  time_mlp_.backward(c.time, dtemb, grad != nullptr ? &grad->time_mlp_ : nullptr, false);
  return d;
}

template nn::RowVector<float> timestep_embedding<float>(int, int);
template nn::RowVector<double> timestep_embedding<double>(int, int);
template class UNetBlock<float>;
template class UNetBlock<double>;
template class UNet<float>;
template class UNet<double>;

}  // namespace cas
