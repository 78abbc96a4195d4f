#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "cassensing/rng.hpp"

namespace cas::nn {

template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;

// A named view of one parameter tensor. Modules expose their tensors as a
// flat, ordered list of these; two instances of the same architecture list
// their tensors in the same order, which is how gradient buffers and
// optimizer moments (both stored as model-shaped copies) line up.
template <class T>
struct ParamRef {
  std::string name;
  std::vector<int> shape;
  std::span<T> data;
  bool trainable = true;
};

template <class T>
using ParamList = std::vector<ParamRef<T>>;

template <class M>
auto param_refs(M& module) {
  using Scalar = typename std::remove_const_t<M>::Scalar;
  using Elem = std::conditional_t<std::is_const_v<M>, const Scalar, Scalar>;
  ParamList<Elem> out;
  module.params(out, "");
  return out;
}

template <class M>
void zero_params(M& module) {
  for (auto& p : param_refs(module)) {
    std::fill(p.data.begin(), p.data.end(), typename M::Scalar(0));
  }
}

template <class M>
M zeros_like(const M& module) {
  M copy = module;
  zero_params(copy);
  return copy;
}

template <class M>
std::size_t param_count(const M& module, bool trainable_only = true) {
  std::size_t n = 0;
  for (const auto& p : param_refs(module)) {
    if (p.trainable || !trainable_only) {
      n += p.data.size();
    }
  }
  return n;
}

// FNV-1a over the raw bytes of every tensor, in declaration order.
template <class M>
std::uint64_t param_checksum(const M& module) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& p : param_refs(module)) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(p.data.data());
    for (std::size_t i = 0; i < p.data.size_bytes(); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ull;
    }
  }
  return h;
}

// Converts every tensor of `src` into the scalar type of `dst`. Both must
// share an architecture.
template <class Dst, class Src>
void convert_params(const Src& src, Dst& dst) {
  auto s = param_refs(src);
  auto d = param_refs(dst);
  if (s.size() != d.size()) {
    throw std::logic_error("convert_params: architectures differ");
  }
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i].data.size() != d[i].data.size()) {
      throw std::logic_error("convert_params: tensor size mismatch for " + s[i].name);
    }
    for (std::size_t k = 0; k < s[i].data.size(); ++k) {
      d[i].data[k] = static_cast<typename Dst::Scalar>(s[i].data[k]);
    }
  }
}

template <class T>
void fill_uniform(std::span<T> data, double bound, Rng& rng) {
  for (auto& v : data) {
    v = static_cast<T>(rng.uniform(-bound, bound));
  }
}

template <class T>
void fill_normal(std::span<T> data, double stddev, Rng& rng) {
  for (auto& v : data) {
    v = static_cast<T>(stddev * rng.normal());
  }
}

template <class Derived>
auto as_span(Eigen::PlainObjectBase<Derived>& m) {
  return std::span<typename Derived::Scalar>(m.data(), static_cast<std::size_t>(m.size()));
}

template <class Derived>
auto as_span(const Eigen::PlainObjectBase<Derived>& m) {
  return std::span<const typename Derived::Scalar>(m.data(), static_cast<std::size_t>(m.size()));
}

}  // namespace cas::nn
