#pragma once

#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

#include "cassensing/fields.hpp"
#include "cassensing/rng.hpp"

namespace testing {

// Fresh scratch directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("cassense_test_" + tag + "_" + std::to_string(cas::derive_seed(reinterpret_cast<std::uintptr_t>(this), {})));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  std::filesystem::path path_;
};

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline cas::FieldSnapshot random_snapshot(int h, int w, int channels, std::uint64_t seed, bool all_valid = true) {
  cas::Rng rng(seed);
  const cas::DomainGrid grid(h, w, {0.0, 0.0, 1.0, 1.0});
  std::vector<float> values(grid.size() * static_cast<std::size_t>(channels));
  std::vector<std::uint8_t> valid(grid.size(), 1);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (!all_valid && rng.uniform() < 0.2) {
      valid[i] = 0;
    }
    for (int k = 0; k < channels; ++k) {
      values[i * static_cast<std::size_t>(channels) + static_cast<std::size_t>(k)] =
          valid[i] ? static_cast<float>(rng.normal()) : 0.0f;
    }
  }
  return cas::make_snapshot(grid, channels, std::move(values), std::move(valid));
}

}  // namespace testing

#include <algorithm>
#include <cmath>
#include <functional>

#include "cassensing/nn/module.hpp"

namespace testing {

// Worst relative error between analytic parameter gradients and central
// differences of f, over trainable entries (every `stride`-th one).
template <class M>
double param_grad_error(M& model, const M& grad, const std::function<double()>& f, double h = 1e-4,
                        std::size_t stride = 1) {
  auto p = cas::nn::param_refs(model);
  auto g = cas::nn::param_refs(grad);
  double worst = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!p[i].trainable) {
      continue;
    }
    for (std::size_t k = 0; k < p[i].data.size(); k += stride) {
      const double orig = p[i].data[k];
      p[i].data[k] = orig + h;
      const double fp = f();
      p[i].data[k] = orig - h;
      const double fm = f();
      p[i].data[k] = orig;
      const double fd = (fp - fm) / (2.0 * h);
      const double an = g[i].data[k];
      const double denom = std::max(1e-6, std::abs(fd) + std::abs(an));
      worst = std::max(worst, std::abs(fd - an) / denom);
    }
  }
  return worst;
}

}  // namespace testing
