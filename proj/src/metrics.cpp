#include "cassensing/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>

#include "cassensing/error.hpp"

namespace cas {

namespace {

template <class V>
double rmse_impl(std::span<const V> estimate, std::span<const V> truth, std::span<const std::uint8_t> validity,
                 int channels) {
  if (channels < 1) {
    throw ParameterError("rmse needs at least one channel");
  }
  const auto c = static_cast<std::size_t>(channels);
  if (estimate.size() != truth.size() || estimate.size() != validity.size() * c) {
    throw ShapeError("rmse operands do not share a shape");
  }
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < validity.size(); ++i) {
    if (!validity[i]) {
      continue;
    }
    for (std::size_t k = 0; k < c; ++k) {
      const double e = static_cast<double>(estimate[i * c + k]) - static_cast<double>(truth[i * c + k]);
      sum += e * e;
    }
    count += c;
  }
  if (count == 0) {
    throw EmptyDomainError("rmse over a domain with no valid points");
  }
  return std::sqrt(sum / static_cast<double>(count));
}

}  // namespace

double rmse(std::span<const float> estimate, std::span<const float> truth, std::span<const std::uint8_t> validity,
            int channels) {
  return rmse_impl(estimate, truth, validity, channels);
}

double rmse(std::span<const double> estimate, std::span<const double> truth, std::span<const std::uint8_t> validity,
            int channels) {
  return rmse_impl(estimate, truth, validity, channels);
}

double observed_abs_residual(std::span<const float> field, const SparseObservation& obs) {
  const auto c = static_cast<std::size_t>(obs.channels);
  if (obs.mask.indices.empty()) {
    throw EmptyDomainError("observation has no points");
  }
  double sum = 0.0;
  for (std::size_t p = 0; p < obs.mask.indices.size(); ++p) {
    const std::size_t i = obs.mask.indices[p];
    if ((i + 1) * c > field.size()) {
      throw ShapeError("observation index outside the field");
    }
    for (std::size_t k = 0; k < c; ++k) {
      sum += std::abs(static_cast<double>(obs.values[p * c + k]) - static_cast<double>(field[i * c + k]));
    }
  }
  return sum / static_cast<double>(obs.mask.indices.size() * c);
}

SampleSummary summarize(std::span<const double> samples) {
  if (samples.empty()) {
    throw EmptyDomainError("cannot summarize an empty sample");
  }
  SampleSummary s;
  const double n = static_cast<double>(samples.size());
  double sum = 0.0;
  for (double v : samples) {
    sum += v;
  }
  s.mean = sum / n;
  double sq = 0.0;
  for (double v : samples) {
    sq += (v - s.mean) * (v - s.mean);
  }
  s.stddev = samples.size() > 1 ? std::sqrt(sq / (n - 1.0)) : 0.0;
  s.min = *std::min_element(samples.begin(), samples.end());
  s.max = *std::max_element(samples.begin(), samples.end());
  return s;
}

double quantile(std::span<const double> samples, double q) {
  if (samples.empty()) {
    throw EmptyDomainError("quantile of an empty sample");
  }
  std::vector<double> sorted(samples.begin(), samples.end());
  std::sort(sorted.begin(), sorted.end());
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

double silverman_bandwidth(std::span<const double> samples) {
  if (samples.empty()) {
    throw EmptyDomainError("bandwidth of an empty sample");
  }
  const double sd = summarize(samples).stddev;
  const double iqr = quantile(samples, 0.75) - quantile(samples, 0.25);
  double spread = std::min(sd, iqr / 1.34);
  if (!(spread > 0.0)) {
    spread = sd;
  }
  const double h = 0.9 * spread * std::pow(static_cast<double>(samples.size()), -0.2);
  return h > kMinBandwidth ? h : kMinBandwidth;
}

DensityCurve kde(std::span<const double> samples, std::span<const double> grid, std::optional<double> bandwidth) {
  if (samples.empty()) {
    throw EmptyDomainError("kernel density of an empty sample");
  }
  DensityCurve curve;
  curve.bandwidth = bandwidth.value_or(silverman_bandwidth(samples));
  if (!(curve.bandwidth > 0.0)) {
    throw ParameterError("kernel bandwidth must be positive");
  }
  const double h = curve.bandwidth;
  const double norm = 1.0 / (static_cast<double>(samples.size()) * h * std::sqrt(2.0 * std::numbers::pi));
  curve.x.assign(grid.begin(), grid.end());
  curve.density.resize(grid.size());
  for (std::size_t g = 0; g < grid.size(); ++g) {
    double acc = 0.0;
    for (double s : samples) {
      const double u = (grid[g] - s) / h;
      acc += std::exp(-0.5 * u * u);
    }
    curve.density[g] = acc * norm;
  }
  return curve;
}

std::vector<double> kde_grid(std::span<const double> samples, double bandwidth, int min_points) {
  const SampleSummary s = summarize(samples);
  const double lo = s.min - 4.0 * bandwidth;
  const double hi = s.max + 4.0 * bandwidth;
  const double by_bandwidth = std::ceil((hi - lo) / (bandwidth / 8.0)) + 1.0;
  const auto points = static_cast<std::size_t>(std::clamp(by_bandwidth, static_cast<double>(min_points), 200000.0));
  std::vector<double> grid(points);
  for (std::size_t i = 0; i < points; ++i) {
    grid[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(points - 1);
  }
  return grid;
}

DensityCurve kde_rmse(std::span<const double> samples) {
  const double h = silverman_bandwidth(samples);
  const std::vector<double> grid = kde_grid(samples, h);
  return kde(samples, grid, h);
}

double trapezoid(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) {
    throw ShapeError("trapezoid operands differ in length");
  }
  double acc = 0.0;
  for (std::size_t i = 1; i < x.size(); ++i) {
    acc += 0.5 * (x[i] - x[i - 1]) * (y[i] + y[i - 1]);
  }
  return acc;
}

std::vector<float> thin_plate_interpolate(const SparseObservation& obs, const DomainGrid& grid,
                                          std::span<const std::uint8_t> validity) {
  const std::size_t n = obs.coords.size();
  if (n == 0) {
    throw EmptyDomainError("thin-plate interpolation needs at least one observation");
  }
  if (validity.size() != grid.size()) {
    throw ShapeError("validity flags do not match the grid");
  }
  const auto c = static_cast<std::size_t>(obs.channels);
  const std::size_t tail = n >= 3 ? 3 : 1;
  auto kernel = [](double r2) { return r2 > 0.0 ? 0.5 * r2 * std::log(r2) : 0.0; };  // r^2 log r

  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n + tail), static_cast<Eigen::Index>(n + tail));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double dx = obs.coords[i][0] - obs.coords[j][0];
      const double dy = obs.coords[i][1] - obs.coords[j][1];
      a(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = kernel(dx * dx + dy * dy);
    }
    const auto ii = static_cast<Eigen::Index>(i);
    const auto base = static_cast<Eigen::Index>(n);
    a(ii, base) = a(base, ii) = 1.0;
    if (tail == 3) {
      a(ii, base + 1) = a(base + 1, ii) = obs.coords[i][0];
      a(ii, base + 2) = a(base + 2, ii) = obs.coords[i][1];
    }
  }
  Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n + tail), static_cast<Eigen::Index>(c));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < c; ++k) {
      rhs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = obs.values[i * c + k];
    }
  }
  const Eigen::MatrixXd coef = a.completeOrthogonalDecomposition().solve(rhs);

  std::vector<float> out(grid.size() * c, 0.0f);
  for (std::size_t p = 0; p < grid.size(); ++p) {
    if (!validity[p]) {
      continue;
    }
    const Coord x = grid.coord(p);
    for (std::size_t k = 0; k < c; ++k) {
      const auto kk = static_cast<Eigen::Index>(k);
      double v = coef(static_cast<Eigen::Index>(n), kk);
      if (tail == 3) {
        v += coef(static_cast<Eigen::Index>(n + 1), kk) * x[0] + coef(static_cast<Eigen::Index>(n + 2), kk) * x[1];
      }
      for (std::size_t j = 0; j < n; ++j) {
        const double dx = x[0] - obs.coords[j][0];
        const double dy = x[1] - obs.coords[j][1];
        v += coef(static_cast<Eigen::Index>(j), kk) * kernel(dx * dx + dy * dy);
      }
      out[p * c + k] = static_cast<float>(v);
    }
  }
  return out;
}

}  // namespace cas
