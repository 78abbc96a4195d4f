#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "cassensing/fields.hpp"

namespace cas {

// sqrt(mean over valid points and all channels of (estimate - truth)^2).
double rmse(std::span<const float> estimate, std::span<const float> truth, std::span<const std::uint8_t> validity,
            int channels = 1);
double rmse(std::span<const double> estimate, std::span<const double> truth, std::span<const std::uint8_t> validity,
            int channels = 1);

// Mean |y - field| over the observed points of a mask.
double observed_abs_residual(std::span<const float> field, const SparseObservation& obs);

struct SampleSummary {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation (n - 1); 0 for n = 1
  double min = 0.0;
  double max = 0.0;
};

SampleSummary summarize(std::span<const double> samples);

// Linear-interpolation quantile (numpy's default) of an unsorted sample.
double quantile(std::span<const double> samples, double q);

// Minimum kernel bandwidth; used when the samples have no spread.
inline constexpr double kMinBandwidth = 1e-6;

// Silverman's rule 0.9 * min(std, IQR / 1.34) * n^(-1/5). When the robust
// spread min(std, IQR / 1.34) is 0 but std is not, std is used alone; when
// both are 0 the bandwidth falls back to kMinBandwidth.
double silverman_bandwidth(std::span<const double> samples);

struct DensityCurve {
  std::vector<double> x;
  std::vector<double> density;
  double bandwidth = 0.0;
};

// Gaussian kernel density estimate evaluated on the given abscissae.
DensityCurve kde(std::span<const double> samples, std::span<const double> grid,
                 std::optional<double> bandwidth = std::nullopt);

// Abscissa grid spanning [min - 4h, max + 4h], dense enough (at least eight
// points per bandwidth) for the trapezoid rule to integrate the curve to 1.
std::vector<double> kde_grid(std::span<const double> samples, double bandwidth, int min_points = 512);

// KDE with Silverman bandwidth on kde_grid.
DensityCurve kde_rmse(std::span<const double> samples);

double trapezoid(std::span<const double> x, std::span<const double> y);

// Thin-plate spline interpolation (phi(r) = r^2 log r with a linear
// polynomial tail) of the observed values onto every valid grid point; a
// classical baseline for sparse reconstruction. Fewer than three points fall
// back to a constant tail.
std::vector<float> thin_plate_interpolate(const SparseObservation& obs, const DomainGrid& grid,
                                          std::span<const std::uint8_t> validity);

}  // namespace cas
