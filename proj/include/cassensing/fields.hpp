#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace cas {

using Coord = std::array<double, 2>;

// Axis-aligned rectangle [x0, x1] x [y0, y1].
struct Extent {
  double x0 = 0.0;
  double y0 = 0.0;
  double x1 = 1.0;
  double y1 = 1.0;

  bool operator==(const Extent&) const = default;
};

// Uniform H x W lattice over an extent. Point i = row * W + col sits at
// x = x0 + col * (x1 - x0) / (W - 1), y = y0 + row * (y1 - y0) / (H - 1).
class DomainGrid {
 public:
  DomainGrid() = default;
  DomainGrid(int height, int width, Extent extent = {});

  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t size() const { return static_cast<std::size_t>(height_) * static_cast<std::size_t>(width_); }
  const Extent& extent() const { return extent_; }

  Coord coord(std::size_t index) const;
  std::vector<Coord> coords() const;

  bool operator==(const DomainGrid&) const = default;

 private:
  int height_ = 0;
  int width_ = 0;
  Extent extent_{};
};

// A discretised field: channels-last values (size() * channels) and one
// validity byte per point. Points inside solid boundaries are invalid and
// carry the value 0 in every channel.
struct FieldSnapshot {
  DomainGrid grid;
  int channels = 1;
  std::vector<float> values;
  std::vector<std::uint8_t> valid;

  std::size_t points() const { return grid.size(); }
  std::size_t valid_count() const;
  std::vector<std::size_t> valid_indices() const;

  // Throws ShapeError / ParameterError when an invariant is broken.
  void validate() const;
};

FieldSnapshot make_snapshot(DomainGrid grid, int channels, std::vector<float> values,
                            std::vector<std::uint8_t> valid);

struct SensorMask {
  std::vector<std::size_t> indices;  // sorted, unique, valid points only
  double ratio = 0.0;
  std::uint64_t seed = 0;
};

struct SparseObservation {
  SensorMask mask;
  int channels = 1;
  std::vector<Coord> coords;
  std::vector<float> values;  // mask.indices.size() * channels

  std::size_t size() const { return coords.size(); }
};

// Number of selected points for a ratio: max(1, round(ratio * valid_count)).
std::size_t mask_count(double ratio, std::size_t valid_count);

SensorMask random_mask(const DomainGrid& grid, std::span<const std::uint8_t> validity, double ratio,
                       std::uint64_t seed);

SensorMask full_mask(const FieldSnapshot& snapshot);

SparseObservation apply_mask(const FieldSnapshot& snapshot, const SensorMask& mask);

// Encoder / decoder partition for complement-mask training.
struct ComplementSplit {
  SparseObservation encoder;
  SparseObservation decoder;
};

ComplementSplit complement_split(const FieldSnapshot& snapshot, double encoder_ratio, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Synthetic wake fields.
//
// With xi = x - cx, eta = y - cy, r = |(xi, eta)|, k = 2 pi / wavelength and
// xi+ = max(xi, 0):
//
//   width     w     = radius + 0.25 xi+
//   onset     S     = 1 - exp(-xi+ / radius)
//   decay     D     = exp(-xi+ / (4 wavelength))
//   envelope  E     = S D exp(-eta^2 / (2 w^2))
//   phase     theta = k xi - (phase + jitter),  jitter ~ U(-0.2, 0.2) from seed
//
//   large = A_L [ E (cos theta + 0.5 (eta / w) sin theta) + 0.5 radius^2 (xi^2 - eta^2) / r^4 ]
//   small = A_S E cos(k_S theta)
//
// Points with r < radius are invalid and hold 0. The small-scale part is
// phase-locked to the large-scale wave, so it is a deterministic function of
// the large-scale state.
// ---------------------------------------------------------------------------
struct SyntheticWakeConfig {
  double cx = 0.5;
  double cy = 0.5;
  double radius = 0.1;
  double wavelength = 0.6;
  double amp_large = 1.0;
  double amp_small = 0.3;
  int k_small = 4;
  double phase = 0.0;
  std::uint64_t seed = 0;

  void validate(const Extent& extent) const;
};

struct WakeComponents {
  std::vector<double> large;  // per point, zero at invalid points
  std::vector<double> small;
  std::vector<std::uint8_t> valid;
};

double wake_phase_jitter(std::uint64_t seed);
WakeComponents wake_components(const SyntheticWakeConfig& config, const DomainGrid& grid);
FieldSnapshot generate_wake(const SyntheticWakeConfig& config, const DomainGrid& grid);

// ---------------------------------------------------------------------------
// Snapshot files: a directory holding manifest.json, a raw little-endian
// float32 payload (row-major, channels-last) and one validity byte per point.
// ---------------------------------------------------------------------------
void save_snapshot(const FieldSnapshot& snapshot, const std::filesystem::path& dir);
FieldSnapshot load_snapshot(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Datasets: snapshots grouped by boundary configuration, split into train and
// test by configuration.
// ---------------------------------------------------------------------------
struct DatasetItem {
  std::string id;
  int config_id = 0;
  bool is_test = false;
  bool has_wake = false;
  SyntheticWakeConfig wake{};
  FieldSnapshot snapshot;
};

struct Dataset {
  std::vector<DatasetItem> items;

  std::vector<std::size_t> split_indices(bool test) const;
  std::vector<std::size_t> train_indices() const { return split_indices(false); }
  std::vector<std::size_t> test_indices() const { return split_indices(true); }
  const DomainGrid& grid() const;
};

struct WakeDatasetSpec {
  int height = 32;
  int width = 64;
  Extent extent{0.0, 0.0, 2.0, 1.0};
  int configs = 20;
  int snapshots_per_config = 50;
  int test_configs = 4;
  double cx_min = 0.35, cx_max = 0.65;
  double cy_min = 0.38, cy_max = 0.62;
  double radius_min = 0.08, radius_max = 0.12;
  double wavelength_per_diameter = 3.0;
  double amp_large = 1.0;
  double amp_small = 0.3;
  int k_small = 4;
  std::uint64_t seed = 0;
};

Dataset generate_wake_dataset(const WakeDatasetSpec& spec);

// Writes <dir>/dataset.json plus one snapshot directory per item.
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace cas
