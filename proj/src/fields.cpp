#include "cassensing/fields.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>
#include <sstream>

#include "cassensing/error.hpp"
#include "cassensing/rng.hpp"
#include "json.hpp"

namespace cas {

static_assert(std::endian::native == std::endian::little, "payloads are written as host little-endian floats");

using nlohmann::json;
namespace fs = std::filesystem;

DomainGrid::DomainGrid(int height, int width, Extent extent) : height_(height), width_(width), extent_(extent) {
  if (height < 2 || width < 2) {
    throw ParameterError("grid needs at least 2 x 2 nodes, got " + std::to_string(height) + " x " +
                         std::to_string(width));
  }
  if (!(extent.x1 > extent.x0) || !(extent.y1 > extent.y0)) {
    throw ParameterError("grid extent must have positive width and height");
  }
}

Coord DomainGrid::coord(std::size_t index) const {
  const auto w = static_cast<std::size_t>(width_);
  const double col = static_cast<double>(index % w);
  const double row = static_cast<double>(index / w);
  return {extent_.x0 + col * (extent_.x1 - extent_.x0) / (width_ - 1),
          extent_.y0 + row * (extent_.y1 - extent_.y0) / (height_ - 1)};
}

std::vector<Coord> DomainGrid::coords() const {
  std::vector<Coord> out(size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = coord(i);
  }
  return out;
}

std::size_t FieldSnapshot::valid_count() const {
  return static_cast<std::size_t>(std::count_if(valid.begin(), valid.end(), [](std::uint8_t v) { return v != 0; }));
}

std::vector<std::size_t> FieldSnapshot::valid_indices() const {
  std::vector<std::size_t> out;
  out.reserve(valid.size());
  for (std::size_t i = 0; i < valid.size(); ++i) {
    if (valid[i]) {
      out.push_back(i);
    }
  }
  return out;
}

void FieldSnapshot::validate() const {
  if (channels < 1) {
    throw ParameterError("snapshot channel count must be >= 1");
  }
  const std::size_t n = grid.size();
  if (values.size() != n * static_cast<std::size_t>(channels)) {
    throw ShapeError("snapshot has " + std::to_string(values.size()) + " values, expected " +
                     std::to_string(n * static_cast<std::size_t>(channels)));
  }
  if (valid.size() != n) {
    throw ShapeError("snapshot validity has " + std::to_string(valid.size()) + " flags, expected " +
                     std::to_string(n));
  }
  const auto c = static_cast<std::size_t>(channels);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < c; ++k) {
      const float v = values[i * c + k];
      if (!std::isfinite(v)) {
        throw ParameterError("snapshot value at point " + std::to_string(i) + " is not finite");
      }
      if (!valid[i] && v != 0.0f) {
        throw ParameterError("snapshot value at invalid point " + std::to_string(i) + " is not zero");
      }
    }
  }
}

FieldSnapshot make_snapshot(DomainGrid grid, int channels, std::vector<float> values,
                            std::vector<std::uint8_t> valid) {
  FieldSnapshot s{std::move(grid), channels, std::move(values), std::move(valid)};
  s.validate();
  return s;
}

std::size_t mask_count(double ratio, std::size_t valid_count) {
  const auto k = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(valid_count)));
  return std::clamp<std::size_t>(k, 1, valid_count);
}

SensorMask random_mask(const DomainGrid& grid, std::span<const std::uint8_t> validity, double ratio,
                       std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio <= 1.0)) {
    throw ParameterError("mask ratio must lie in (0, 1], got " + std::to_string(ratio));
  }
  if (validity.size() != grid.size()) {
    throw ShapeError("validity flags do not match the grid");
  }
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < validity.size(); ++i) {
    if (validity[i]) {
      pool.push_back(i);
    }
  }
  if (pool.empty()) {
    throw EmptyDomainError("cannot draw a sensor mask: the domain has no valid points");
  }
  const std::size_t k = mask_count(ratio, pool.size());
  Rng rng(seed);
  rng.partial_shuffle(pool, k);
  pool.resize(k);
  std::sort(pool.begin(), pool.end());
  return SensorMask{std::move(pool), ratio, seed};
}

SensorMask full_mask(const FieldSnapshot& snapshot) {
  return SensorMask{snapshot.valid_indices(), 1.0, 0};
}

SparseObservation apply_mask(const FieldSnapshot& snapshot, const SensorMask& mask) {
  SparseObservation obs;
  obs.mask = mask;
  obs.channels = snapshot.channels;
  const auto c = static_cast<std::size_t>(snapshot.channels);
  obs.coords.reserve(mask.indices.size());
  obs.values.reserve(mask.indices.size() * c);
  for (std::size_t idx : mask.indices) {
    if (idx >= snapshot.points()) {
      throw ShapeError("mask index " + std::to_string(idx) + " is outside the " +
                       std::to_string(snapshot.points()) + "-point grid");
    }
    obs.coords.push_back(snapshot.grid.coord(idx));
    for (std::size_t k = 0; k < c; ++k) {
      obs.values.push_back(snapshot.values[idx * c + k]);
    }
  }
  return obs;
}

ComplementSplit complement_split(const FieldSnapshot& snapshot, double encoder_ratio, std::uint64_t seed) {
  if (!(encoder_ratio > 0.0 && encoder_ratio < 1.0)) {
    throw ParameterError("encoder ratio must lie strictly inside (0, 1), got " + std::to_string(encoder_ratio));
  }
  std::vector<std::size_t> pool = snapshot.valid_indices();
  if (pool.empty()) {
    throw EmptyDomainError("cannot split a snapshot with no valid points");
  }
  const auto k = static_cast<std::size_t>(std::llround(encoder_ratio * static_cast<double>(pool.size())));
  if (k == 0 || k == pool.size()) {
    throw EmptyDomainError("encoder ratio " + std::to_string(encoder_ratio) + " leaves an empty split set on " +
                           std::to_string(pool.size()) + " valid points");
  }
  Rng rng(seed);
  rng.partial_shuffle(pool, k);
  std::vector<std::size_t> enc(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
  std::vector<std::size_t> dec(pool.begin() + static_cast<std::ptrdiff_t>(k), pool.end());
  std::sort(enc.begin(), enc.end());
  std::sort(dec.begin(), dec.end());
  const double n = static_cast<double>(pool.size());
  return ComplementSplit{
      apply_mask(snapshot, SensorMask{std::move(enc), static_cast<double>(k) / n, seed}),
      apply_mask(snapshot, SensorMask{std::move(dec), 1.0 - static_cast<double>(k) / n, seed}),
  };
}

// ---------------------------------------------------------------------------
// Synthetic wake
// ---------------------------------------------------------------------------

void SyntheticWakeConfig::validate(const Extent& extent) const {
  if (!(radius > 0.0)) {
    throw ParameterError("cylinder radius must be positive");
  }
  if (!(wavelength > 0.0)) {
    throw ParameterError("wake wavelength must be positive");
  }
  if (k_small < 4) {
    throw ParameterError("small-scale wavenumber multiplier must be >= 4");
  }
  if (!(std::abs(amp_small) < std::abs(amp_large))) {
    throw ParameterError("small-scale amplitude must be below the large-scale amplitude");
  }
  if (cx - radius < extent.x0 || cx + radius > extent.x1 || cy - radius < extent.y0 || cy + radius > extent.y1) {
    throw ParameterError("cylinder does not lie inside the domain");
  }
}

double wake_phase_jitter(std::uint64_t seed) {
  Rng rng(derive_seed(seed, {0x77616b65}));
  return rng.uniform(-0.2, 0.2);
}

WakeComponents wake_components(const SyntheticWakeConfig& config, const DomainGrid& grid) {
  config.validate(grid.extent());
  const std::size_t n = grid.size();
  WakeComponents out{std::vector<double>(n, 0.0), std::vector<double>(n, 0.0), std::vector<std::uint8_t>(n, 0)};
  const double k = 2.0 * std::numbers::pi / config.wavelength;
  const double phase = config.phase + wake_phase_jitter(config.seed);
  const double decay_length = 4.0 * config.wavelength;
  const double rho = config.radius;
  for (std::size_t i = 0; i < n; ++i) {
    const Coord p = grid.coord(i);
    const double xi = p[0] - config.cx;
    const double eta = p[1] - config.cy;
    const double r2 = xi * xi + eta * eta;
    if (r2 < rho * rho) {
      continue;
    }
    out.valid[i] = 1;
    const double xi_plus = std::max(xi, 0.0);
    const double w = rho + 0.25 * xi_plus;
    const double onset = 1.0 - std::exp(-xi_plus / rho);
    const double decay = std::exp(-xi_plus / decay_length);
    const double envelope = onset * decay * std::exp(-eta * eta / (2.0 * w * w));
    const double theta = k * xi - phase;
    const double dipole = 0.5 * rho * rho * (xi * xi - eta * eta) / (r2 * r2);
    out.large[i] = config.amp_large * (envelope * (std::cos(theta) + 0.5 * (eta / w) * std::sin(theta)) + dipole);
    out.small[i] = config.amp_small * envelope * std::cos(config.k_small * theta);
  }
  return out;
}

FieldSnapshot generate_wake(const SyntheticWakeConfig& config, const DomainGrid& grid) {
  WakeComponents c = wake_components(config, grid);
  std::vector<float> values(grid.size(), 0.0f);
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (c.valid[i]) {
      values[i] = static_cast<float>(c.large[i] + c.small[i]);
    }
  }
  return make_snapshot(grid, 1, std::move(values), std::move(c.valid));
}

// ---------------------------------------------------------------------------
// File I/O
// ---------------------------------------------------------------------------

namespace {

constexpr const char* kValuesFile = "values.f32";
constexpr const char* kValidityFile = "validity.u8";

std::vector<char> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw FormatError("cannot open " + path.string());
  }
  return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_bytes(const fs::path& path, const void* data, std::size_t size) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw FormatError("cannot write " + path.string());
  }
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
  if (!out) {
    throw FormatError("short write to " + path.string());
  }
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw FormatError("cannot open " + path.string());
  }
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw FormatError("cannot write " + path.string());
  }
  out << j.dump(2) << '\n';
}

json wake_to_json(const SyntheticWakeConfig& c) {
  return json{{"cx", c.cx},
              {"cy", c.cy},
              {"radius", c.radius},
              {"wavelength", c.wavelength},
              {"amp_large", c.amp_large},
              {"amp_small", c.amp_small},
              {"k_small", c.k_small},
              {"phase", c.phase},
              {"seed", c.seed}};
}

SyntheticWakeConfig wake_from_json(const json& j) {
  SyntheticWakeConfig c;
  c.cx = j.at("cx").get<double>();
  c.cy = j.at("cy").get<double>();
  c.radius = j.at("radius").get<double>();
  c.wavelength = j.at("wavelength").get<double>();
  c.amp_large = j.at("amp_large").get<double>();
  c.amp_small = j.at("amp_small").get<double>();
  c.k_small = j.at("k_small").get<int>();
  c.phase = j.at("phase").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

}  // namespace

void save_snapshot(const FieldSnapshot& snapshot, const fs::path& dir) {
  snapshot.validate();
  fs::create_directories(dir);
  const Extent& e = snapshot.grid.extent();
  json manifest{{"format_version", 1},
                {"height", snapshot.grid.height()},
                {"width", snapshot.grid.width()},
                {"channels", snapshot.channels},
                {"dtype", "f32le"},
                {"extent", {e.x0, e.y0, e.x1, e.y1}},
                {"values_file", kValuesFile},
                {"validity_file", kValidityFile}};
  write_json(dir / "manifest.json", manifest);
  write_bytes(dir / kValuesFile, snapshot.values.data(), snapshot.values.size() * sizeof(float));
  write_bytes(dir / kValidityFile, snapshot.valid.data(), snapshot.valid.size());
}

FieldSnapshot load_snapshot(const fs::path& dir) {
  const json m = read_json(dir / "manifest.json");
  int height = 0, width = 0, channels = 0;
  Extent extent;
  std::string values_file, validity_file;
  try {
    if (m.at("format_version").get<int>() != 1) {
      throw FormatError("unsupported snapshot format_version in " + dir.string());
    }
    if (m.at("dtype").get<std::string>() != "f32le") {
      throw FormatError("unsupported snapshot dtype in " + dir.string());
    }
    height = m.at("height").get<int>();
    width = m.at("width").get<int>();
    channels = m.at("channels").get<int>();
    const auto ext = m.at("extent").get<std::vector<double>>();
    if (ext.size() != 4) {
      throw FormatError("extent must have 4 entries in " + dir.string());
    }
    extent = Extent{ext[0], ext[1], ext[2], ext[3]};
    values_file = m.at("values_file").get<std::string>();
    validity_file = m.at("validity_file").get<std::string>();
  } catch (const json::exception& e) {
    throw FormatError("malformed snapshot manifest in " + dir.string() + ": " + e.what());
  }
  if (height < 2 || width < 2 || channels < 1) {
    throw FormatError("invalid snapshot dimensions in " + dir.string());
  }
  const DomainGrid grid(height, width, extent);
  const std::size_t expected_values = grid.size() * static_cast<std::size_t>(channels);

  const std::vector<char> raw_values = read_bytes(dir / values_file);
  if (raw_values.size() != expected_values * sizeof(float)) {
    throw ShapeError("snapshot payload " + (dir / values_file).string() + " holds " +
                     std::to_string(raw_values.size()) + " bytes, manifest implies " +
                     std::to_string(expected_values * sizeof(float)));
  }
  const std::vector<char> raw_valid = read_bytes(dir / validity_file);
  if (raw_valid.size() != grid.size()) {
    throw ShapeError("validity payload " + (dir / validity_file).string() + " holds " +
                     std::to_string(raw_valid.size()) + " bytes, manifest implies " + std::to_string(grid.size()));
  }
  std::vector<float> values(expected_values);
  std::memcpy(values.data(), raw_values.data(), raw_values.size());
  std::vector<std::uint8_t> valid(grid.size());
  for (std::size_t i = 0; i < valid.size(); ++i) {
    const auto b = static_cast<std::uint8_t>(raw_valid[i]);
    if (b > 1) {
      throw FormatError("validity byte " + std::to_string(i) + " is neither 0 nor 1");
    }
    valid[i] = b;
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw FormatError("non-finite value at payload position " + std::to_string(i) + " in " + dir.string());
    }
  }
  FieldSnapshot s{grid, channels, std::move(values), std::move(valid)};
  try {
    s.validate();
  } catch (const Error& e) {
    throw FormatError(std::string("snapshot in ") + dir.string() + " violates invariants: " + e.what());
  }
  return s;
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

std::vector<std::size_t> Dataset::split_indices(bool test) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].is_test == test) {
      out.push_back(i);
    }
  }
  return out;
}

const DomainGrid& Dataset::grid() const {
  if (items.empty()) {
    throw EmptyDomainError("dataset is empty");
  }
  return items.front().snapshot.grid;
}

Dataset generate_wake_dataset(const WakeDatasetSpec& spec) {
  if (spec.configs < 1 || spec.snapshots_per_config < 1) {
    throw ParameterError("wake dataset needs at least one configuration and one snapshot");
  }
  if (spec.test_configs < 0 || spec.test_configs >= spec.configs) {
    throw ParameterError("test configuration count must lie in [0, configs)");
  }
  const DomainGrid grid(spec.height, spec.width, spec.extent);
  Dataset ds;
  Rng rng(derive_seed(spec.seed, {0x636f6e66}));
  for (int c = 0; c < spec.configs; ++c) {
    SyntheticWakeConfig base;
    base.cx = rng.uniform(spec.cx_min, spec.cx_max);
    base.cy = rng.uniform(spec.cy_min, spec.cy_max);
    base.radius = rng.uniform(spec.radius_min, spec.radius_max);
    base.wavelength = spec.wavelength_per_diameter * 2.0 * base.radius;
    base.amp_large = spec.amp_large;
    base.amp_small = spec.amp_small;
    base.k_small = spec.k_small;
    const bool is_test = c >= spec.configs - spec.test_configs;
    for (int s = 0; s < spec.snapshots_per_config; ++s) {
      SyntheticWakeConfig cfg = base;
      cfg.phase = 2.0 * std::numbers::pi * s / spec.snapshots_per_config;
      cfg.seed = derive_seed(spec.seed, {static_cast<std::uint64_t>(c), static_cast<std::uint64_t>(s)});
      DatasetItem item;
      std::ostringstream id;
      id << "c" << c << "_s" << s;
      item.id = id.str();
      item.config_id = c;
      item.is_test = is_test;
      item.has_wake = true;
      item.wake = cfg;
      item.snapshot = generate_wake(cfg, grid);
      ds.items.push_back(std::move(item));
    }
  }
  return ds;
}

void save_dataset(const Dataset& dataset, const fs::path& dir) {
  fs::create_directories(dir / "snapshots");
  json entries = json::array();
  for (const DatasetItem& item : dataset.items) {
    const std::string rel = "snapshots/" + item.id;
    save_snapshot(item.snapshot, dir / rel);
    json e{{"id", item.id}, {"path", rel}, {"config_id", item.config_id}, {"split", item.is_test ? "test" : "train"}};
    if (item.has_wake) {
      e["wake"] = wake_to_json(item.wake);
    }
    entries.push_back(std::move(e));
  }
  write_json(dir / "dataset.json", json{{"format_version", 1}, {"snapshots", entries}});
}

Dataset load_dataset(const fs::path& dir) {
  const json m = read_json(dir / "dataset.json");
  Dataset ds;
  try {
    if (m.at("format_version").get<int>() != 1) {
      throw FormatError("unsupported dataset format_version in " + dir.string());
    }
    for (const json& e : m.at("snapshots")) {
      DatasetItem item;
      item.id = e.at("id").get<std::string>();
      item.config_id = e.at("config_id").get<int>();
      const std::string split = e.at("split").get<std::string>();
      if (split != "train" && split != "test") {
        throw FormatError("dataset entry " + item.id + " has unknown split '" + split + "'");
      }
      item.is_test = split == "test";
      if (e.contains("wake")) {
        item.has_wake = true;
        item.wake = wake_from_json(e.at("wake"));
      }
      item.snapshot = load_snapshot(dir / e.at("path").get<std::string>());
      ds.items.push_back(std::move(item));
    }
  } catch (const json::exception& e) {
    throw FormatError("malformed dataset manifest in " + dir.string() + ": " + e.what());
  }
  for (const DatasetItem& item : ds.items) {
    if (!(item.snapshot.grid == ds.items.front().snapshot.grid) ||
        item.snapshot.channels != ds.items.front().snapshot.channels) {
      throw ShapeError("dataset snapshots do not share one grid and channel count");
    }
  }
  return ds;
}

}  // namespace cas
