#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "cassensing/cascade.hpp"
#include "cassensing/error.hpp"
#include "cassensing/metrics.hpp"

namespace cas {

// Bad command line or configuration (CLI exit code 1).
class UsageError : public Error {
 public:
  using Error::Error;
};

// Flat configuration: one `key = value` per line, `#` starts a comment,
// blank lines are ignored. Later assignments override earlier ones.
class Config {
 public:
  static Config parse(const std::string& text, const std::string& origin = "<config>");
  static Config load(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value);
  // Parses "key=value".
  void set_assignment(const std::string& assignment);
  void merge(const Config& other);
  bool has(const std::string& key) const { return values_.count(key) != 0; }

  std::string get_string(const std::string& key, const std::string& fallback) const;
  std::string require_string(const std::string& key) const;
  double get_double(const std::string& key, double fallback) const;
  long long get_int(const std::string& key, long long fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<double> get_doubles(const std::string& key, const std::vector<double>& fallback) const;
  std::vector<int> get_ints(const std::string& key, const std::vector<int>& fallback) const;

  // Throws UsageError naming the first key not in `allowed`.
  void check_keys(const std::set<std::string>& allowed) const;

  // Sorted `key = value` lines.
  std::string dump() const;
  nlohmann::json to_json() const;
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

// Output directory of one CLI invocation.
class RunDirectory {
 public:
  RunDirectory(std::filesystem::path root, std::string command, const Config& config);

  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path path(const std::string& relative) const { return root_ / relative; }

  void add_seed(const std::string& name, std::uint64_t seed) { seeds_[name] = seed; }
  void add_timing(const std::string& name, double seconds) { timings_[name] = seconds; }
  void add_output(const std::string& relative) { outputs_.push_back(relative); }
  void add_info(const std::string& key, nlohmann::json value) { info_[key] = std::move(value); }

  // Writes config.snapshot and manifest.json.
  void finalize() const;

 private:
  std::filesystem::path root_;
  std::string command_;
  Config config_;
  std::map<std::string, std::uint64_t> seeds_;
  std::map<std::string, double> timings_;
  std::vector<std::string> outputs_;
  nlohmann::json info_ = nlohmann::json::object();
};

std::string git_describe();

// Shortest round-trippable decimal form.
std::string format_double(double v);

// Builders from configuration keys (documented in the README).
WakeDatasetSpec wake_spec_from_config(const Config& c);
FaeArchitecture fae_architecture_from_config(const Config& c, const Extent& extent);
FaeTrainConfig fae_train_config_from_config(const Config& c);
CascadeTrainConfig cascade_train_config_from_config(const Config& c);
GuidanceConfig guidance_from_config(const Config& c, const GuidanceConfig& fallback);

// Item lookup by snapshot id; an empty id means the first test snapshot.
std::size_t find_item(const Dataset& data, const std::string& id);

// ---------------------------------------------------------------------------
// Sparsity sweep of the full cascade.
// ---------------------------------------------------------------------------

struct SweepConfig {
  std::vector<double> ratios{0.001, 0.005, 0.01, 0.03, 0.05};
  int masks_per_ratio = 1;
  int samples_per_mask = 100;
  std::vector<std::size_t> items;  // snapshots evaluated; every mask is drawn on each of them
  std::uint64_t seed = 0;
  GuidanceConfig guidance{};
  bool baseline = true;  // thin-plate interpolation from the same observations

  void validate() const;
};

struct SweepRow {
  double ratio = 0.0;
  std::string item;
  std::uint64_t mask_seed = 0;
  std::uint64_t sample_seed = 0;
  double rmse = 0.0;
  double principal_rmse = 0.0;
  double baseline_rmse = 0.0;  // NaN when the baseline is disabled
  double observed_abs_residual = 0.0;
  double wall_time_s = 0.0;
};

struct RatioSummary {
  double ratio = 0.0;
  std::size_t samples = 0;
  SampleSummary rmse;
  double principal_rmse_mean = std::numeric_limits<double>::quiet_NaN();
  double baseline_rmse_mean = std::numeric_limits<double>::quiet_NaN();
  double observed_abs_residual_mean = std::numeric_limits<double>::quiet_NaN();
  DensityCurve kde;
};

struct SweepResult {
  std::vector<SweepRow> rows;  // sorted by (ratio, item, mask seed, sample seed)
  std::vector<RatioSummary> summaries;
};

// Deterministic mask seed of (ratio index, item, mask index).
std::uint64_t sweep_mask_seed(std::uint64_t seed, std::size_t ratio_index, std::size_t item, int mask);

SweepResult sparsity_sweep(const CascadeBundle& bundle, const Dataset& data, const SweepConfig& cfg,
                           const std::function<void(const SweepRow&)>& progress = {});

// ---------------------------------------------------------------------------
// Autoencoder-only evaluation: one snapshot, many random masks per ratio.
// ---------------------------------------------------------------------------

struct FaeEvalConfig {
  std::vector<double> ratios{0.1, 0.2, 0.3, 0.4, 0.5};
  int masks = 100;
  std::size_t item = 0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct FaeEvalRow {
  double ratio = 0.0;
  std::uint64_t mask_seed = 0;
  double rmse = 0.0;
};

struct FaeEvalResult {
  std::vector<FaeEvalRow> rows;
  std::vector<RatioSummary> summaries;  // only rmse and kde are filled
};

FaeEvalResult evaluate_fae(const Fae& fae, const Dataset& data, const FaeEvalConfig& cfg);

// ---------------------------------------------------------------------------
// CSV emission. Metrics files never contain timings, so reruns with the same
// configuration produce byte-identical files.
// ---------------------------------------------------------------------------

void write_sweep_metrics(const std::filesystem::path& path, const std::vector<SweepRow>& rows);
void write_fae_eval_metrics(const std::filesystem::path& path, const std::vector<FaeEvalRow>& rows);
void write_summary(const std::filesystem::path& path, const std::vector<RatioSummary>& summaries);
void write_kde(const std::filesystem::path& path, const DensityCurve& curve);
// kde_<ratio>.csv name for a ratio.
std::string kde_file_name(double ratio);
void write_latents(const std::filesystem::path& path, const std::vector<LatentRow>& rows);

}  // namespace cas
