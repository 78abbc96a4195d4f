#include "cassensing/experiments.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include "cassensing/rng.hpp"

#ifndef CASSENSE_GIT_DESCRIBE
#define CASSENSE_GIT_DESCRIBE "unknown"
#endif

namespace cas {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) {
    return "";
  }
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

bool valid_key(const std::string& key) {
  if (key.empty()) {
    return false;
  }
  return std::all_of(key.begin(), key.end(), [](char c) {
    return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_' || c == '.';
  });
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    part = trim(part);
    if (!part.empty()) {
      out.push_back(part);
    }
  }
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    fs::create_directories(path.parent_path());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw FormatError("cannot write " + path.string());
  }
  out << text;
  if (!out) {
    throw FormatError("short write to " + path.string());
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

Config Config::parse(const std::string& text, const std::string& origin) {
  Config c;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) {
      line.erase(hash);
    }
    line = trim(line);
    if (line.empty()) {
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    if (!valid_key(key)) {
      throw UsageError(origin + ":" + std::to_string(lineno) + ": invalid key '" + key + "'");
    }
    c.values_[key] = trim(line.substr(eq + 1));
  }
  return c;
}

Config Config::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw UsageError("cannot read config file " + path.string());
  }
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

void Config::set(const std::string& key, const std::string& value) {
  if (!valid_key(key)) {
    throw UsageError("invalid config key '" + key + "'");
  }
  values_[key] = trim(value);
}

void Config::set_assignment(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) {
    throw UsageError("expected key=value, got '" + assignment + "'");
  }
  set(trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

void Config::merge(const Config& other) {
  for (const auto& [k, v] : other.values_) {
    values_[k] = v;
  }
}

std::string Config::get_string(const std::string& key, const std::string& fallback) const {
  const auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

std::string Config::require_string(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end() || it->second.empty()) {
    throw UsageError("missing required setting '" + key + "'");
  }
  return it->second;
}

double Config::get_double(const std::string& key, double fallback) const {
  const auto it = values_.find(key);
  if (it == values_.end()) {
    return fallback;
  }
  try {
    std::size_t pos = 0;
    const double v = std::stod(it->second, &pos);
    if (pos != it->second.size()) {
      throw std::invalid_argument("trailing characters");
    }
    return v;
  } catch (const std::exception&) {
    throw UsageError("setting '" + key + "' is not a number: '" + it->second + "'");
  }
}

long long Config::get_int(const std::string& key, long long fallback) const {
  const auto it = values_.find(key);
  if (it == values_.end()) {
    return fallback;
  }
  long long v = 0;
  const auto& s = it->second;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw UsageError("setting '" + key + "' is not an integer: '" + s + "'");
  }
  return v;
}

std::uint64_t Config::get_u64(const std::string& key, std::uint64_t fallback) const {
  const auto it = values_.find(key);
  if (it == values_.end()) {
    return fallback;
  }
  std::uint64_t v = 0;
  const auto& s = it->second;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw UsageError("setting '" + key + "' is not an unsigned integer: '" + s + "'");
  }
  return v;
}

bool Config::get_bool(const std::string& key, bool fallback) const {
  const auto it = values_.find(key);
  if (it == values_.end()) {
    return fallback;
  }
  const std::string& v = it->second;
  if (v == "true" || v == "1" || v == "yes" || v == "on") {
    return true;
  }
  if (v == "false" || v == "0" || v == "no" || v == "off") {
    return false;
  }
  throw UsageError("setting '" + key + "' is not a boolean: '" + v + "'");
}

std::vector<double> Config::get_doubles(const std::string& key, const std::vector<double>& fallback) const {
  if (!has(key)) {
    return fallback;
  }
  std::vector<double> out;
  for (const auto& part : split_list(values_.at(key))) {
    Config tmp;
    tmp.values_["v"] = part;
    try {
      out.push_back(tmp.get_double("v", 0.0));
    } catch (const UsageError&) {
      throw UsageError("setting '" + key + "' has a non-numeric entry '" + part + "'");
    }
  }
  return out;
}

std::vector<int> Config::get_ints(const std::string& key, const std::vector<int>& fallback) const {
  if (!has(key)) {
    return fallback;
  }
  std::vector<int> out;
  for (const auto& part : split_list(values_.at(key))) {
    Config tmp;
    tmp.values_["v"] = part;
    try {
      out.push_back(static_cast<int>(tmp.get_int("v", 0)));
    } catch (const UsageError&) {
      throw UsageError("setting '" + key + "' has a non-integer entry '" + part + "'");
    }
  }
  return out;
}

void Config::check_keys(const std::set<std::string>& allowed) const {
  for (const auto& [k, v] : values_) {
    if (allowed.count(k) == 0) {
      throw UsageError("unknown setting '" + k + "'");
    }
  }
}

std::string Config::dump() const {
  std::string out;
  for (const auto& [k, v] : values_) {
    out += k + " = " + v + "\n";
  }
  return out;
}

json Config::to_json() const {
  json j = json::object();
  for (const auto& [k, v] : values_) {
    j[k] = v;
  }
  return j;
}

// ---------------------------------------------------------------------------
// Run directory
// ---------------------------------------------------------------------------

RunDirectory::RunDirectory(fs::path root, std::string command, const Config& config)
    : root_(std::move(root)), command_(std::move(command)), config_(config) {
  fs::create_directories(root_);
}

void RunDirectory::finalize() const {
  write_text(root_ / "config.snapshot", "# cassense " + command_ + "\n" + config_.dump());
  json manifest{{"format_version", 1},
                {"command", command_},
                {"git_describe", git_describe()},
                {"config", config_.to_json()},
                {"seeds", seeds_},
                {"wall_time_s", timings_},
                {"outputs", outputs_}};
  for (auto it = info_.begin(); it != info_.end(); ++it) {
    manifest[it.key()] = it.value();
  }
  write_text(root_ / "manifest.json", manifest.dump(2) + "\n");
}

std::string git_describe() { return CASSENSE_GIT_DESCRIBE; }

std::string format_double(double v) {
  if (std::isnan(v)) {
    return "nan";
  }
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ec == std::errc() ? ptr : buf);
}

// ---------------------------------------------------------------------------
// Config builders
// ---------------------------------------------------------------------------

WakeDatasetSpec wake_spec_from_config(const Config& c) {
  WakeDatasetSpec s;
  s.height = static_cast<int>(c.get_int("data.height", s.height));
  s.width = static_cast<int>(c.get_int("data.width", s.width));
  const auto ext = c.get_doubles("data.extent", {s.extent.x0, s.extent.y0, s.extent.x1, s.extent.y1});
  if (ext.size() != 4) {
    throw UsageError("data.extent needs four numbers x0,y0,x1,y1");
  }
  s.extent = Extent{ext[0], ext[1], ext[2], ext[3]};
  s.configs = static_cast<int>(c.get_int("data.configs", s.configs));
  s.snapshots_per_config = static_cast<int>(c.get_int("data.snapshots", s.snapshots_per_config));
  s.test_configs = static_cast<int>(c.get_int("data.test_configs", s.test_configs));
  s.cx_min = c.get_double("data.cx_min", s.cx_min);
  s.cx_max = c.get_double("data.cx_max", s.cx_max);
  s.cy_min = c.get_double("data.cy_min", s.cy_min);
  s.cy_max = c.get_double("data.cy_max", s.cy_max);
  s.radius_min = c.get_double("data.radius_min", s.radius_min);
  s.radius_max = c.get_double("data.radius_max", s.radius_max);
  s.wavelength_per_diameter = c.get_double("data.wavelength_per_diameter", s.wavelength_per_diameter);
  s.amp_large = c.get_double("data.amp_large", s.amp_large);
  s.amp_small = c.get_double("data.amp_small", s.amp_small);
  s.k_small = static_cast<int>(c.get_int("data.k_small", s.k_small));
  s.seed = c.get_u64("data.seed", s.seed);
  return s;
}

namespace {

nn::TrainConfig train_from_config(const Config& c, nn::TrainConfig t) {
  t.learning_rate = c.get_double("train.learning_rate", t.learning_rate);
  t.beta1 = c.get_double("train.beta1", t.beta1);
  t.beta2 = c.get_double("train.beta2", t.beta2);
  t.epsilon = c.get_double("train.epsilon", t.epsilon);
  t.batch_size = static_cast<int>(c.get_int("train.batch_size", t.batch_size));
  t.epochs = static_cast<int>(c.get_int("train.epochs", t.epochs));
  t.seed = c.get_u64("train.seed", t.seed);
  return t;
}

}  // namespace

FaeArchitecture fae_architecture_from_config(const Config& c, const Extent& extent) {
  FaeArchitecture a;
  a.extent = extent;
  a.fourier_features = static_cast<int>(c.get_int("fae.fourier_features", a.fourier_features));
  a.fourier_scale = c.get_double("fae.fourier_scale", a.fourier_scale);
  a.encoder_width = static_cast<int>(c.get_int("fae.encoder_width", a.encoder_width));
  a.encoder_hidden_layers = static_cast<int>(c.get_int("fae.encoder_layers", a.encoder_hidden_layers));
  a.latent_dim = static_cast<int>(c.get_int("fae.latent_dim", a.latent_dim));
  a.decoder_width = static_cast<int>(c.get_int("fae.decoder_width", a.decoder_width));
  a.decoder_hidden_layers = static_cast<int>(c.get_int("fae.decoder_layers", a.decoder_hidden_layers));
  a.validate();
  return a;
}

FaeTrainConfig fae_train_config_from_config(const Config& c) {
  FaeTrainConfig f;
  f.encoder_ratio = c.get_double("fae.encoder_ratio", f.encoder_ratio);
  f.loss.beta = c.get_double("fae.beta", f.loss.beta);
  f.max_decoder_points = static_cast<int>(c.get_int("fae.max_decoder_points", f.max_decoder_points));
  f.validation_snapshots = static_cast<int>(c.get_int("fae.validation_snapshots", f.validation_snapshots));
  f.train = train_from_config(c, f.train);
  f.train.validate();
  return f;
}

GuidanceConfig guidance_from_config(const Config& c, const GuidanceConfig& fallback) {
  GuidanceConfig g = fallback;
  g.sigma_c2 = c.get_double("guidance.sigma_c2", g.sigma_c2);
  if (c.has("guidance.mode")) {
    try {
      g.mode = parse_guidance_mode(c.get_string("guidance.mode", ""));
    } catch (const ParameterError& e) {
      throw UsageError(e.what());
    }
  }
  g.through_network = c.get_bool("guidance.through_network", g.through_network);
  g.validate();
  return g;
}

CascadeTrainConfig cascade_train_config_from_config(const Config& c) {
  CascadeTrainConfig t;
  t.cascade.r_train = c.get_double("cdm.r_train", t.cascade.r_train);
  t.cascade.ensemble_size = static_cast<int>(c.get_int("cdm.ensemble_size", t.cascade.ensemble_size));
  t.cascade.guidance = guidance_from_config(c, t.cascade.guidance);
  t.architecture.widths = c.get_ints("cdm.widths", t.architecture.widths);
  t.architecture.blocks_per_level = static_cast<int>(c.get_int("cdm.blocks_per_level", t.architecture.blocks_per_level));
  t.architecture.time_embed_dim = static_cast<int>(c.get_int("cdm.time_embed_dim", t.architecture.time_embed_dim));
  t.architecture.max_groups = static_cast<int>(c.get_int("cdm.max_groups", t.architecture.max_groups));
  t.diffusion_steps = static_cast<int>(c.get_int("cdm.steps", t.diffusion_steps));
  t.beta_min = c.get_double("cdm.beta_min", t.beta_min);
  t.beta_max = c.get_double("cdm.beta_max", t.beta_max);
  t.normalization_masks = static_cast<int>(c.get_int("cdm.normalization_masks", t.normalization_masks));
  t.train = train_from_config(c, t.train);
  t.train.validate();
  t.architecture.validate();
  t.cascade.validate();
  return t;
}

std::size_t find_item(const Dataset& data, const std::string& id) {
  if (data.items.empty()) {
    throw EmptyDomainError("dataset has no snapshots");
  }
  if (id.empty()) {
    const auto test = data.test_indices();
    return test.empty() ? 0 : test.front();
  }
  for (std::size_t i = 0; i < data.items.size(); ++i) {
    if (data.items[i].id == id) {
      return i;
    }
  }
  throw ParameterError("dataset has no snapshot with id '" + id + "'");
}

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

namespace {

void validate_ratios(const std::vector<double>& ratios) {
  if (ratios.empty()) {
    throw ParameterError("at least one sensing ratio is required");
  }
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    if (!(ratios[i] > 0.0 && ratios[i] <= 1.0)) {
      throw ParameterError("sensing ratios must lie in (0, 1]");
    }
    if (i > 0 && !(ratios[i] > ratios[i - 1])) {
      throw ParameterError("sensing ratios must be strictly increasing");
    }
  }
}

RatioSummary summarize_ratio(double ratio, const std::vector<double>& rmse) {
  RatioSummary s;
  s.ratio = ratio;
  s.samples = rmse.size();
  s.rmse = summarize(rmse);
  s.kde = kde_rmse(rmse);
  return s;
}

}  // namespace

void SweepConfig::validate() const {
  validate_ratios(ratios);
  if (masks_per_ratio < 1 || samples_per_mask < 1) {
    throw ParameterError("sweep needs at least one mask per ratio and one sample per mask");
  }
  if (items.empty()) {
    throw ParameterError("sweep needs at least one snapshot");
  }
  guidance.validate();
}

std::uint64_t sweep_mask_seed(std::uint64_t seed, std::size_t ratio_index, std::size_t item, int mask) {
  return derive_seed(seed, {0x6d61736b, ratio_index, item, static_cast<std::uint64_t>(mask)});
}

SweepResult sparsity_sweep(const CascadeBundle& bundle, const Dataset& data, const SweepConfig& cfg,
                           const std::function<void(const SweepRow&)>& progress) {
  cfg.validate();
  SweepResult result;
  for (std::size_t ri = 0; ri < cfg.ratios.size(); ++ri) {
    const double ratio = cfg.ratios[ri];
    std::vector<SweepRow> rows;
    for (std::size_t item : cfg.items) {
      const DatasetItem& it = data.items.at(item);
      const FieldSnapshot& s = it.snapshot;
      for (int k = 0; k < cfg.masks_per_ratio; ++k) {
        const std::uint64_t mseed = sweep_mask_seed(cfg.seed, ri, item, k);
        const SparseObservation obs = apply_mask(s, random_mask(s.grid, s.valid, ratio, mseed));
        const FieldSnapshot principal = reconstruct_principal(bundle.fae, obs, s.grid, s.valid);
        double baseline = std::nan("");
        if (cfg.baseline) {
          const std::vector<float> tps = thin_plate_interpolate(obs, s.grid, s.valid);
          baseline = rmse(tps, s.values, s.valid, s.channels);
        }
        const std::uint64_t base = derive_seed(cfg.seed, {0x73616d70, ri, item, static_cast<std::uint64_t>(k)});
        for (int j = 0; j < cfg.samples_per_mask; ++j) {
          const auto t0 = std::chrono::steady_clock::now();
          const std::uint64_t sseed = base + static_cast<std::uint64_t>(j);
          const ReconstructionResult r =
              reconstruct_with_principal(obs, principal, bundle.diffusion, cfg.guidance, sseed, &s);
          SweepRow row;
          row.ratio = ratio;
          row.item = it.id;
          row.mask_seed = mseed;
          row.sample_seed = sseed;
          row.rmse = *r.rmse;
          row.principal_rmse = *r.principal_rmse;
          row.baseline_rmse = baseline;
          row.observed_abs_residual = r.observed_mean_abs();
          row.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
          if (progress) {
            progress(row);
          }
          rows.push_back(row);
        }
      }
    }
    std::vector<double> rm;
    double pr = 0.0;
    double bl = 0.0;
    double ob = 0.0;
    for (const auto& r : rows) {
      rm.push_back(r.rmse);
      pr += r.principal_rmse;
      bl += r.baseline_rmse;
      ob += r.observed_abs_residual;
    }
    RatioSummary summary = summarize_ratio(ratio, rm);
    const double n = static_cast<double>(rows.size());
    summary.principal_rmse_mean = pr / n;
    summary.baseline_rmse_mean = bl / n;
    summary.observed_abs_residual_mean = ob / n;
    result.summaries.push_back(std::move(summary));
    result.rows.insert(result.rows.end(), rows.begin(), rows.end());
  }
  std::stable_sort(result.rows.begin(), result.rows.end(), [](const SweepRow& a, const SweepRow& b) {
    if (a.ratio != b.ratio) {
      return a.ratio < b.ratio;
    }
    if (a.item != b.item) {
      return a.item < b.item;
    }
    if (a.mask_seed != b.mask_seed) {
      return a.mask_seed < b.mask_seed;
    }
    return a.sample_seed < b.sample_seed;
  });
  return result;
}

// ---------------------------------------------------------------------------
// Autoencoder evaluation
// ---------------------------------------------------------------------------

void FaeEvalConfig::validate() const {
  validate_ratios(ratios);
  if (masks < 1) {
    throw ParameterError("autoencoder evaluation needs at least one mask per ratio");
  }
}

FaeEvalResult evaluate_fae(const Fae& fae, const Dataset& data, const FaeEvalConfig& cfg) {
  cfg.validate();
  const FieldSnapshot& s = data.items.at(cfg.item).snapshot;
  FaeEvalResult result;
  for (std::size_t ri = 0; ri < cfg.ratios.size(); ++ri) {
    std::vector<double> rm;
    for (int k = 0; k < cfg.masks; ++k) {
      const std::uint64_t mseed = sweep_mask_seed(cfg.seed, ri, cfg.item, k);
      const SparseObservation obs = apply_mask(s, random_mask(s.grid, s.valid, cfg.ratios[ri], mseed));
      const FieldSnapshot p = reconstruct_principal(fae, obs, s.grid, s.valid);
      const double e = rmse(p.values, s.values, s.valid, s.channels);
      result.rows.push_back({cfg.ratios[ri], mseed, e});
      rm.push_back(e);
    }
    result.summaries.push_back(summarize_ratio(cfg.ratios[ri], rm));
  }
  return result;
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

void write_sweep_metrics(const fs::path& path, const std::vector<SweepRow>& rows) {
  std::string out = "ratio,item,mask_seed,sample_seed,rmse,principal_rmse,baseline_rmse,observed_abs_residual\n";
  for (const auto& r : rows) {
    out += format_double(r.ratio) + "," + r.item + "," + std::to_string(r.mask_seed) + "," +
           std::to_string(r.sample_seed) + "," + format_double(r.rmse) + "," + format_double(r.principal_rmse) + "," +
           format_double(r.baseline_rmse) + "," + format_double(r.observed_abs_residual) + "\n";
  }
  write_text(path, out);
}

void write_fae_eval_metrics(const fs::path& path, const std::vector<FaeEvalRow>& rows) {
  std::string out = "ratio,mask_seed,rmse\n";
  for (const auto& r : rows) {
    out += format_double(r.ratio) + "," + std::to_string(r.mask_seed) + "," + format_double(r.rmse) + "\n";
  }
  write_text(path, out);
}

void write_summary(const fs::path& path, const std::vector<RatioSummary>& summaries) {
  std::string out =
      "ratio,samples,rmse_mean,rmse_std,rmse_min,rmse_max,principal_rmse_mean,baseline_rmse_mean,"
      "observed_abs_residual_mean,kde_bandwidth\n";
  for (const auto& s : summaries) {
    out += format_double(s.ratio) + "," + std::to_string(s.samples) + ",";
    out += format_double(s.rmse.mean) + "," + format_double(s.rmse.stddev) + "," + format_double(s.rmse.min) + "," +
           format_double(s.rmse.max) + "," + format_double(s.principal_rmse_mean) + "," +
           format_double(s.baseline_rmse_mean) + "," + format_double(s.observed_abs_residual_mean) + "," +
           format_double(s.kde.bandwidth) + "\n";
  }
  write_text(path, out);
}

void write_kde(const fs::path& path, const DensityCurve& curve) {
  std::string out = "x,density\n";
  for (std::size_t i = 0; i < curve.x.size(); ++i) {
    out += format_double(curve.x[i]) + "," + format_double(curve.density[i]) + "\n";
  }
  write_text(path, out);
}

std::string kde_file_name(double ratio) { return "kde_" + format_double(ratio) + ".csv"; }

void write_latents(const fs::path& path, const std::vector<LatentRow>& rows) {
  std::string out = "id";
  const std::size_t dim = rows.empty() ? 0 : rows.front().z.dim();
  for (std::size_t k = 0; k < dim; ++k) {
    out += ",z" + std::to_string(k);
  }
  out += "\n";
  for (const auto& r : rows) {
    out += r.id;
    for (double v : r.z.values) {
      out += "," + format_double(v);
    }
    out += "\n";
  }
  write_text(path, out);
}

}  // namespace cas
