#include "cassensing/cascade.hpp"

#include <cmath>
#include <fstream>

#include "cassensing/error.hpp"
#include "cassensing/metrics.hpp"
#include "cassensing/rng.hpp"

namespace cas {

namespace fs = std::filesystem;
using nlohmann::json;

void CascadeConfig::validate() const {
  if (!(r_train > 0.0 && r_train < 1.0)) {
    throw ParameterError("training sensing ratio must lie strictly inside (0, 1)");
  }
  if (ensemble_size < 1) {
    throw ParameterError("ensemble size must be >= 1");
  }
  guidance.validate();
}

json CascadeConfig::to_json() const {
  return json{{"r_train", r_train}, {"guidance", guidance.to_json()}, {"ensemble_size", ensemble_size}};
}

CascadeConfig CascadeConfig::from_json(const json& j) {
  CascadeConfig c;
  c.r_train = j.at("r_train").get<double>();
  c.guidance = GuidanceConfig::from_json(j.at("guidance"));
  c.ensemble_size = j.at("ensemble_size").get<int>();
  c.validate();
  return c;
}

namespace {

Field to_field(const FieldSnapshot& s) { return Field(s.values.begin(), s.values.end()); }

// (u - m_hat) / scale, zero at invalid points.
Field scaled_residual(const FieldSnapshot& truth, const FieldSnapshot& principal, double scale) {
  const auto m = static_cast<std::size_t>(truth.channels);
  Field d(truth.values.size(), 0.0);
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (truth.valid[i / m]) {
      d[i] = (static_cast<double>(truth.values[i]) - static_cast<double>(principal.values[i])) / scale;
    }
  }
  return d;
}

struct CascadeBatch {
  std::vector<std::size_t> items;
  std::uint64_t seed = 0;
};

}  // namespace

double residual_scale(const Fae& fae, const Dataset& data, std::span<const std::size_t> items, double ratio, int masks,
                      std::uint64_t seed) {
  if (items.empty() || masks < 1) {
    throw EmptyDomainError("residual normalization needs at least one snapshot and one mask");
  }
  double sum = 0.0;
  double sq = 0.0;
  std::size_t count = 0;
  for (std::size_t k = 0; k < items.size(); ++k) {
    const FieldSnapshot& s = data.items.at(items[k]).snapshot;
    const auto m = static_cast<std::size_t>(s.channels);
    for (int j = 0; j < masks; ++j) {
      const SensorMask mask = random_mask(s.grid, s.valid, ratio, derive_seed(seed, {k, static_cast<std::uint64_t>(j)}));
      const FieldSnapshot p = reconstruct_principal(fae, apply_mask(s, mask), s.grid, s.valid);
      for (std::size_t i = 0; i < s.values.size(); ++i) {
        if (s.valid[i / m]) {
          const double d = static_cast<double>(s.values[i]) - static_cast<double>(p.values[i]);
          sum += d;
          sq += d * d;
          ++count;
        }
      }
    }
  }
  const double mean = sum / static_cast<double>(count);
  const double var = sq / static_cast<double>(count) - mean * mean;
  if (!(var > 0.0)) {
    return 1.0;
  }
  return std::sqrt(var);
}

DiffusionModel mask_cascade_train(const Dataset& data, std::span<const std::size_t> train_items, const Fae& fae,
                                  const CascadeTrainConfig& cfg, nn::TrainHistory* history,
                                  const std::function<void(int, double)>& on_epoch) {
  cfg.cascade.validate();
  if (train_items.empty()) {
    throw EmptyDomainError("mask-cascade training needs a non-empty dataset");
  }
  const std::uint64_t checksum = nn::param_checksum(fae);
  const DomainGrid& grid = data.grid();
  if (fae.architecture().channels != data.items.front().snapshot.channels) {
    throw ShapeError("autoencoder channel count does not match the dataset");
  }
  UNetArchitecture arch = cfg.architecture;
  arch.channels = fae.architecture().channels;

  DiffusionModel model;
  model.net = UNet<float>(arch, derive_seed(cfg.train.seed, {0x636466}));
  model.schedule = make_schedule(cfg.diffusion_steps, cfg.beta_min, cfg.beta_max);
  model.height = grid.height();
  model.width = grid.width();
  model.residual_scale = residual_scale(fae, data, train_items, cfg.cascade.r_train, cfg.normalization_masks,
                                        derive_seed(cfg.train.seed, {0x6e6f726d}));

  const std::vector<std::size_t> train(train_items.begin(), train_items.end());
  const auto batch_size = static_cast<std::size_t>(cfg.train.batch_size);
  const std::uint64_t seed = cfg.train.seed;
  const double r_train = cfg.cascade.r_train;
  const double scale_const = model.residual_scale;

  std::function<std::vector<CascadeBatch>(int)> batches = [&](int epoch) {
    std::vector<std::size_t> order = train;
    Rng rng(derive_seed(seed, {0x6570, static_cast<std::uint64_t>(epoch)}));
    rng.partial_shuffle(order, order.size());
    std::vector<CascadeBatch> out;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      CascadeBatch b;
      b.items.assign(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + batch_size)));
      b.seed = derive_seed(seed, {0x6373, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(out.size())});
      out.push_back(std::move(b));
    }
    return out;
  };

  std::function<double(const UNet<float>&, const CascadeBatch&, UNet<float>&)> loss_fn =
      [&](const UNet<float>& net, const CascadeBatch& b, UNet<float>& g) {
        double total = 0.0;
        const double w = 1.0 / static_cast<double>(b.items.size());
        for (std::size_t p = 0; p < b.items.size(); ++p) {
          const FieldSnapshot& s = data.items[b.items[p]].snapshot;
          const SensorMask mask = random_mask(s.grid, s.valid, r_train, derive_seed(b.seed, {p, 0x6d61736b}));
          const FieldSnapshot principal = reconstruct_principal(fae, apply_mask(s, mask), s.grid, s.valid);
          const Field d0 = scaled_residual(s, principal, scale_const);
          const Field cond = to_field(principal);
          total += w * train_step(net, grid.height(), grid.width(), d0, cond, model.schedule,
                                  derive_seed(b.seed, {p, 0x6e6f6973}), &g, w);
        }
        return total;
      };

  nn::TrainHistory h = nn::train_loop<UNet<float>, CascadeBatch>(model.net, loss_fn, batches, cfg.train, on_epoch);
  if (history != nullptr) {
    *history = std::move(h);
  }
  if (nn::param_checksum(fae) != checksum) {
    throw IntegrityError("autoencoder parameters changed during mask-cascade training");
  }
  return model;
}

double ReconstructionResult::observed_mean_abs() const {
  if (observed_residual.empty()) {
    throw EmptyDomainError("reconstruction has no observed points");
  }
  double s = 0.0;
  for (double v : observed_residual) {
    s += std::abs(v);
  }
  return s / static_cast<double>(observed_residual.size());
}

ReconstructionResult reconstruct_with_principal(const SparseObservation& obs, const FieldSnapshot& principal,
                                                const DiffusionModel& diffusion, const GuidanceConfig& guidance,
                                                std::uint64_t seed, const FieldSnapshot* truth) {
  const DomainGrid& grid = principal.grid;
  const auto m = static_cast<std::size_t>(principal.channels);
  if (grid.height() != diffusion.height || grid.width() != diffusion.width ||
      static_cast<int>(m) != diffusion.net.architecture().channels) {
    throw ShapeError("observation grid does not match the diffusion model");
  }
  if (obs.channels != principal.channels) {
    throw ShapeError("observation channel count does not match the models");
  }
  Measurement meas;
  meas.channels = obs.channels;
  meas.indices = obs.mask.indices;
  meas.values.assign(obs.values.begin(), obs.values.end());
  meas.principal = to_field(principal);
  meas.validity = principal.valid;
  meas.scale = diffusion.residual_scale;

  const UNetDenoiser<float> den = diffusion.denoiser();
  const Field d = guided_sample(meas.principal, &meas, den, diffusion.schedule, guidance, seed, principal.valid);

  ReconstructionResult r;
  r.seed = seed;
  r.principal = principal;
  r.residual = principal;
  r.full = principal;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (principal.valid[i / m]) {
      const auto dv = static_cast<float>(diffusion.residual_scale * d[i]);
      r.residual.values[i] = dv;
      r.full.values[i] = principal.values[i] + dv;
    } else {
      r.residual.values[i] = 0.0f;
      r.full.values[i] = 0.0f;
    }
  }
  r.observed_residual.resize(obs.values.size());
  for (std::size_t p = 0; p < obs.mask.indices.size(); ++p) {
    for (std::size_t k = 0; k < m; ++k) {
      r.observed_residual[p * m + k] = static_cast<double>(obs.values[p * m + k]) -
                                       static_cast<double>(r.full.values[obs.mask.indices[p] * m + k]);
    }
  }
  if (truth != nullptr) {
    r.rmse = rmse(r.full.values, truth->values, truth->valid, truth->channels);
    r.principal_rmse = rmse(r.principal.values, truth->values, truth->valid, truth->channels);
  }
  return r;
}

ReconstructionResult reconstruct(const SparseObservation& obs, const DomainGrid& grid,
                                 std::span<const std::uint8_t> validity, const Fae& fae, const DiffusionModel& diffusion,
                                 const GuidanceConfig& guidance, std::uint64_t seed, const FieldSnapshot* truth) {
  const FieldSnapshot principal = reconstruct_principal(fae, obs, grid, validity);
  return reconstruct_with_principal(obs, principal, diffusion, guidance, seed, truth);
}

EnsembleResult ensemble_reconstruct(const SparseObservation& obs, const DomainGrid& grid,
                                    std::span<const std::uint8_t> validity, const Fae& fae,
                                    const DiffusionModel& diffusion, const GuidanceConfig& guidance, int n,
                                    std::uint64_t base_seed, const FieldSnapshot* truth) {
  if (n < 1) {
    throw ParameterError("ensemble size must be >= 1");
  }
  const FieldSnapshot principal = reconstruct_principal(fae, obs, grid, validity);
  EnsembleResult out;
  std::vector<double> acc(principal.values.size(), 0.0);
  for (int k = 0; k < n; ++k) {
    ReconstructionResult r =
        reconstruct_with_principal(obs, principal, diffusion, guidance, base_seed + static_cast<std::uint64_t>(k), truth);
    for (std::size_t i = 0; i < acc.size(); ++i) {
      acc[i] += r.full.values[i];
    }
    if (r.rmse) {
      out.rmse.push_back(*r.rmse);
    }
    out.samples.push_back(std::move(r));
  }
  out.mean = principal;
  for (std::size_t i = 0; i < acc.size(); ++i) {
    out.mean.values[i] = n == 1 ? out.samples.front().full.values[i] : static_cast<float>(acc[i] / n);
  }
  return out;
}

void save_bundle(const CascadeBundle& bundle, const fs::path& dir, const json& extra) {
  fs::create_directories(dir);
  save_fae(bundle.fae, dir / "fae.json");
  save_diffusion(bundle.diffusion, dir / "diffusion.json");
  json manifest{{"format_version", kBundleFormatVersion},
                {"data_format_version", 1},
                {"autoencoder", "fae.json"},
                {"diffusion", "diffusion.json"},
                {"r_train", bundle.config.r_train},
                {"guidance", bundle.config.guidance.to_json()},
                {"ensemble_size", bundle.config.ensemble_size},
                {"residual_scale", bundle.diffusion.residual_scale},
                {"autoencoder_checksum", nn::param_checksum(bundle.fae)}};
  if (extra.is_object()) {
    for (auto it = extra.begin(); it != extra.end(); ++it) {
      manifest[it.key()] = it.value();
    }
  }
  std::ofstream out(dir / "cascade.json", std::ios::trunc);
  if (!out) {
    throw FormatError("cannot write " + (dir / "cascade.json").string());
  }
  out << manifest.dump(2) << '\n';
}

CascadeBundle load_bundle(const fs::path& dir) {
  const fs::path manifest_path = dir / "cascade.json";
  std::ifstream in(manifest_path);
  if (!in) {
    throw FormatError("missing cascade manifest " + manifest_path.string());
  }
  CascadeBundle b;
  try {
    const json j = json::parse(in);
    if (j.at("format_version").get<int>() != kBundleFormatVersion) {
      throw FormatError("unsupported cascade bundle format_version");
    }
    b.fae = load_fae(dir / j.at("autoencoder").get<std::string>());
    b.diffusion = load_diffusion(dir / j.at("diffusion").get<std::string>());
    b.config.r_train = j.at("r_train").get<double>();
    b.config.guidance = GuidanceConfig::from_json(j.at("guidance"));
    b.config.ensemble_size = j.at("ensemble_size").get<int>();
    b.config.validate();
    if (j.at("autoencoder_checksum").get<std::uint64_t>() != nn::param_checksum(b.fae)) {
      throw IntegrityError("autoencoder checkpoint does not match the cascade manifest checksum");
    }
  } catch (const json::exception& e) {
    throw FormatError("malformed cascade manifest: " + std::string(e.what()));
  }
  return b;
}

}  // namespace cas
