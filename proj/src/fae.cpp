#include "cassensing/fae.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cassensing/error.hpp"
#include "cassensing/metrics.hpp"
#include "cassensing/rng.hpp"

namespace cas {

using nlohmann::json;
using nn::Matrix;

void FaeArchitecture::validate() const {
  if (channels < 1 || coord_dim != 2 || fourier_features < 1 || encoder_width < 1 || encoder_hidden_layers < 1 ||
      latent_dim < 1 || decoder_width < 1 || decoder_hidden_layers < 1) {
    throw ParameterError("invalid functional autoencoder architecture");
  }
  if (!(fourier_scale > 0.0)) {
    throw ParameterError("Fourier feature scale must be positive");
  }
  if (!(extent.x1 > extent.x0) || !(extent.y1 > extent.y0)) {
    throw ParameterError("autoencoder coordinate extent must be non-degenerate");
  }
}

json FaeArchitecture::to_json() const {
  return json{{"channels", channels},
              {"coord_dim", coord_dim},
              {"fourier_features", fourier_features},
              {"fourier_scale", fourier_scale},
              {"encoder_width", encoder_width},
              {"encoder_hidden_layers", encoder_hidden_layers},
              {"latent_dim", latent_dim},
              {"decoder_width", decoder_width},
              {"decoder_hidden_layers", decoder_hidden_layers},
              {"extent", {extent.x0, extent.y0, extent.x1, extent.y1}}};
}

FaeArchitecture FaeArchitecture::from_json(const json& j) {
  FaeArchitecture a;
  a.channels = j.at("channels").get<int>();
  a.coord_dim = j.at("coord_dim").get<int>();
  a.fourier_features = j.at("fourier_features").get<int>();
  a.fourier_scale = j.at("fourier_scale").get<double>();
  a.encoder_width = j.at("encoder_width").get<int>();
  a.encoder_hidden_layers = j.at("encoder_hidden_layers").get<int>();
  a.latent_dim = j.at("latent_dim").get<int>();
  a.decoder_width = j.at("decoder_width").get<int>();
  a.decoder_hidden_layers = j.at("decoder_hidden_layers").get<int>();
  const auto e = j.at("extent").get<std::vector<double>>();
  if (e.size() != 4) {
    throw FormatError("autoencoder extent must have 4 entries");
  }
  a.extent = Extent{e[0], e[1], e[2], e[3]};
  a.validate();
  return a;
}

namespace {

template <class T>
Matrix<T> unit_coords(std::span<const Coord> coords, const Extent& e, const std::vector<std::size_t>* order) {
  Matrix<T> x(static_cast<Eigen::Index>(coords.size()), 2);
  for (std::size_t p = 0; p < coords.size(); ++p) {
    const Coord& c = coords[order != nullptr ? (*order)[p] : p];
    x(static_cast<Eigen::Index>(p), 0) = static_cast<T>((c[0] - e.x0) / (e.x1 - e.x0));
    x(static_cast<Eigen::Index>(p), 1) = static_cast<T>((c[1] - e.y0) / (e.y1 - e.y0));
  }
  return x;
}

std::vector<int> mlp_widths(int in, int width, int hidden, int out) {
  std::vector<int> w{in};
  for (int i = 0; i < hidden; ++i) {
    w.push_back(width);
  }
  w.push_back(out);
  return w;
}

}  // namespace

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

template <class T>
FaeEncoder<T>::FaeEncoder(const FaeArchitecture& arch)
    : arch_(arch),
      fourier_(arch.fourier_features, arch.coord_dim),
      kappa_(mlp_widths(2 * arch.fourier_features + arch.coord_dim + arch.channels, arch.encoder_width,
                        arch.encoder_hidden_layers, arch.encoder_width)),
      rho_(arch.encoder_width, arch.latent_dim) {
  arch.validate();
}

template <class T>
void FaeEncoder<T>::init(Rng& rng, double fourier_scale) {
  fourier_.init(fourier_scale, rng);
  kappa_.init(rng);
  rho_.init(rng);
}

template <class T>
Matrix<T> FaeEncoder<T>::features(std::span<const Coord> coords, std::span<const float> values,
                                  const std::vector<std::size_t>& order) const {
  const auto c = static_cast<std::size_t>(arch_.channels);
  const Matrix<T> emb = fourier_.forward(unit_coords<T>(coords, arch_.extent, &order));
  Matrix<T> x(emb.rows(), emb.cols() + arch_.channels);
  x.leftCols(emb.cols()) = emb;
  for (std::size_t p = 0; p < order.size(); ++p) {
    for (std::size_t k = 0; k < c; ++k) {
      x(static_cast<Eigen::Index>(p), emb.cols() + static_cast<Eigen::Index>(k)) =
          static_cast<T>(values[order[p] * c + k]);
    }
  }
  return x;
}

template <class T>
LatentVector FaeEncoder<T>::encode(std::span<const Coord> coords, std::span<const float> values, Cache* cache) const {
  const auto c = static_cast<std::size_t>(arch_.channels);
  if (coords.empty()) {
    throw EmptyDomainError("cannot encode an empty observation");
  }
  if (values.size() != coords.size() * c) {
    throw ShapeError("observation has " + std::to_string(values.size()) + " values for " +
                     std::to_string(coords.size()) + " points and " + std::to_string(c) + " channels");
  }
  std::vector<std::size_t> order(coords.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (coords[a] != coords[b]) {
      return coords[a] < coords[b];
    }
    return std::lexicographical_compare(values.begin() + static_cast<std::ptrdiff_t>(a * c),
                                        values.begin() + static_cast<std::ptrdiff_t>((a + 1) * c),
                                        values.begin() + static_cast<std::ptrdiff_t>(b * c),
                                        values.begin() + static_cast<std::ptrdiff_t>((b + 1) * c));
  });
  const Matrix<T> h = kappa_.forward(features(coords, values, order), cache != nullptr ? &cache->kappa : nullptr);
  Matrix<T> pooled = Matrix<T>::Zero(1, h.cols());
  for (Eigen::Index r = 0; r < h.rows(); ++r) {
    pooled += h.row(r);
  }
  pooled /= static_cast<T>(h.rows());
  const Matrix<T> z = rho_.forward(pooled);
  LatentVector out{std::vector<double>(static_cast<std::size_t>(z.cols()))};
  for (Eigen::Index k = 0; k < z.cols(); ++k) {
    out.values[static_cast<std::size_t>(k)] = static_cast<double>(z(0, k));
  }
  if (cache != nullptr) {
    cache->order = std::move(order);
    cache->pooled = std::move(pooled);
    cache->points = coords.size();
  }
  return out;
}

template <class T>
LatentVector FaeEncoder<T>::encode(const SparseObservation& obs, Cache* cache) const {
  if (obs.channels != arch_.channels) {
    throw ShapeError("observation channel count does not match the encoder");
  }
  return encode(obs.coords, obs.values, cache);
}

template <class T>
void FaeEncoder<T>::backward(const Cache& cache, std::span<const double> dz, FaeEncoder* grad) const {
  if (dz.size() != static_cast<std::size_t>(arch_.latent_dim)) {
    throw ShapeError("latent gradient has the wrong dimension");
  }
  Matrix<T> dzm(1, static_cast<Eigen::Index>(dz.size()));
  for (std::size_t k = 0; k < dz.size(); ++k) {
    dzm(0, static_cast<Eigen::Index>(k)) = static_cast<T>(dz[k]);
  }
  const Matrix<T> dpooled = rho_.backward(cache.pooled, dzm, grad != nullptr ? &grad->rho_ : nullptr);
  const Matrix<T> dh = Matrix<T>::Ones(static_cast<Eigen::Index>(cache.points), 1) *
                       (dpooled / static_cast<T>(cache.points));
  kappa_.backward(cache.kappa, dh, grad != nullptr ? &grad->kappa_ : nullptr, false);
}

// ---------------------------------------------------------------------------
// Decoder
// ---------------------------------------------------------------------------

template <class T>
FaeDecoder<T>::FaeDecoder(const FaeArchitecture& arch)
    : arch_(arch),
      fourier_(arch.fourier_features, arch.coord_dim),
      gamma_(mlp_widths(arch.latent_dim + 2 * arch.fourier_features + arch.coord_dim, arch.decoder_width,
                        arch.decoder_hidden_layers, arch.channels)) {
  arch.validate();
}

template <class T>
void FaeDecoder<T>::init(Rng& rng, double fourier_scale) {
  fourier_.init(fourier_scale, rng);
  gamma_.init(rng);
}

template <class T>
std::vector<double> FaeDecoder<T>::decode(const LatentVector& z, std::span<const Coord> coords, Cache* cache) const {
  if (z.dim() != static_cast<std::size_t>(arch_.latent_dim)) {
    throw ShapeError("latent vector has dimension " + std::to_string(z.dim()) + ", decoder expects " +
                     std::to_string(arch_.latent_dim));
  }
  if (coords.empty()) {
    throw EmptyDomainError("cannot decode at zero coordinates");
  }
  const auto dz = static_cast<Eigen::Index>(z.dim());
  const auto input = [&](std::span<const Coord> pts) {
    const Matrix<T> emb = fourier_.forward(unit_coords<T>(pts, arch_.extent, nullptr));
    Matrix<T> x(emb.rows(), dz + emb.cols());
    for (Eigen::Index k = 0; k < dz; ++k) {
      x.col(k).setConstant(static_cast<T>(z.values[static_cast<std::size_t>(k)]));
    }
    x.rightCols(emb.cols()) = emb;
    return x;
  };
  const auto c = static_cast<std::size_t>(arch_.channels);
  std::vector<double> out(coords.size() * c);
  if (cache != nullptr) {
    const Matrix<T> y = gamma_.forward(input(coords), &cache->gamma);
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = static_cast<double>(y.data()[i]);
    }
    return out;
  }
  // Inference: one point at a time, so a point's value never depends on
  // which other points are decoded with it.
  for (std::size_t p = 0; p < coords.size(); ++p) {
    const Matrix<T> y = gamma_.forward_rows(input(coords.subspan(p, 1)));
    for (std::size_t k = 0; k < c; ++k) {
      out[p * c + k] = static_cast<double>(y(0, static_cast<Eigen::Index>(k)));
    }
  }
  return out;
}

template <class T>
std::vector<double> FaeDecoder<T>::backward(const Cache& cache, std::span<const double> dvalues, FaeDecoder* grad) const {
  const auto rows = cache.gamma.inputs.front().rows();
  if (dvalues.size() != static_cast<std::size_t>(rows) * static_cast<std::size_t>(arch_.channels)) {
    throw ShapeError("decoder output gradient has the wrong size");
  }
  Matrix<T> dy(rows, arch_.channels);
  for (std::size_t i = 0; i < dvalues.size(); ++i) {
    dy.data()[i] = static_cast<T>(dvalues[i]);
  }
  const Matrix<T> dx = gamma_.backward(cache.gamma, dy, grad != nullptr ? &grad->gamma_ : nullptr, true);
  std::vector<double> dz(static_cast<std::size_t>(arch_.latent_dim), 0.0);
  const nn::RowVector<T> colsum = dx.leftCols(arch_.latent_dim).colwise().sum();
  for (std::size_t k = 0; k < dz.size(); ++k) {
    dz[k] = static_cast<double>(colsum(static_cast<Eigen::Index>(k)));
  }
  return dz;
}

template <class T>
FunctionalAutoencoder<T>::FunctionalAutoencoder(const FaeArchitecture& arch, std::uint64_t seed)
    : encoder_(arch), decoder_(arch) {
  Rng rng(derive_seed(seed, {0x666165}));
  encoder_.init(rng, arch.fourier_scale);
  decoder_.init(rng, arch.fourier_scale);
}

// ---------------------------------------------------------------------------
// Loss and reconstruction
// ---------------------------------------------------------------------------

template <class T>
double fae_loss(const FunctionalAutoencoder<T>& model, const ComplementSplit& split, const RegularizedLossConfig& cfg,
                FunctionalAutoencoder<T>* grad, double scale) {
  if (!(cfg.beta >= 0.0)) {
    throw ParameterError("latent regularisation weight must be non-negative");
  }
  if (split.encoder.size() == 0 || split.decoder.size() == 0) {
    throw EmptyDomainError("complement split has an empty encoder or decoder set");
  }
  typename FaeEncoder<T>::Cache enc_cache;
  typename FaeDecoder<T>::Cache dec_cache;
  const bool need_grad = grad != nullptr;
  const LatentVector z = model.encoder().encode(split.encoder, need_grad ? &enc_cache : nullptr);
  const std::vector<double> pred =
      model.decoder().decode(z, split.decoder.coords, need_grad ? &dec_cache : nullptr);
  const std::size_t count = pred.size();
  double sq = 0.0;
  std::vector<double> dpred(need_grad ? count : 0);
  for (std::size_t i = 0; i < count; ++i) {
    const double e = pred[i] - static_cast<double>(split.decoder.values[i]);
    sq += e * e;
    if (need_grad) {
      dpred[i] = scale * e / static_cast<double>(count);
    }
  }
  double z2 = 0.0;
  for (double v : z.values) {
    z2 += v * v;
  }
  const double loss = 0.5 * sq / static_cast<double>(count) + cfg.beta * z2;
  if (need_grad) {
    std::vector<double> dz = model.decoder().backward(dec_cache, dpred, &grad->decoder());
    for (std::size_t k = 0; k < dz.size(); ++k) {
      dz[k] += scale * 2.0 * cfg.beta * z.values[k];
    }
    model.encoder().backward(enc_cache, dz, &grad->encoder());
  }
  return loss;
}

template <class T>
FieldSnapshot reconstruct_principal(const FunctionalAutoencoder<T>& model, const SparseObservation& obs,
                                    const DomainGrid& grid, std::span<const std::uint8_t> validity) {
  if (validity.size() != grid.size()) {
    throw ShapeError("validity flags do not match the target grid");
  }
  const LatentVector z = model.encoder().encode(obs);
  const std::vector<double> values = model.decoder().decode(z, grid.coords());
  const auto c = static_cast<std::size_t>(model.architecture().channels);
  FieldSnapshot out{grid, static_cast<int>(c), std::vector<float>(values.size(), 0.0f),
                    std::vector<std::uint8_t>(validity.begin(), validity.end())};
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (validity[i]) {
      for (std::size_t k = 0; k < c; ++k) {
        out.values[i * c + k] = static_cast<float>(values[i * c + k]);
      }
    }
  }
  return out;
}

template class FaeEncoder<float>;
template class FaeEncoder<double>;
template class FaeDecoder<float>;
template class FaeDecoder<double>;
template class FunctionalAutoencoder<float>;
template class FunctionalAutoencoder<double>;
template double fae_loss(const FunctionalAutoencoder<float>&, const ComplementSplit&, const RegularizedLossConfig&,
                         FunctionalAutoencoder<float>*, double);
template double fae_loss(const FunctionalAutoencoder<double>&, const ComplementSplit&, const RegularizedLossConfig&,
                         FunctionalAutoencoder<double>*, double);
template FieldSnapshot reconstruct_principal(const FunctionalAutoencoder<float>&, const SparseObservation&,
                                             const DomainGrid&, std::span<const std::uint8_t>);
template FieldSnapshot reconstruct_principal(const FunctionalAutoencoder<double>&, const SparseObservation&,
                                             const DomainGrid&, std::span<const std::uint8_t>);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

struct FaeBatch {
  std::vector<std::size_t> items;
  std::uint64_t seed = 0;
};

SparseObservation subsample(const SparseObservation& obs, std::size_t k, std::uint64_t seed) {
  if (k == 0 || obs.size() <= k) {
    return obs;
  }
  std::vector<std::size_t> pos(obs.size());
  std::iota(pos.begin(), pos.end(), std::size_t{0});
  Rng rng(seed);
  rng.partial_shuffle(pos, k);
  pos.resize(k);
  std::sort(pos.begin(), pos.end());
  const auto c = static_cast<std::size_t>(obs.channels);
  SparseObservation out;
  out.channels = obs.channels;
  out.mask.ratio = obs.mask.ratio;
  out.mask.seed = seed;
  for (std::size_t p : pos) {
    out.mask.indices.push_back(obs.mask.indices[p]);
    out.coords.push_back(obs.coords[p]);
    for (std::size_t ch = 0; ch < c; ++ch) {
      out.values.push_back(obs.values[p * c + ch]);
    }
  }
  return out;
}

std::vector<std::size_t> spread_subset(std::span<const std::size_t> items, int count) {
  if (count <= 0 || static_cast<std::size_t>(count) >= items.size()) {
    return {items.begin(), items.end()};
  }
  std::vector<std::size_t> out;
  for (int i = 0; i < count; ++i) {
    out.push_back(items[static_cast<std::size_t>(i) * items.size() / static_cast<std::size_t>(count)]);
  }
  return out;
}

}  // namespace

double fae_validation_rmse(const Fae& model, const Dataset& data, std::span<const std::size_t> items,
                           double encoder_ratio, std::uint64_t seed) {
  if (items.empty()) {
    return std::nan("");
  }
  double total = 0.0;
  for (std::size_t k = 0; k < items.size(); ++k) {
    const FieldSnapshot& s = data.items[items[k]].snapshot;
    const SensorMask mask = random_mask(s.grid, s.valid, encoder_ratio, derive_seed(seed, {k}));
    const FieldSnapshot m = reconstruct_principal(model, apply_mask(s, mask), s.grid, s.valid);
    total += rmse(m.values, s.values, s.valid, s.channels);
  }
  return total / static_cast<double>(items.size());
}

FaeTrainResult train_fae(Fae& model, const Dataset& data, std::span<const std::size_t> train_items,
                         std::span<const std::size_t> validation_items, const FaeTrainConfig& cfg,
                         const std::function<void(int, double, double)>& on_epoch) {
  if (train_items.empty()) {
    throw EmptyDomainError("autoencoder training needs a non-empty dataset");
  }
  if (!(cfg.encoder_ratio > 0.0 && cfg.encoder_ratio < 1.0)) {
    throw ParameterError("encoder ratio must lie strictly inside (0, 1)");
  }
  const std::vector<std::size_t> train(train_items.begin(), train_items.end());
  const std::vector<std::size_t> val = spread_subset(validation_items, cfg.validation_snapshots);
  const auto batch_size = static_cast<std::size_t>(cfg.train.batch_size);
  const std::uint64_t seed = cfg.train.seed;

  std::function<std::vector<FaeBatch>(int)> batches = [&](int epoch) {
    std::vector<std::size_t> order = train;
    Rng rng(derive_seed(seed, {0x6570, static_cast<std::uint64_t>(epoch)}));
    rng.partial_shuffle(order, order.size());
    std::vector<FaeBatch> out;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      FaeBatch b;
      b.items.assign(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + batch_size)));
      b.seed = derive_seed(seed, {static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(out.size())});
      out.push_back(std::move(b));
    }
    return out;
  };

  std::function<double(const Fae&, const FaeBatch&, Fae&)> loss_fn = [&](const Fae& m, const FaeBatch& b, Fae& g) {
    double total = 0.0;
    const double scale = 1.0 / static_cast<double>(b.items.size());
    for (std::size_t p = 0; p < b.items.size(); ++p) {
      const FieldSnapshot& s = data.items[b.items[p]].snapshot;
      ComplementSplit split = complement_split(s, cfg.encoder_ratio, derive_seed(b.seed, {p}));
      if (cfg.max_decoder_points > 0) {
        split.decoder = subsample(split.decoder, static_cast<std::size_t>(cfg.max_decoder_points),
                                  derive_seed(b.seed, {p, 0x646563}));
      }
      total += scale * fae_loss(m, split, cfg.loss, &g, scale);
    }
    return total;
  };

  FaeTrainResult result;
  std::function<void(int, double)> hook = [&](int epoch, double loss) {
    const double v = fae_validation_rmse(model, data, val, cfg.encoder_ratio, derive_seed(seed, {0x76616c}));
    result.validation_rmse.push_back(v);
    if (on_epoch) {
      on_epoch(epoch, loss, v);
    }
  };
  result.history = nn::train_loop<Fae, FaeBatch>(model, loss_fn, batches, cfg.train, hook);
  return result;
}

std::vector<LatentRow> export_latents(const Fae& model, const Dataset& data, std::span<const std::size_t> items) {
  std::vector<LatentRow> rows;
  rows.reserve(items.size());
  for (std::size_t idx : items) {
    const DatasetItem& item = data.items.at(idx);
    rows.push_back({item.id, model.encoder().encode(apply_mask(item.snapshot, full_mask(item.snapshot)))});
  }
  return rows;
}

void save_fae(const Fae& model, const std::filesystem::path& manifest_path, const json& extra_meta) {
  nn::Checkpoint ckpt;
  ckpt.meta = json{{"kind", "functional_autoencoder"}, {"architecture", model.architecture().to_json()}};
  if (extra_meta.is_object()) {
    for (auto it = extra_meta.begin(); it != extra_meta.end(); ++it) {
      ckpt.meta[it.key()] = it.value();
    }
  }
  nn::append_tensors(ckpt, model, "");
  nn::write_checkpoint(manifest_path, ckpt);
}

Fae load_fae(const std::filesystem::path& manifest_path, json* meta) {
  const nn::Checkpoint ckpt = nn::read_checkpoint(manifest_path);
  if (ckpt.meta.value("kind", "") != "functional_autoencoder") {
    throw FormatError(manifest_path.string() + " is not an autoencoder checkpoint");
  }
  Fae model(FaeArchitecture::from_json(ckpt.meta.at("architecture")), 0);
  nn::load_tensors(ckpt, model, "");
  if (meta != nullptr) {
    *meta = ckpt.meta;
  }
  return model;
}

}  // namespace cas
