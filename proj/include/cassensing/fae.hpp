#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cassensing/fields.hpp"
#include "cassensing/nn/checkpoint.hpp"
#include "cassensing/nn/fourier.hpp"
#include "cassensing/nn/layers.hpp"
#include "cassensing/nn/train.hpp"

namespace cas {

// Architecture of the functional autoencoder. Coordinates are mapped to the
// unit square through `extent` before the Fourier embedding.
struct FaeArchitecture {
  int channels = 1;
  int coord_dim = 2;
  int fourier_features = 16;
  double fourier_scale = 5.0;
  int encoder_width = 64;
  int encoder_hidden_layers = 3;
  int latent_dim = 32;
  int decoder_width = 128;
  int decoder_hidden_layers = 4;
  Extent extent{};

  void validate() const;
  nlohmann::json to_json() const;
  static FaeArchitecture from_json(const nlohmann::json& j);
};

struct LatentVector {
  std::vector<double> values;

  std::size_t dim() const { return values.size(); }
};

// Kernel-integral encoder: z = rho(mean_i kappa([fourier(x_i), u(x_i)])).
// Points are put into a canonical order (lexicographic on coordinates, then
// values) before the network runs, so the mean is summed in the same order
// for any permutation of the input and z is bit-identical.
template <class T>
class FaeEncoder {
 public:
  using Scalar = T;

  struct Cache {
    std::vector<std::size_t> order;
    typename nn::Mlp<T>::Cache kappa;
    nn::Matrix<T> pooled;
    std::size_t points = 0;
  };

  FaeEncoder() = default;
  explicit FaeEncoder(const FaeArchitecture& arch);
  void init(Rng& rng, double fourier_scale);

  const FaeArchitecture& architecture() const { return arch_; }

  LatentVector encode(std::span<const Coord> coords, std::span<const float> values, Cache* cache = nullptr) const;
  LatentVector encode(const SparseObservation& obs, Cache* cache = nullptr) const;

  // dz: gradient w.r.t. the latent code; accumulates into grad.
  void backward(const Cache& cache, std::span<const double> dz, FaeEncoder* grad) const;

  template <class Out>
  void params(Out& out, const std::string& prefix) {
    fourier_.params(out, prefix + "fourier.");
    kappa_.params(out, prefix + "kappa.");
    rho_.params(out, prefix + "rho.");
  }
  template <class Out>
  void params(Out& out, const std::string& prefix) const {
    fourier_.params(out, prefix + "fourier.");
    kappa_.params(out, prefix + "kappa.");
    rho_.params(out, prefix + "rho.");
  }

 private:
  nn::Matrix<T> features(std::span<const Coord> coords, std::span<const float> values,
                         const std::vector<std::size_t>& order) const;

  FaeArchitecture arch_;
  nn::FourierFeatures<T> fourier_;
  nn::Mlp<T> kappa_;
  nn::Linear<T> rho_;
};

// Coordinate decoder: u(x) = gamma([z, fourier(x)]). Each point is evaluated
// independently of the others in the batch.
template <class T>
class FaeDecoder {
 public:
  using Scalar = T;

  struct Cache {
    typename nn::Mlp<T>::Cache gamma;
  };

  FaeDecoder() = default;
  explicit FaeDecoder(const FaeArchitecture& arch);
  void init(Rng& rng, double fourier_scale);

  const FaeArchitecture& architecture() const { return arch_; }

  // Returns coords.size() * channels values, channels-last.
  std::vector<double> decode(const LatentVector& z, std::span<const Coord> coords, Cache* cache = nullptr) const;

  // dvalues: gradient w.r.t. decode's output. Returns dL/dz.
  std::vector<double> backward(const Cache& cache, std::span<const double> dvalues, FaeDecoder* grad) const;

  template <class Out>
  void params(Out& out, const std::string& prefix) {
    fourier_.params(out, prefix + "fourier.");
    gamma_.params(out, prefix + "gamma.");
  }
  template <class Out>
  void params(Out& out, const std::string& prefix) const {
    fourier_.params(out, prefix + "fourier.");
    gamma_.params(out, prefix + "gamma.");
  }

 private:
  FaeArchitecture arch_;
  nn::FourierFeatures<T> fourier_;
  nn::Mlp<T> gamma_;
};

template <class T>
class FunctionalAutoencoder {
 public:
  using Scalar = T;

  FunctionalAutoencoder() = default;
  FunctionalAutoencoder(const FaeArchitecture& arch, std::uint64_t seed);

  const FaeArchitecture& architecture() const { return encoder_.architecture(); }
  FaeEncoder<T>& encoder() { return encoder_; }
  const FaeEncoder<T>& encoder() const { return encoder_; }
  FaeDecoder<T>& decoder() { return decoder_; }
  const FaeDecoder<T>& decoder() const { return decoder_; }

  template <class Out>
  void params(Out& out, const std::string& prefix) {
    encoder_.params(out, prefix + "encoder.");
    decoder_.params(out, prefix + "decoder.");
  }
  template <class Out>
  void params(Out& out, const std::string& prefix) const {
    encoder_.params(out, prefix + "encoder.");
    decoder_.params(out, prefix + "decoder.");
  }

 private:
  FaeEncoder<T> encoder_;
  FaeDecoder<T> decoder_;
};

using Fae = FunctionalAutoencoder<float>;

struct RegularizedLossConfig {
  double beta = 1e-4;
};

// 0.5 * mean over decoder points and channels of (decode(encode(enc)) - dec)^2
// + beta * ||z||^2. Accumulates scale * dLoss/dparams into grad when given.
template <class T>
double fae_loss(const FunctionalAutoencoder<T>& model, const ComplementSplit& split, const RegularizedLossConfig& cfg,
                FunctionalAutoencoder<T>* grad = nullptr, double scale = 1.0);

// m(y) on a full grid: decode(encode(obs)) with invalid points set to 0.
template <class T>
FieldSnapshot reconstruct_principal(const FunctionalAutoencoder<T>& model, const SparseObservation& obs,
                                    const DomainGrid& grid, std::span<const std::uint8_t> validity);

struct FaeTrainConfig {
  double encoder_ratio = 0.5;
  RegularizedLossConfig loss{};
  nn::TrainConfig train{};
  // Upper bound on decoder points per snapshot and step (a random subset of
  // the complement set); 0 evaluates the whole complement set.
  int max_decoder_points = 0;
  int validation_snapshots = 8;
};

struct FaeTrainResult {
  nn::TrainHistory history;
  std::vector<double> validation_rmse;  // per epoch, on held-out snapshots
};

// Complement-mask training: every snapshot draws a fresh encoder/decoder
// split at every step.
FaeTrainResult train_fae(Fae& model, const Dataset& data, std::span<const std::size_t> train_items,
                         std::span<const std::size_t> validation_items, const FaeTrainConfig& cfg,
                         const std::function<void(int, double, double)>& on_epoch = {});

// RMSE over valid points of the principal reconstruction from an encoder-ratio
// mask (fixed seed per item) against the full field.
double fae_validation_rmse(const Fae& model, const Dataset& data, std::span<const std::size_t> items,
                           double encoder_ratio, std::uint64_t seed);

struct LatentRow {
  std::string id;
  LatentVector z;
};

// Latent code of every listed snapshot from its full set of valid points.
std::vector<LatentRow> export_latents(const Fae& model, const Dataset& data, std::span<const std::size_t> items);

void save_fae(const Fae& model, const std::filesystem::path& manifest_path, const nlohmann::json& extra_meta = {});
Fae load_fae(const std::filesystem::path& manifest_path, nlohmann::json* meta = nullptr);

}  // namespace cas
