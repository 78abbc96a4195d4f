#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "cassensing/diffusion.hpp"
#include "cassensing/fae.hpp"
#include "cassensing/fields.hpp"

namespace cas {

struct CascadeConfig {
  double r_train = 0.005;
  GuidanceConfig guidance{};
  int ensemble_size = 20;

  void validate() const;
  nlohmann::json to_json() const;
  static CascadeConfig from_json(const nlohmann::json& j);
};

struct CascadeTrainConfig {
  CascadeConfig cascade{};
  UNetArchitecture architecture{};
  int diffusion_steps = 1000;
  double beta_min = 1e-4;
  double beta_max = 0.02;
  nn::TrainConfig train{};
  // Sparse masks drawn per training snapshot when estimating the residual
  // normalization constant.
  int normalization_masks = 4;
};

// Standard deviation of u - m_hat over the valid points of the listed
// snapshots, with m_hat reconstructed from `masks` random masks per snapshot
// at the given ratio.
double residual_scale(const Fae& fae, const Dataset& data, std::span<const std::size_t> items, double ratio, int masks,
                      std::uint64_t seed);

// Trains the conditional denoiser on residuals of the frozen autoencoder.
// Every example of every step draws a fresh r_train mask. Throws
// IntegrityError if the autoencoder parameters change.
DiffusionModel mask_cascade_train(const Dataset& data, std::span<const std::size_t> train_items, const Fae& fae,
                                  const CascadeTrainConfig& cfg, nn::TrainHistory* history = nullptr,
                                  const std::function<void(int, double)>& on_epoch = {});

struct ReconstructionResult {
  FieldSnapshot principal;
  FieldSnapshot residual;
  FieldSnapshot full;
  std::vector<double> observed_residual;  // y - M(u_hat), |S| x m
  std::optional<double> rmse;             // of full vs. ground truth
  std::optional<double> principal_rmse;   // of principal vs. ground truth
  std::uint64_t seed = 0;

  double observed_mean_abs() const;
};

// u_hat = m_hat(y) + d_hat with d_hat from guided sampling.
ReconstructionResult reconstruct(const SparseObservation& obs, const DomainGrid& grid,
                                 std::span<const std::uint8_t> validity, const Fae& fae, const DiffusionModel& diffusion,
                                 const GuidanceConfig& guidance, std::uint64_t seed,
                                 const FieldSnapshot* truth = nullptr);

// Reconstruction with a precomputed principal field (shared across samples).
ReconstructionResult reconstruct_with_principal(const SparseObservation& obs, const FieldSnapshot& principal,
                                                const DiffusionModel& diffusion, const GuidanceConfig& guidance,
                                                std::uint64_t seed, const FieldSnapshot* truth = nullptr);

struct EnsembleResult {
  FieldSnapshot mean;
  std::vector<double> rmse;  // per sample; empty without ground truth
  std::vector<ReconstructionResult> samples;
};

// n reconstructions with seeds base_seed .. base_seed + n - 1.
EnsembleResult ensemble_reconstruct(const SparseObservation& obs, const DomainGrid& grid,
                                    std::span<const std::uint8_t> validity, const Fae& fae,
                                    const DiffusionModel& diffusion, const GuidanceConfig& guidance, int n,
                                    std::uint64_t base_seed, const FieldSnapshot* truth = nullptr);

// Autoencoder + diffusion model + cascade manifest.
struct CascadeBundle {
  Fae fae;
  DiffusionModel diffusion;
  CascadeConfig config;
};

inline constexpr int kBundleFormatVersion = 1;

void save_bundle(const CascadeBundle& bundle, const std::filesystem::path& dir, const nlohmann::json& extra = {});
CascadeBundle load_bundle(const std::filesystem::path& dir);

}  // namespace cas
