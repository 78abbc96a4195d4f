#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cassensing/unet.hpp"
#include "cassensing/nn/checkpoint.hpp"

namespace cas {

// Grid fields handled by the diffusion stage: grid.size() * m doubles,
// channels-last, in the same lattice order as FieldSnapshot.
using Field = std::vector<double>;

// Tables are indexed by step t = 1..T through the accessors.
struct NoiseSchedule {
  int steps = 0;
  double beta_min = 0.0;
  double beta_max = 0.0;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;
  std::vector<double> sigma2s;  // posterior variance; sigma_1^2 = 0

  void check_step(int t) const;
  double beta(int t) const { return betas[static_cast<std::size_t>(t - 1)]; }
  double alpha(int t) const { return alphas[static_cast<std::size_t>(t - 1)]; }
  double alpha_bar(int t) const { return alpha_bars[static_cast<std::size_t>(t - 1)]; }
  double sigma2(int t) const { return sigma2s[static_cast<std::size_t>(t - 1)]; }
  nlohmann::json to_json() const;
  static NoiseSchedule from_json(const nlohmann::json& j);
};

// Linear betas from beta_min (t = 1) to beta_max (t = T).
NoiseSchedule make_schedule(int steps = 1000, double beta_min = 1e-4, double beta_max = 0.02);

// sqrt(abar_t) d0 + sqrt(1 - abar_t) eps.
Field forward_diffuse(std::span<const double> d0, int t, std::span<const double> eps, const NoiseSchedule& s);

// -eps / sqrt(1 - abar_t).
Field score_from_eps(std::span<const double> eps, int t, const NoiseSchedule& s);

// Noise predictor eps_theta(d_t, t, condition). Implementations are const and
// keep all intermediate state local to the call.
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual std::size_t field_size() const = 0;
  virtual Field predict(std::span<const double> d_t, std::span<const double> cond, int t) const = 0;

  // The prediction at d_t together with v -> v^T d eps / d d_t. The closure
  // owns the differentiation state of this one evaluation.
  struct Linearization {
    Field eps;
    std::function<Field(std::span<const double>)> vjp;
  };
  virtual Linearization linearize(std::span<const double> d_t, std::span<const double> cond, int t) const = 0;
};

// Adapts a U-Net on an h x w grid.
template <class T>
class UNetDenoiser final : public Denoiser {
 public:
  UNetDenoiser(const UNet<T>& net, int height, int width);

  std::size_t field_size() const override;
  Field predict(std::span<const double> d_t, std::span<const double> cond, int t) const override;
  Linearization linearize(std::span<const double> d_t, std::span<const double> cond, int t) const override;

 private:
  nn::Matrix<T> pack(std::span<const double> d_t, std::span<const double> cond) const;

  const UNet<T>* net_;
  int height_;
  int width_;
};

// Reverse step from a given noise prediction:
//   (1/sqrt(a_t)) (d_t - (1 - a_t)/sqrt(1 - abar_t) eps_pred + (1 - a_t) guidance) + sigma_t z.
// guidance may be empty.
Field ancestral_update(std::span<const double> d_t, std::span<const double> eps_pred, int t, const NoiseSchedule& s,
                       std::span<const double> z, std::span<const double> guidance = {});

// The same step written with the score: (1/sqrt(a_t)) (d_t + (1 - a_t) score) + sigma_t z.
Field ancestral_update_score(std::span<const double> d_t, std::span<const double> score, int t,
                             const NoiseSchedule& s, std::span<const double> z);

Field ancestral_step(std::span<const double> d_t, int t, std::span<const double> cond, const Denoiser& net,
                     const NoiseSchedule& s, std::span<const double> z);

// Posterior-mean estimate of d_0: (d_t - sqrt(1 - abar_t) eps) / sqrt(abar_t).
Field tweedie_from_eps(std::span<const double> d_t, std::span<const double> eps, int t, const NoiseSchedule& s);
// Same estimate from the score: (d_t + (1 - abar_t) score) / sqrt(abar_t).
Field tweedie_from_score(std::span<const double> d_t, std::span<const double> score, int t, const NoiseSchedule& s);
Field tweedie_denoise(std::span<const double> d_t, int t, std::span<const double> cond, const Denoiser& net,
                      const NoiseSchedule& s);

enum class GuidanceMode { plain, projection, mcg };

std::string to_string(GuidanceMode mode);
GuidanceMode parse_guidance_mode(const std::string& name);

struct GuidanceConfig {
  // Measurement-likelihood variance, in squared units of the physical field.
  double sigma_c2 = 10000.0;
  GuidanceMode mode = GuidanceMode::mcg;
  // MCG only: differentiate through eps_theta; when off, d0_hat is treated
  // as d_t / sqrt(abar_t) (affine in d_t, Jacobian of the network dropped).
  bool through_network = true;

  void validate() const;
  nlohmann::json to_json() const;
  static GuidanceConfig from_json(const nlohmann::json& j);
};

// Sparse measurements y of the physical field u = principal + scale * r,
// where r is the diffusion-stage residual.
struct Measurement {
  int channels = 1;
  std::vector<std::size_t> indices;    // observed grid points
  std::vector<double> values;          // |S| x m
  std::vector<double> principal;       // m_hat on the full grid
  std::vector<std::uint8_t> validity;  // guidance is zeroed at invalid points
  double scale = 1.0;

  void validate() const;
};

// ||y - M(principal + scale * r)||^2.
double measurement_objective(const Measurement& meas, std::span<const double> r);

// -(1/sigma_c^2) d/d d_t ||y - M(principal + scale * r)||^2 with r = d_t
// (through_tweedie off) or r = tweedie_denoise(d_t) (on). The condition fed to
// the network is meas.principal. When eps_out is given it receives the noise
// prediction at d_t (empty when the network was not evaluated).
Field measurement_grad(std::span<const double> d_t, int t, const Measurement& meas, const Denoiser& net,
                       const NoiseSchedule& s, const GuidanceConfig& cfg, bool through_tweedie, Field* eps_out = nullptr);

// Runs t = T..1 from seeded Gaussian noise and returns d_0 (zero at invalid
// points). Every mode draws the same noise sequence for a given seed, so runs
// with matched seeds differ only by the guidance term. meas may be null in
// plain mode; otherwise its principal field is the network condition.
Field guided_sample(std::span<const double> cond, const Measurement* meas, const Denoiser& net,
                    const NoiseSchedule& s, const GuidanceConfig& cfg, std::uint64_t seed,
                    std::span<const std::uint8_t> validity = {});

struct TrainDraw {
  int t = 1;
  Field eps;
};

// The step and the noise of one training example, from its seed alone.
TrainDraw draw_training_noise(std::size_t n, const NoiseSchedule& s, std::uint64_t seed);

// mean((eps - eps_theta(forward_diffuse(d0, t, eps), t, cond))^2).
double train_step(const Denoiser& net, std::span<const double> d0, std::span<const double> cond,
                  const NoiseSchedule& s, std::uint64_t seed);

// Same loss for a U-Net, accumulating scale * dLoss/dparams into grad.
template <class T>
double train_step(const UNet<T>& net, int height, int width, std::span<const double> d0, std::span<const double> cond,
                  const NoiseSchedule& s, std::uint64_t seed, UNet<T>* grad, double scale = 1.0);

// Trained denoiser plus everything sampling needs.
struct DiffusionModel {
  UNet<float> net;
  NoiseSchedule schedule;
  int height = 0;
  int width = 0;
  // Physical residual = residual_scale * diffusion-space residual.
  double residual_scale = 1.0;

  UNetDenoiser<float> denoiser() const { return UNetDenoiser<float>(net, height, width); }
};

void save_diffusion(const DiffusionModel& model, const std::filesystem::path& manifest_path,
                    const nlohmann::json& extra_meta = {});
DiffusionModel load_diffusion(const std::filesystem::path& manifest_path, nlohmann::json* meta = nullptr);

}  // namespace cas
