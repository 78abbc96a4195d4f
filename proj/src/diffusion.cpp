#include "cassensing/diffusion.hpp"

#include <cmath>
#include <memory>

#include "cassensing/error.hpp"
#include "cassensing/rng.hpp"

namespace cas {

using nlohmann::json;
using nn::Matrix;

namespace {

void require_same(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw ShapeError(std::string(what) + ": sizes " + std::to_string(a) + " and " + std::to_string(b) + " differ");
  }
}

void require_finite(std::span<const double> v, const char* what) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw DivergenceError(std::string(what) + " produced a non-finite value");
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Schedule
// ---------------------------------------------------------------------------

void NoiseSchedule::check_step(int t) const {
  if (t < 1 || t > steps) {
    throw ParameterError("diffusion step " + std::to_string(t) + " outside [1, " + std::to_string(steps) + "]");
  }
}

json NoiseSchedule::to_json() const { return json{{"steps", steps}, {"beta_min", beta_min}, {"beta_max", beta_max}}; }

NoiseSchedule NoiseSchedule::from_json(const json& j) {
  return make_schedule(j.at("steps").get<int>(), j.at("beta_min").get<double>(), j.at("beta_max").get<double>());
}

NoiseSchedule make_schedule(int steps, double beta_min, double beta_max) {
  if (steps < 2) {
    throw ParameterError("noise schedule needs at least 2 steps");
  }
  if (!(beta_min > 0.0 && beta_min < beta_max && beta_max < 1.0)) {
    throw ParameterError("noise schedule needs 0 < beta_min < beta_max < 1");
  }
  NoiseSchedule s;
  s.steps = steps;
  s.beta_min = beta_min;
  s.beta_max = beta_max;
  const auto n = static_cast<std::size_t>(steps);
  s.betas.resize(n);
  s.alphas.resize(n);
  s.alpha_bars.resize(n);
  s.sigma2s.resize(n);
  double prod = 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double b = beta_min + static_cast<double>(i) / static_cast<double>(steps - 1) * (beta_max - beta_min);
    s.betas[i] = b;
    s.alphas[i] = 1.0 - b;
    prod *= 1.0 - b;
    s.alpha_bars[i] = prod;
    s.sigma2s[i] = i == 0 ? 0.0 : b * (1.0 - s.alpha_bars[i - 1]) / (1.0 - prod);
  }
  return s;
}

Field forward_diffuse(std::span<const double> d0, int t, std::span<const double> eps, const NoiseSchedule& s) {
  s.check_step(t);
  require_same(d0.size(), eps.size(), "forward_diffuse");
  const double a = std::sqrt(s.alpha_bar(t));
  const double b = std::sqrt(1.0 - s.alpha_bar(t));
  Field out(d0.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = a * d0[i] + b * eps[i];
  }
  return out;
}

Field score_from_eps(std::span<const double> eps, int t, const NoiseSchedule& s) {
  s.check_step(t);
  const double k = -1.0 / std::sqrt(1.0 - s.alpha_bar(t));
  Field out(eps.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = k * eps[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// U-Net adapter
// ---------------------------------------------------------------------------

template <class T>
UNetDenoiser<T>::UNetDenoiser(const UNet<T>& net, int height, int width) : net_(&net), height_(height), width_(width) {}

template <class T>
std::size_t UNetDenoiser<T>::field_size() const {
  return static_cast<std::size_t>(height_) * static_cast<std::size_t>(width_) *
         static_cast<std::size_t>(net_->architecture().channels);
}

template <class T>
Matrix<T> UNetDenoiser<T>::pack(std::span<const double> d_t, std::span<const double> cond) const {
  const std::size_t n = field_size();
  require_same(d_t.size(), n, "denoiser state");
  require_same(cond.size(), n, "denoiser condition");
  const auto m = static_cast<std::size_t>(net_->architecture().channels);
  const std::size_t pts = n / m;
  Matrix<T> x(static_cast<Eigen::Index>(2 * m), static_cast<Eigen::Index>(pts));
  for (std::size_t p = 0; p < pts; ++p) {
    for (std::size_t k = 0; k < m; ++k) {
      x(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(p)) = static_cast<T>(d_t[p * m + k]);
      x(static_cast<Eigen::Index>(m + k), static_cast<Eigen::Index>(p)) = static_cast<T>(cond[p * m + k]);
    }
  }
  return x;
}

namespace {

template <class T>
Field unpack_rows(const Matrix<T>& y, std::size_t m) {
  const auto pts = static_cast<std::size_t>(y.cols());
  Field out(pts * m);
  for (std::size_t p = 0; p < pts; ++p) {
    for (std::size_t k = 0; k < m; ++k) {
      out[p * m + k] = static_cast<double>(y(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(p)));
    }
  }
  return out;
}

}  // namespace

template <class T>
Field UNetDenoiser<T>::predict(std::span<const double> d_t, std::span<const double> cond, int t) const {
  const auto m = static_cast<std::size_t>(net_->architecture().channels);
  return unpack_rows(net_->forward(pack(d_t, cond), height_, width_, t), m);
}

template <class T>
Denoiser::Linearization UNetDenoiser<T>::linearize(std::span<const double> d_t, std::span<const double> cond,
                                                   int t) const {
  const auto m = static_cast<std::size_t>(net_->architecture().channels);
  auto cache = std::make_shared<typename UNet<T>::Cache>();
  Linearization lin;
  lin.eps = unpack_rows(net_->forward(pack(d_t, cond), height_, width_, t, cache.get()), m);
  const UNet<T>* net = net_;
  const std::size_t n = field_size();
  lin.vjp = [net, cache, m, n](std::span<const double> v) {
    require_same(v.size(), n, "vector-Jacobian product");
    const std::size_t pts = n / m;
    Matrix<T> dy(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(pts));
    for (std::size_t p = 0; p < pts; ++p) {
      for (std::size_t k = 0; k < m; ++k) {
        dy(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(p)) = static_cast<T>(v[p * m + k]);
      }
    }
    const Matrix<T> dx = net->backward(*cache, dy, nullptr, true);
    return unpack_rows(Matrix<T>(dx.topRows(static_cast<Eigen::Index>(m))), m);
  };
  return lin;
}

template class UNetDenoiser<float>;
template class UNetDenoiser<double>;

// ---------------------------------------------------------------------------
// Reverse process
// ---------------------------------------------------------------------------

Field ancestral_update(std::span<const double> d_t, std::span<const double> eps_pred, int t, const NoiseSchedule& s,
                       std::span<const double> z, std::span<const double> guidance) {
  s.check_step(t);
  require_same(d_t.size(), eps_pred.size(), "ancestral step");
  require_same(d_t.size(), z.size(), "ancestral step noise");
  if (!guidance.empty()) {
    require_same(d_t.size(), guidance.size(), "ancestral step guidance");
  }
  const double a = s.alpha(t);
  const double inv = 1.0 / std::sqrt(a);
  const double c = (1.0 - a) / std::sqrt(1.0 - s.alpha_bar(t));
  const double sigma = std::sqrt(s.sigma2(t));
  Field out(d_t.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double inner = d_t[i] - c * eps_pred[i];
    if (!guidance.empty()) {
      inner += (1.0 - a) * guidance[i];
    }
    out[i] = inv * inner + sigma * z[i];
  }
  return out;
}

Field ancestral_update_score(std::span<const double> d_t, std::span<const double> score, int t,
                             const NoiseSchedule& s, std::span<const double> z) {
  s.check_step(t);
  require_same(d_t.size(), score.size(), "ancestral step");
  require_same(d_t.size(), z.size(), "ancestral step noise");
  const double a = s.alpha(t);
  const double sigma = std::sqrt(s.sigma2(t));
  Field out(d_t.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = (d_t[i] + (1.0 - a) * score[i]) / std::sqrt(a) + sigma * z[i];
  }
  return out;
}

Field ancestral_step(std::span<const double> d_t, int t, std::span<const double> cond, const Denoiser& net,
                     const NoiseSchedule& s, std::span<const double> z) {
  return ancestral_update(d_t, net.predict(d_t, cond, t), t, s, z);
}

Field tweedie_from_eps(std::span<const double> d_t, std::span<const double> eps, int t, const NoiseSchedule& s) {
  s.check_step(t);
  require_same(d_t.size(), eps.size(), "tweedie");
  const double a = std::sqrt(s.alpha_bar(t));
  const double b = std::sqrt(1.0 - s.alpha_bar(t));
  Field out(d_t.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = (d_t[i] - b * eps[i]) / a;
  }
  return out;
}

Field tweedie_from_score(std::span<const double> d_t, std::span<const double> score, int t, const NoiseSchedule& s) {
  s.check_step(t);
  require_same(d_t.size(), score.size(), "tweedie");
  const double ab = s.alpha_bar(t);
  Field out(d_t.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = (d_t[i] + (1.0 - ab) * score[i]) / std::sqrt(ab);
  }
  return out;
}

Field tweedie_denoise(std::span<const double> d_t, int t, std::span<const double> cond, const Denoiser& net,
                      const NoiseSchedule& s) {
  return tweedie_from_eps(d_t, net.predict(d_t, cond, t), t, s);
}

// ---------------------------------------------------------------------------
// Guidance
// ---------------------------------------------------------------------------

std::string to_string(GuidanceMode mode) {
  switch (mode) {
    case GuidanceMode::plain:
      return "plain";
    case GuidanceMode::projection:
      return "projection";
    case GuidanceMode::mcg:
      return "mcg";
  }
  return "plain";
}

GuidanceMode parse_guidance_mode(const std::string& name) {
  if (name == "plain") {
    return GuidanceMode::plain;
  }
  if (name == "projection") {
    return GuidanceMode::projection;
  }
  if (name == "mcg") {
    return GuidanceMode::mcg;
  }
  throw ParameterError("unknown guidance mode '" + name + "' (expected plain, projection or mcg)");
}

void GuidanceConfig::validate() const {
  if (!(sigma_c2 > 0.0) || !std::isfinite(sigma_c2)) {
    throw ParameterError("measurement variance sigma_c2 must be positive and finite");
  }
}

json GuidanceConfig::to_json() const {
  return json{{"sigma_c2", sigma_c2}, {"mode", to_string(mode)}, {"through_network", through_network}};
}

GuidanceConfig GuidanceConfig::from_json(const json& j) {
  GuidanceConfig g;
  g.sigma_c2 = j.at("sigma_c2").get<double>();
  g.mode = parse_guidance_mode(j.at("mode").get<std::string>());
  g.through_network = j.at("through_network").get<bool>();
  g.validate();
  return g;
}

void Measurement::validate() const {
  const auto m = static_cast<std::size_t>(channels);
  if (channels < 1 || values.size() != indices.size() * m) {
    throw ShapeError("measurement values do not match its index list");
  }
  if (principal.size() % m != 0 || (!validity.empty() && validity.size() * m != principal.size())) {
    throw ShapeError("measurement principal field does not match its validity flags");
  }
  for (std::size_t i : indices) {
    if ((i + 1) * m > principal.size()) {
      throw ShapeError("measurement index " + std::to_string(i) + " outside the grid");
    }
  }
}

namespace {

// dObjective/dr and the objective itself.
Field objective_grad(const Measurement& meas, std::span<const double> r, double* objective) {
  const auto m = static_cast<std::size_t>(meas.channels);
  Field g(r.size(), 0.0);
  double obj = 0.0;
  for (std::size_t p = 0; p < meas.indices.size(); ++p) {
    for (std::size_t k = 0; k < m; ++k) {
      const std::size_t i = meas.indices[p] * m + k;
      const double e = meas.values[p * m + k] - (meas.principal[i] + meas.scale * r[i]);
      obj += e * e;
      g[i] += -2.0 * meas.scale * e;
    }
  }
  if (objective != nullptr) {
    *objective = obj;
  }
  return g;
}

}  // namespace

double measurement_objective(const Measurement& meas, std::span<const double> r) {
  meas.validate();
  require_same(r.size(), meas.principal.size(), "measurement objective");
  double obj = 0.0;
  objective_grad(meas, r, &obj);
  return obj;
}

Field measurement_grad(std::span<const double> d_t, int t, const Measurement& meas, const Denoiser& net,
                       const NoiseSchedule& s, const GuidanceConfig& cfg, bool through_tweedie, Field* eps_out) {
  cfg.validate();
  meas.validate();
  s.check_step(t);
  require_same(d_t.size(), meas.principal.size(), "measurement gradient");
  Field grad;
  Field eps;
  if (!through_tweedie) {
    grad = objective_grad(meas, d_t, nullptr);
  } else {
    const double a = std::sqrt(s.alpha_bar(t));
    const double b = std::sqrt(1.0 - s.alpha_bar(t));
    if (cfg.through_network) {
      Denoiser::Linearization lin = net.linearize(d_t, meas.principal, t);
      const Field r = tweedie_from_eps(d_t, lin.eps, t, s);
      const Field gr = objective_grad(meas, r, nullptr);
      const Field jt = lin.vjp(gr);
      grad.resize(gr.size());
      for (std::size_t i = 0; i < grad.size(); ++i) {
        grad[i] = (gr[i] - b * jt[i]) / a;
      }
      eps = std::move(lin.eps);
    } else {
      eps = net.predict(d_t, meas.principal, t);
      const Field r = tweedie_from_eps(d_t, eps, t, s);
      grad = objective_grad(meas, r, nullptr);
      for (double& g : grad) {
        g /= a;
      }
    }
  }
  const double k = -1.0 / cfg.sigma_c2;
  const auto m = static_cast<std::size_t>(meas.channels);
  for (std::size_t i = 0; i < grad.size(); ++i) {
    grad[i] = meas.validity.empty() || meas.validity[i / m] ? k * grad[i] : 0.0;
  }
  require_finite(grad, "measurement gradient");
  if (eps_out != nullptr) {
    *eps_out = std::move(eps);
  }
  return grad;
}

Field guided_sample(std::span<const double> cond, const Measurement* meas, const Denoiser& net,
                    const NoiseSchedule& s, const GuidanceConfig& cfg, std::uint64_t seed,
                    std::span<const std::uint8_t> validity) {
  cfg.validate();
  const std::size_t n = net.field_size();
  require_same(cond.size(), n, "sampler condition");
  if (cfg.mode != GuidanceMode::plain) {
    if (meas == nullptr) {
      throw ParameterError("guided sampling in " + to_string(cfg.mode) + " mode needs measurements");
    }
    require_same(meas->principal.size(), n, "sampler measurement");
  }
  Rng rng(seed);
  Field d = rng.normal_vector(n);
  Field z(n);
  for (int t = s.steps; t >= 1; --t) {
    for (double& v : z) {
      v = rng.normal();
    }
    if (t == 1) {
      std::fill(z.begin(), z.end(), 0.0);
    }
    Field eps;
    Field guidance;
    if (cfg.mode == GuidanceMode::plain) {
      eps = net.predict(d, cond, t);
    } else {
      guidance = measurement_grad(d, t, *meas, net, s, cfg, cfg.mode == GuidanceMode::mcg, &eps);
      if (eps.empty()) {
        eps = net.predict(d, cond, t);
      }
    }
    d = ancestral_update(d, eps, t, s, z, guidance);
    require_finite(d, "reverse diffusion");
  }
  if (!validity.empty()) {
    const std::size_t m = n / validity.size();
    for (std::size_t i = 0; i < n; ++i) {
      if (!validity[i / m]) {
        d[i] = 0.0;
      }
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

TrainDraw draw_training_noise(std::size_t n, const NoiseSchedule& s, std::uint64_t seed) {
  Rng rng(seed);
  TrainDraw d;
  d.t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(s.steps)));
  d.eps = rng.normal_vector(n);
  return d;
}

double train_step(const Denoiser& net, std::span<const double> d0, std::span<const double> cond,
                  const NoiseSchedule& s, std::uint64_t seed) {
  require_same(d0.size(), net.field_size(), "train step");
  const TrainDraw draw = draw_training_noise(d0.size(), s, seed);
  const Field d_t = forward_diffuse(d0, draw.t, draw.eps, s);
  const Field pred = net.predict(d_t, cond, draw.t);
  double loss = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    loss += (pred[i] - draw.eps[i]) * (pred[i] - draw.eps[i]);
  }
  loss /= static_cast<double>(pred.size());
  if (!std::isfinite(loss)) {
    throw DivergenceError("non-finite diffusion loss at step " + std::to_string(draw.t));
  }
  return loss;
}

template <class T>
double train_step(const UNet<T>& net, int height, int width, std::span<const double> d0, std::span<const double> cond,
                  const NoiseSchedule& s, std::uint64_t seed, UNet<T>* grad, double scale) {
  const UNetDenoiser<T> den(net, height, width);
  require_same(d0.size(), den.field_size(), "train step");
  const auto m = static_cast<std::size_t>(net.architecture().channels);
  const TrainDraw draw = draw_training_noise(d0.size(), s, seed);
  const Field d_t = forward_diffuse(d0, draw.t, draw.eps, s);
  const std::size_t pts = d0.size() / m;
  Matrix<T> x(static_cast<Eigen::Index>(2 * m), static_cast<Eigen::Index>(pts));
  for (std::size_t p = 0; p < pts; ++p) {
    for (std::size_t k = 0; k < m; ++k) {
      x(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(p)) = static_cast<T>(d_t[p * m + k]);
      x(static_cast<Eigen::Index>(m + k), static_cast<Eigen::Index>(p)) = static_cast<T>(cond[p * m + k]);
    }
  }
  typename UNet<T>::Cache cache;
  const Matrix<T> pred = net.forward(x, height, width, draw.t, grad != nullptr ? &cache : nullptr);
  Matrix<T> dy(pred.rows(), pred.cols());
  double loss = 0.0;
  const double nn = static_cast<double>(pred.size());
  for (std::size_t p = 0; p < pts; ++p) {
    for (std::size_t k = 0; k < m; ++k) {
      const auto r = static_cast<Eigen::Index>(k);
      const auto c = static_cast<Eigen::Index>(p);
      const double e = static_cast<double>(pred(r, c)) - draw.eps[p * m + k];
      loss += e * e;
      dy(r, c) = static_cast<T>(scale * 2.0 * e / nn);
    }
  }
  loss /= nn;
  if (!std::isfinite(loss)) {
    throw DivergenceError("non-finite diffusion loss at step " + std::to_string(draw.t));
  }
  if (grad != nullptr) {
    net.backward(cache, dy, grad, false);
  }
  return loss;
}

template double train_step(const UNet<float>&, int, int, std::span<const double>, std::span<const double>,
                           const NoiseSchedule&, std::uint64_t, UNet<float>*, double);
template double train_step(const UNet<double>&, int, int, std::span<const double>, std::span<const double>,
                           const NoiseSchedule&, std::uint64_t, UNet<double>*, double);

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

void save_diffusion(const DiffusionModel& model, const std::filesystem::path& manifest_path, const json& extra_meta) {
  nn::Checkpoint ckpt;
  ckpt.meta = json{{"kind", "diffusion"},
                   {"architecture", model.net.architecture().to_json()},
                   {"schedule", model.schedule.to_json()},
                   {"grid", {{"height", model.height}, {"width", model.width}}},
                   {"residual_scale", model.residual_scale}};
  if (extra_meta.is_object()) {
    for (auto it = extra_meta.begin(); it != extra_meta.end(); ++it) {
      ckpt.meta[it.key()] = it.value();
    }
  }
  nn::append_tensors(ckpt, model.net, "");
  nn::write_checkpoint(manifest_path, ckpt);
}

DiffusionModel load_diffusion(const std::filesystem::path& manifest_path, json* meta) {
  const nn::Checkpoint ckpt = nn::read_checkpoint(manifest_path);
  if (ckpt.meta.value("kind", "") != "diffusion") {
    throw FormatError(manifest_path.string() + " is not a diffusion checkpoint");
  }
  DiffusionModel model;
  try {
    model.net = UNet<float>(UNetArchitecture::from_json(ckpt.meta.at("architecture")), 0);
    model.schedule = NoiseSchedule::from_json(ckpt.meta.at("schedule"));
    model.height = ckpt.meta.at("grid").at("height").get<int>();
    model.width = ckpt.meta.at("grid").at("width").get<int>();
    model.residual_scale = ckpt.meta.at("residual_scale").get<double>();
  } catch (const json::exception& e) {
    throw FormatError("malformed diffusion checkpoint metadata: " + std::string(e.what()));
  }
  nn::load_tensors(ckpt, model.net, "");
  if (meta != nullptr) {
    *meta = ckpt.meta;
  }
  return model;
}

}  // namespace cas
