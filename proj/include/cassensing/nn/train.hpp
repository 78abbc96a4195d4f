#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cassensing/error.hpp"
#include "cassensing/nn/module.hpp"

namespace cas::nn {

struct TrainConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int batch_size = 8;
  int epochs = 10;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
      throw ParameterError("learning rate must be finite and non-negative");
    }
    if (batch_size < 1) {
      throw ParameterError("batch size must be >= 1");
    }
    if (epochs < 0) {
      throw ParameterError("epoch count must be >= 0");
    }
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) || !(epsilon > 0.0)) {
      throw ParameterError("Adam decay rates must lie in [0, 1) and epsilon must be positive");
    }
  }
};

// Adam with bias correction. Moments live in model-shaped copies so they
// line up with the parameter list by position.
template <class M>
class Adam {
 public:
  using T = typename M::Scalar;

  Adam(const M& model, const TrainConfig& cfg) : cfg_(cfg), m_(zeros_like(model)), v_(zeros_like(model)) {}

  void step(M& model, const M& grad) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const double lr = cfg_.learning_rate;
    auto p = param_refs(model);
    auto g = param_refs(grad);
    auto m = param_refs(m_);
    auto v = param_refs(v_);
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (!p[i].trainable) {
        continue;
      }
      for (std::size_t k = 0; k < p[i].data.size(); ++k) {
        const double gk = g[i].data[k];
        const double mk = cfg_.beta1 * m[i].data[k] + (1.0 - cfg_.beta1) * gk;
        const double vk = cfg_.beta2 * v[i].data[k] + (1.0 - cfg_.beta2) * gk * gk;
        m[i].data[k] = static_cast<T>(mk);
        v[i].data[k] = static_cast<T>(vk);
        const double update = lr * (mk / c1) / (std::sqrt(vk / c2) + cfg_.epsilon);
        p[i].data[k] = static_cast<T>(p[i].data[k] - update);
      }
    }
  }

  long steps() const { return t_; }

 private:
  TrainConfig cfg_;
  M m_;
  M v_;
  long t_ = 0;
};

struct TrainHistory {
  std::vector<double> epoch_loss;  // mean batch loss per epoch
  long steps = 0;
};

// Generic minibatch loop.
//   batches(epoch)                   -> the epoch's batches, deterministic in (seed, epoch)
//   loss_fn(model, batch, grad)      -> batch loss; accumulates dLoss/dparams into grad
//   on_epoch(epoch, mean_loss)       -> optional hook (validation, checkpoints)
// A non-finite batch loss aborts with DivergenceError naming epoch and batch.
template <class M, class Batch>
TrainHistory train_loop(M& model, const std::function<double(const M&, const Batch&, M&)>& loss_fn,
                        const std::function<std::vector<Batch>(int)>& batches, const TrainConfig& cfg,
                        const std::function<void(int, double)>& on_epoch = {}) {
  cfg.validate();
  Adam<M> opt(model, cfg);
  M grad = zeros_like(model);
  TrainHistory history;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const std::vector<Batch> epoch_batches = batches(epoch);
    double total = 0.0;
    for (std::size_t b = 0; b < epoch_batches.size(); ++b) {
      zero_params(grad);
      const double loss = loss_fn(model, epoch_batches[b], grad);
      if (!std::isfinite(loss)) {
        throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(b));
      }
      opt.step(model, grad);
      total += loss;
    }
    const double mean = epoch_batches.empty() ? 0.0 : total / static_cast<double>(epoch_batches.size());
    history.epoch_loss.push_back(mean);
    if (on_epoch) {
      on_epoch(epoch, mean);
    }
  }
  history.steps = opt.steps();
  return history;
}

}  // namespace cas::nn
