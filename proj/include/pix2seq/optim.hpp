#pragma once

// AdamW with decoupled weight decay, warmup-then-linear-decay schedule, and a
// single-writer training step.

#include <cmath>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>

#include "pix2seq/model.hpp"

namespace pix2seq {

struct TokenTypeWeights {
  double coord = 1.0;
  double class_label = 1.0;
  double noise = 1.0;
  double eos = 1.0;
  friend bool operator==(const TokenTypeWeights&, const TokenTypeWeights&) = default;
};

struct TrainConfig {
  double learning_rate = 0.003;
  double weight_decay = 0.05;
  double warmup_epochs = 10;
  int epochs = 300;
  int batch_size = 128;
  bool two_views_per_image = true;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip_norm = 0.0;  // 0 disables clipping
  LossNormalization loss_normalization = LossNormalization::mean;
  TokenTypeWeights token_weights;
  int max_steps = 0;  // > 0 caps the total step count
  int log_every = 50;
  int checkpoint_every = 0;  // 0: final checkpoint only
  int eval_every = 0;
  int eval_samples = 64;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

inline void validate(const TrainConfig& c) {
  if (c.learning_rate < 0 || c.weight_decay < 0 || c.warmup_epochs < 0)
    throw std::invalid_argument("train: learning_rate, weight_decay and warmup_epochs must be non-negative");
  if (c.epochs < 1 || c.batch_size < 1) throw std::invalid_argument("train: epochs and batch_size must be positive");
  if (c.beta1 < 0 || c.beta1 >= 1 || c.beta2 < 0 || c.beta2 >= 1 || c.adam_eps <= 0)
    throw std::invalid_argument("train: invalid Adam hyperparameters");
}

// Linear warmup to `peak` over `warmup_steps`, then linear decay to zero at
// `total_steps`; decays per step.
inline double learning_rate_at(long step, long total_steps, long warmup_steps, double peak) {
  if (warmup_steps > 0 && step < warmup_steps) return peak * static_cast<double>(step + 1) / warmup_steps;
  if (total_steps <= warmup_steps) return peak;
  const double frac = static_cast<double>(total_steps - step) / static_cast<double>(total_steps - warmup_steps);
  return peak * std::clamp(frac, 0.0, 1.0);
}

// Biases, LayerNorm parameters are exempt from weight decay.
inline bool decays(const std::string& name) {
  auto ends_with = [&](std::string_view s) {
    return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
  };
  if (name.find("norm") != std::string::npos) return false;
  return !(ends_with("bias") || ends_with(".bq") || ends_with(".bk") || ends_with(".bv") || ends_with(".bo") ||
           ends_with(".b1") || ends_with(".b2"));
}

template <class S>
struct AdamState {
  ModelParams<S> m;
  ModelParams<S> v;
  long step = 0;

  static AdamState zeros_like(const ModelParams<S>& p) {
    return {ModelParams<S>::zeros_like_shapes(p), ModelParams<S>::zeros_like_shapes(p), 0};
  }
};

template <class S>
void adamw_update(ModelParams<S>& params, const ModelParams<S>& grad, AdamState<S>& state, double lr,
                  const TrainConfig& cfg) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  auto p = params.named_tensors();
  auto g = grad.named_tensors();
  auto m = state.m.named_tensors();
  auto v = state.v.named_tensors();
  const S b1 = static_cast<S>(cfg.beta1), b2 = static_cast<S>(cfg.beta2);
  const S step_size = static_cast<S>(lr / bc1);
  const S inv_sqrt_bc2 = static_cast<S>(1.0 / std::sqrt(bc2));
  const S eps = static_cast<S>(cfg.adam_eps);
  const S shrink = static_cast<S>(1.0 - lr * cfg.weight_decay);
  for (std::size_t i = 0; i < p.size(); ++i) {
    auto pa = p[i].second->array();
    const auto ga = g[i].second->array();
    auto ma = m[i].second->array();
    auto va = v[i].second->array();
    ma = b1 * ma + (S(1) - b1) * ga;
    va = b2 * va + (S(1) - b2) * ga.square();
    if (decays(p[i].first) && shrink != S(1)) pa *= shrink;
    pa -= step_size * ma / (va.sqrt() * inv_sqrt_bc2 + eps);
  }
}

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <class S>
S global_grad_norm(const ModelParams<S>& grad) {
  double sq = 0;
  for (auto& [name, t] : grad.named_tensors()) sq += static_cast<double>(t->squaredNorm());
  return static_cast<S>(std::sqrt(sq));
}

// One AdamW step on `batch`; returns the pre-update batch loss.
template <class S>
S train_step(Model<S>& model, AdamState<S>& state, std::span<const Example> batch, double lr, const TrainConfig& cfg,
             Rng& rng) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  ModelParams<S> grad = ModelParams<S>::zeros_like_shapes(model.params());
  const LossOptions opts{cfg.loss_normalization};
  const S loss = model.loss_and_gradients(batch, opts, &grad, &rng);
  if (!std::isfinite(static_cast<double>(loss)) || !grad.all_finite()) {
    std::ostringstream msg;
    msg << "non-finite training loss at optimizer step " << state.step << " (loss=" << loss
        << ", lr=" << lr << ", grad_norm=" << global_grad_norm(grad) << ")";
    throw TrainingError(msg.str());
  }
  if (cfg.grad_clip_norm > 0) {
    const S norm = global_grad_norm(grad);
    if (norm > static_cast<S>(cfg.grad_clip_norm)) {
      const S factor = static_cast<S>(cfg.grad_clip_norm) / norm;
      for (auto& [name, t] : grad.named_tensors()) *t *= factor;
    }
  }
  adamw_update(model.params(), grad, state, lr, cfg);
  return loss;
}

}  // namespace pix2seq
