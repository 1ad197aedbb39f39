#pragma once

// Finite-difference verification of the analytic gradient.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "pix2seq/model.hpp"

namespace pix2seq {

struct GradCheckOptions {
  int samples = 256;        // parameters checked (all, if fewer exist)
  double step = 1e-4;       // central-difference step
  double abs_floor = 1e-6;  // denominator floor for relative error
  std::uint64_t seed = 0;
  int batch = 2;
  int n_bins = 10;
  int n_classes = 3;
  int seq_objects = 2;
  bool zero_weight_positions = true;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t checked = 0;
  std::size_t parameter_count = 0;
};

// Small double-precision configuration (~2.5k parameters).
inline ModelConfig tiny_model_config(int n_bins = 10, int n_classes = 3) {
  ModelConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ffn = 16;
  c.n_encoder_layers = 1;
  c.n_decoder_layers = 1;
  c.vocab_size = Vocabulary(n_bins, n_classes).size();
  c.max_target_len = 16;
  return c;
}

// Random image/sequence pairs for a config; a few target positions get NA
// with weight 0 when `zero_weight_positions` is set.
struct GradCheckBatch {
  std::vector<Image> images;
  std::vector<TokenSequence> sequences;
  std::vector<Example> examples() const {
    std::vector<Example> out;
    for (std::size_t i = 0; i < images.size(); ++i) out.push_back({&images[i], &sequences[i]});
    return out;
  }
};

inline GradCheckBatch make_gradcheck_batch(const ModelConfig& config, const GradCheckOptions& opts, Rng& rng) {
  const Vocabulary vocab(opts.n_bins, opts.n_classes);
  GradCheckBatch batch;
  for (int b = 0; b < opts.batch; ++b) {
    Image img(config.image_size, config.image_size, config.channels);
    for (auto& px : img.data) px = static_cast<std::uint8_t>(rng.below(256));
    std::vector<AnnotatedObject> objs;
    for (int i = 0; i < opts.seq_objects; ++i) {
      double a = rng.uniform(), c = rng.uniform(), d = rng.uniform(), e = rng.uniform();
      objs.push_back({{std::min(a, c), std::min(d, e), std::max(a, c), std::max(d, e)},
                      static_cast<int>(rng.below(opts.n_classes))});
    }
    TokenSequence seq = construct_sequence(objs, vocab, OrderingStrategy::random, rng);
    if (opts.zero_weight_positions) {
      for (std::size_t j = 1; j < seq.size(); j += 3) {
        seq.target[j] = vocab.na_token();
        seq.weights[j] = 0.0f;
      }
    }
    batch.images.push_back(std::move(img));
    batch.sequences.push_back(std::move(seq));
  }
  return batch;
}

// Compares analytic gradients of the batch loss with central differences
// over a random subset of parameters.
inline GradCheckReport gradient_check(const ModelConfig& config, const GradCheckOptions& opts) {
  Rng rng(opts.seed);
  Model<double> model = Model<double>::initialize(config, rng());
  // Nudge zero-initialized biases and unit gains so every path carries signal.
  for (auto& [name, t] : model.params().named_tensors())
    for (Eigen::Index i = 0; i < t->size(); ++i) t->data()[i] += rng.uniform(-0.1, 0.1);

  const GradCheckBatch data = make_gradcheck_batch(config, opts, rng);
  const auto examples = data.examples();
  const LossOptions loss_opts{};

  ModelParams<double> grad = ModelParams<double>::zeros_like_shapes(model.params());
  model.loss_and_gradients(examples, loss_opts, &grad, nullptr);

  struct Slot {
    std::size_t tensor;
    Eigen::Index index;
  };
  auto params = model.params().named_tensors();
  auto grads = grad.named_tensors();
  std::vector<Slot> slots;
  for (std::size_t t = 0; t < params.size(); ++t)
    for (Eigen::Index i = 0; i < params[t].second->size(); ++i) slots.push_back({t, i});
  GradCheckReport report;
  report.parameter_count = slots.size();
  if (opts.samples < static_cast<int>(slots.size())) {
    rng.shuffle(slots.begin(), slots.end());
    slots.resize(static_cast<std::size_t>(opts.samples));
  }

  for (const auto& s : slots) {
    double& p = params[s.tensor].second->data()[s.index];
    const double saved = p;
    p = saved + opts.step;
    const double up = model.loss_and_gradients(examples, loss_opts, nullptr, nullptr);
    p = saved - opts.step;
    const double down = model.loss_and_gradients(examples, loss_opts, nullptr, nullptr);
    p = saved;
    const double numeric = (up - down) / (2 * opts.step);
    const double analytic = grads[s.tensor].second->data()[s.index];
    const double rel = std::abs(analytic - numeric) / std::max(std::abs(analytic) + std::abs(numeric), opts.abs_floor);
    if (rel > report.max_relative_error) {
      report.max_relative_error = rel;
      report.worst_parameter = params[s.tensor].first + "[" + std::to_string(s.index) + "]";
    }
    ++report.checked;
  }
  return report;
}

}  // namespace pix2seq
