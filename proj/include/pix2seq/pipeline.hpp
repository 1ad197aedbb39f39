#pragma once

// Training loop, evaluation and ablation harnesses over the synthetic shapes
// dataset. Everything is a pure function of the run config: batch composition
// and augmentation draw from (seed, step) streams, so a resumed run replays
// exactly what an uninterrupted one would have done.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "pix2seq/augment.hpp"
#include "pix2seq/checkpoint.hpp"
#include "pix2seq/config.hpp"
#include "pix2seq/data.hpp"
#include "pix2seq/eval.hpp"
#include "pix2seq/infer.hpp"
#include "pix2seq/model.hpp"
#include "pix2seq/optim.hpp"

namespace pix2seq {

namespace stream_key {
inline constexpr std::uint64_t shuffle = 0x53485546464c45ULL;
inline constexpr std::uint64_t augment = 0x4155474d454e54ULL;
inline constexpr std::uint64_t dropout = 0x44524f504f5554ULL;
inline constexpr std::uint64_t init = 0x494e4954ULL;
}  // namespace stream_key

inline std::vector<std::string> class_names(const SyntheticConfig& c) {
  return std::vector<std::string>(kShapeNames, kShapeNames + c.n_classes);
}

// Multiplies each target's weight by the weight of its token type.
inline void apply_token_type_weights(TokenSequence& seq, const Vocabulary& vocab, const TokenTypeWeights& w) {
  for (std::size_t j = 0; j < seq.size(); ++j) {
    const Token t = seq.target[j];
    double f = 1.0;
    if (vocab.is_coord(t))
      f = w.coord;
    else if (vocab.is_class(t))
      f = w.class_label;
    else if (vocab.is_noise(t))
      f = w.noise;
    else if (vocab.is_eos(t))
      f = w.eos;
    seq.weights[j] = static_cast<float>(seq.weights[j] * f);
  }
}

// Image at the model's resolution; normalized boxes are unaffected.
inline Image model_input(const Image& image, int image_size) {
  if (image.height == image_size && image.width == image_size) return image;
  return resize_bilinear(image, image_size, image_size);
}

// One augmented training view of a sample.
inline std::pair<Image, TokenSequence> make_training_view(const Sample& s, const RunConfig& cfg, Rng& rng) {
  const Vocabulary vocab = cfg.vocabulary();
  auto [image, objects] = scale_jitter_crop(s.image, s.objects, cfg.augment, rng);
  image = model_input(image, cfg.model.image_size);
  TokenSequence seq;
  if (cfg.augment.use_sequence_augmentation) {
    if (static_cast<int>(objects.size()) > cfg.augment.total_objects) objects.resize(cfg.augment.total_objects);
    const int n_noise = cfg.augment.total_objects - static_cast<int>(objects.size());
    const auto noise = synthesize_noise_objects(objects, n_noise, vocab.n_classes(), cfg.augment, rng);
    seq = augment_sequence(objects, noise, vocab, cfg.augment, rng, cfg.augment.ordering);
  } else {
    seq = construct_sequence(objects, vocab, cfg.augment.ordering, rng);
    if (!cfg.augment.eos_in_training) {
      seq.input.pop_back();
      seq.target.pop_back();
      seq.weights.pop_back();
    }
  }
  apply_token_type_weights(seq, vocab, cfg.train.token_weights);
  return {std::move(image), std::move(seq)};
}

struct StepRecord {
  long step = 0;
  int epoch = 0;
  double lr = 0;
  double loss = 0;
  int examples = 0;  // sequences in the batch, views included
};

struct EvalRecord {
  long step = 0;
  EvalResult metrics;
};

struct EvalOutput {
  EvalResult metrics;
  std::vector<EvalImage> ground_truth;
  DetectionsByImage detections;
};

// Decodes every sample and scores the detections. Nucleus draws for image i
// come from stream (decode.seed, image_id).
template <class S>
EvalOutput evaluate_model(const Model<S>& model, const Vocabulary& vocab, const std::vector<Sample>& samples,
                          const DecodeConfig& decode) {
  EvalOutput out;
  for (const auto& s : samples) {
    Rng rng = Rng::stream(decode.seed, static_cast<std::uint64_t>(s.image_id));
    const Image input = model_input(s.image, model.config().image_size);
    out.detections[s.image_id] = detect(model, input, vocab, decode, rng);
    out.ground_truth.push_back(to_eval_image(s));
  }
  out.metrics = average_precision(out.ground_truth, out.detections);
  return out;
}

class Trainer {
 public:
  explicit Trainer(RunConfig cfg) : cfg_(std::move(cfg)) {
    finalize(cfg_);
    vocab_ = cfg_.vocabulary();
    model_ = Model<float>::initialize(cfg_.model, cfg_.train.seed ^ stream_key::init);
    optim_ = AdamState<float>::zeros_like(model_.params());
    load_data();
  }

  explicit Trainer(const Checkpoint<float>& ck) : cfg_(ck.config) {
    finalize(cfg_);
    vocab_ = cfg_.vocabulary();
    model_ = Model<float>(cfg_.model, ck.params);
    optim_ = ck.optimizer ? *ck.optimizer : AdamState<float>::zeros_like(model_.params());
    step_ = ck.step;
    load_data();
  }

  const RunConfig& config() const { return cfg_; }
  const Model<float>& model() const { return model_; }
  const Vocabulary& vocabulary() const { return vocab_; }
  long step() const { return step_; }
  const std::vector<Sample>& val_samples() const { return val_; }

  long steps_per_epoch() const {
    return (cfg_.data.dataset_size + cfg_.train.batch_size - 1) / cfg_.train.batch_size;
  }
  long total_steps() const {
    const long full = steps_per_epoch() * cfg_.train.epochs;
    return cfg_.train.max_steps > 0 ? std::min<long>(full, cfg_.train.max_steps) : full;
  }
  long warmup_steps() const {
    return std::min(total_steps(), static_cast<long>(std::llround(cfg_.train.warmup_epochs * steps_per_epoch())));
  }
  bool done() const { return step_ >= total_steps(); }

  // Dataset indices for the batch at `step`.
  std::vector<std::size_t> batch_indices(long step) const {
    const long spe = steps_per_epoch();
    const long epoch = step / spe, k = step % spe;
    std::vector<std::size_t> perm(train_.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    Rng rng = Rng::stream(cfg_.train.seed ^ stream_key::shuffle, static_cast<std::uint64_t>(epoch));
    rng.shuffle(perm.begin(), perm.end());
    const std::size_t lo = static_cast<std::size_t>(k) * cfg_.train.batch_size;
    const std::size_t hi = std::min(perm.size(), lo + static_cast<std::size_t>(cfg_.train.batch_size));
    return {perm.begin() + static_cast<std::ptrdiff_t>(lo), perm.begin() + static_cast<std::ptrdiff_t>(hi)};
  }

  StepRecord train_one_step() {
    if (done()) throw std::logic_error("Trainer: no steps left");
    const auto idx = batch_indices(step_);
    const int views = cfg_.train.two_views_per_image ? 2 : 1;
    std::vector<Image> images;
    std::vector<TokenSequence> seqs;
    images.reserve(idx.size() * views);
    seqs.reserve(idx.size() * views);
    for (std::size_t b = 0; b < idx.size(); ++b)
      for (int v = 0; v < views; ++v) {
        Rng rng = Rng::stream(cfg_.train.seed ^ stream_key::augment,
                              static_cast<std::uint64_t>(step_) * 4096 + b * views + static_cast<std::size_t>(v));
        auto [img, seq] = make_training_view(train_[idx[b]], cfg_, rng);
        images.push_back(std::move(img));
        seqs.push_back(std::move(seq));
      }
    std::vector<Example> batch;
    for (std::size_t i = 0; i < images.size(); ++i) batch.push_back({&images[i], &seqs[i]});
    const double lr = learning_rate_at(step_, total_steps(), warmup_steps(), cfg_.train.learning_rate);
    Rng drop = Rng::stream(cfg_.train.seed ^ stream_key::dropout, static_cast<std::uint64_t>(step_));
    StepRecord rec;
    rec.step = step_;
    rec.epoch = static_cast<int>(step_ / steps_per_epoch());
    rec.lr = lr;
    rec.loss = train_step<float>(model_, optim_, batch, lr, cfg_.train, drop);
    rec.examples = static_cast<int>(batch.size());
    ++step_;
    return rec;
  }

  EvalOutput evaluate(int max_samples = -1, std::optional<DecodeConfig> decode = std::nullopt) const {
    std::vector<Sample> subset = val_;
    if (max_samples >= 0 && static_cast<std::size_t>(max_samples) < subset.size())
      subset.resize(static_cast<std::size_t>(max_samples));
    return evaluate_model(model_, vocab_, subset, decode.value_or(cfg_.decode));
  }

  Checkpoint<float> checkpoint() const {
    return {cfg_, step_, class_names(cfg_.data), model_.params(), optim_};
  }

 private:
  void load_data() {
    train_ = synthetic_split(cfg_.data, Split::train, cfg_.data.dataset_size);
    val_ = synthetic_split(cfg_.data, Split::val, cfg_.data.val_size);
    if (train_.empty()) throw ConfigError("data.dataset_size must be positive for training");
  }

  RunConfig cfg_;
  Vocabulary vocab_{2, 1};
  Model<float> model_;
  AdamState<float> optim_;
  long step_ = 0;
  std::vector<Sample> train_, val_;
};

inline void write_step_log(std::ostream& os, const StepRecord& r) {
  os << "step=" << r.step + 1 << " epoch=" << r.epoch << " examples=" << r.examples << std::scientific
     << std::setprecision(6) << " lr=" << r.lr << std::fixed << " loss=" << r.loss << std::defaultfloat << '\n';
}

inline void write_eval_log(std::ostream& os, long step, const EvalResult& r) {
  os << "eval step=" << step;
  const auto f = r.fields();
  for (std::size_t i = 0; i < f.size(); ++i) os << ' ' << EvalResult::kFieldNames[i] << '=' << format_metric(f[i]);
  os << '\n';
}

struct TrainRunOptions {
  std::string out_dir;       // checkpoints and train_log.txt; empty: nothing written
  std::ostream* progress = nullptr;
  long stop_after = -1;      // stop once this many steps have run in this call
};

// Runs the remaining steps, logging every log_every steps (and the last),
// checkpointing every checkpoint_every steps and at the end.
inline void run_training(Trainer& trainer, const TrainRunOptions& opts) {
  const auto& cfg = trainer.config().train;
  std::ofstream log;
  if (!opts.out_dir.empty()) {
    std::filesystem::create_directories(opts.out_dir);
    log.open(opts.out_dir + "/train_log.txt", trainer.step() == 0 ? std::ios::trunc : std::ios::app);
    if (!log) throw std::runtime_error("cannot write " + opts.out_dir + "/train_log.txt");
  }
  auto emit = [&](auto&& fn) {
    if (log.is_open()) fn(log);
    if (opts.progress) fn(*opts.progress), opts.progress->flush();
  };
  long ran = 0;
  while (!trainer.done() && (opts.stop_after < 0 || ran < opts.stop_after)) {
    const StepRecord rec = trainer.train_one_step();
    ++ran;
    const long s = trainer.step();
    const bool last = trainer.done() || ran == opts.stop_after;
    if ((cfg.log_every > 0 && s % cfg.log_every == 0) || last) emit([&](std::ostream& os) { write_step_log(os, rec); });
    if (cfg.eval_every > 0 && s % cfg.eval_every == 0) {
      const auto ev = trainer.evaluate(cfg.eval_samples);
      emit([&](std::ostream& os) { write_eval_log(os, s, ev.metrics); });
    }
    if (!opts.out_dir.empty() && cfg.checkpoint_every > 0 && s % cfg.checkpoint_every == 0)
      save_checkpoint(trainer.checkpoint(), opts.out_dir + "/checkpoint_step" + std::to_string(s) + ".bin");
    if (log.is_open()) log.flush();
  }
  if (!opts.out_dir.empty()) save_checkpoint(trainer.checkpoint(), opts.out_dir + "/checkpoint.bin");
}

// ---- ablations -------------------------------------------------------------

struct AblationRow {
  std::string label;
  std::uint64_t seed = 0;
  double eos_offset = 0;
  EvalResult metrics;
};

inline void write_ablation_table(std::ostream& os, const std::string& label_column, const std::vector<AblationRow>& rows,
                                 bool with_offset) {
  os << label_column << ",seed";
  if (with_offset) os << ",eos_offset";
  for (const char* n : EvalResult::kFieldNames) os << ',' << n;
  os << '\n';
  for (const auto& r : rows) {
    os << r.label << ',' << r.seed;
    if (with_offset) os << ',' << detail::format_double(r.eos_offset);
    for (const auto& f : r.metrics.fields()) os << ',' << format_metric(f);
    os << '\n';
  }
}

inline EvalResult train_and_evaluate(const RunConfig& cfg, std::ostream* progress = nullptr) {
  Trainer t(cfg);
  run_training(t, {"", progress, -1});
  return t.evaluate().metrics;
}

// One model per (strategy, seed); rows in strategy-major order.
inline std::vector<AblationRow> run_ablation_ordering(const RunConfig& base,
                                                      const std::vector<OrderingStrategy>& strategies,
                                                      const std::vector<std::uint64_t>& seeds,
                                                      std::ostream* progress = nullptr) {
  std::vector<AblationRow> rows;
  for (auto strategy : strategies)
    for (auto seed : seeds) {
      RunConfig cfg = base;
      cfg.augment.ordering = strategy;
      cfg.train.seed = seed;
      if (progress) *progress << "ablate-ordering strategy=" << to_string(strategy) << " seed=" << seed << '\n';
      rows.push_back({std::string(to_string(strategy)), seed, cfg.decode.eos_offset, train_and_evaluate(cfg)});
    }
  return rows;
}

// Trains a model with and one without sequence augmentation per seed and
// evaluates both at every EOS offset. The augmented model decodes at fixed
// length unless `fixed_length_for_augmented` is off.
inline std::vector<AblationRow> run_ablation_seqaug(const RunConfig& base, const std::vector<double>& eos_offsets,
                                                    const std::vector<std::uint64_t>& seeds,
                                                    bool fixed_length_for_augmented = true,
                                                    std::ostream* progress = nullptr) {
  std::vector<AblationRow> rows;
  for (auto seed : seeds)
    for (bool seqaug : {true, false}) {
      RunConfig cfg = base;
      cfg.train.seed = seed;
      cfg.augment.use_sequence_augmentation = seqaug;
      if (progress) *progress << "ablate-seqaug seqaug=" << (seqaug ? "with" : "without") << " seed=" << seed << '\n';
      Trainer t(cfg);
      run_training(t, {"", nullptr, -1});
      for (double off : eos_offsets) {
        DecodeConfig dc = t.config().decode;
        dc.eos_offset = off;
        dc.fixed_length = seqaug && fixed_length_for_augmented;
        rows.push_back({seqaug ? "with" : "without", seed, off, t.evaluate(-1, dc).metrics});
      }
    }
  return rows;
}

}  // namespace pix2seq
