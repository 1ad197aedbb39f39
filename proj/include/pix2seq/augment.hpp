#pragma once

// Training-time augmentation: scale jitter with random crop (boxes follow the
// same affine map) and sequence augmentation with synthetic noise objects.

#include <cmath>
#include <stdexcept>
#include <utility>
#include <vector>

#include "pix2seq/codec.hpp"
#include "pix2seq/image.hpp"
#include "pix2seq/rng.hpp"

namespace pix2seq {

struct AugmentConfig {
  int total_objects = 100;
  double jitter_fraction = 0.5;
  double jitter_magnitude = 0.2;
  double class_dropout_p = 0.5;
  double scale_min = 0.3;
  double scale_max = 2.0;
  int crop_size = 64;
  bool use_sequence_augmentation = true;
  // Appends EOS after the real objects of training sequences. Only consulted
  // when sequence augmentation is off; augmented sequences are fixed length.
  bool eos_in_training = true;
  OrderingStrategy ordering = OrderingStrategy::random;
  std::uint8_t pad_value = 0;
  friend bool operator==(const AugmentConfig&, const AugmentConfig&) = default;
};

inline void validate(const AugmentConfig& cfg) {
  if (cfg.total_objects < 1) throw std::invalid_argument("augment.total_objects must be positive");
  if (cfg.jitter_fraction < 0 || cfg.jitter_fraction > 1)
    throw std::invalid_argument("augment.jitter_fraction must be in [0, 1]");
  if (cfg.jitter_magnitude < 0) throw std::invalid_argument("augment.jitter_magnitude must be non-negative");
  if (cfg.class_dropout_p < 0 || cfg.class_dropout_p > 1)
    throw std::invalid_argument("augment.class_dropout_p must be in [0, 1]");
  if (cfg.scale_min <= 0 || cfg.scale_max < cfg.scale_min)
    throw std::invalid_argument("augment.scale_min/scale_max must satisfy 0 < min <= max");
  if (cfg.crop_size < 1) throw std::invalid_argument("augment.crop_size must be positive");
}

// Resizes by `scale`, then takes the crop_size x crop_size window whose
// top-left corner sits at (offset_y, offset_x) of the resized image, padding
// with `pad` where the window leaves the image. Boxes are mapped, clipped to
// the window and renormalized; boxes clipped to zero width or height vanish.
inline std::pair<Image, std::vector<AnnotatedObject>> apply_scale_crop(const Image& image,
                                                                       const std::vector<AnnotatedObject>& objects,
                                                                       double scale, int offset_y, int offset_x,
                                                                       int crop_size, std::uint8_t pad = 0) {
  if (image.empty()) throw std::invalid_argument("apply_scale_crop: empty image");
  const int new_h = std::max(1, static_cast<int>(std::lround(image.height * scale)));
  const int new_w = std::max(1, static_cast<int>(std::lround(image.width * scale)));
  const Image resized = (new_h == image.height && new_w == image.width) ? image : resize_bilinear(image, new_h, new_w);

  Image out(crop_size, crop_size, image.channels, pad);
  for (int y = 0; y < crop_size; ++y) {
    const int sy = y + offset_y;
    if (sy < 0 || sy >= new_h) continue;
    for (int x = 0; x < crop_size; ++x) {
      const int sx = x + offset_x;
      if (sx < 0 || sx >= new_w) continue;
      for (int c = 0; c < image.channels; ++c) out.at(y, x, c) = resized.at(sy, sx, c);
    }
  }

  // Window visible content in crop pixels.
  const double lo_y = std::max(0, -offset_y), lo_x = std::max(0, -offset_x);
  const double hi_y = std::min(crop_size, new_h - offset_y), hi_x = std::min(crop_size, new_w - offset_x);
  std::vector<AnnotatedObject> kept;
  for (const auto& obj : objects) {
    auto map = [&](double v, int extent, int offset, double lo, double hi) {
      return std::clamp(v * extent - offset, lo, hi) / crop_size;
    };
    BBox b{map(obj.box.y_min, new_h, offset_y, lo_y, hi_y), map(obj.box.x_min, new_w, offset_x, lo_x, hi_x),
           map(obj.box.y_max, new_h, offset_y, lo_y, hi_y), map(obj.box.x_max, new_w, offset_x, lo_x, hi_x)};
    if (b.height() <= 0 || b.width() <= 0) continue;
    kept.push_back({b.clipped(), obj.class_id});
  }
  return {std::move(out), std::move(kept)};
}

inline std::pair<Image, std::vector<AnnotatedObject>> scale_jitter_crop(const Image& image,
                                                                        const std::vector<AnnotatedObject>& objects,
                                                                        const AugmentConfig& cfg, Rng& rng) {
  if (image.empty()) throw std::invalid_argument("scale_jitter_crop: empty image");
  const double scale = cfg.scale_min == cfg.scale_max ? cfg.scale_min : rng.uniform(cfg.scale_min, cfg.scale_max);
  const int new_h = std::max(1, static_cast<int>(std::lround(image.height * scale)));
  const int new_w = std::max(1, static_cast<int>(std::lround(image.width * scale)));
  const int oy = new_h > cfg.crop_size ? static_cast<int>(rng.between(0, new_h - cfg.crop_size)) : 0;
  const int ox = new_w > cfg.crop_size ? static_cast<int>(rng.between(0, new_w - cfg.crop_size)) : 0;
  return apply_scale_crop(image, objects, scale, oy, ox, cfg.crop_size, cfg.pad_value);
}

enum class NoiseOrigin { jittered, random };

struct NoiseObject {
  BBox box;
  int class_id = 0;  // source label when jittered, uniform random otherwise
  NoiseOrigin origin = NoiseOrigin::random;
};

// floor(jitter_fraction * count) jittered copies of random ground-truth boxes
// (none when gt is empty), the rest uniform random boxes.
inline std::vector<NoiseObject> synthesize_noise_objects(const std::vector<AnnotatedObject>& gt, int count,
                                                         int n_classes, const AugmentConfig& cfg, Rng& rng) {
  if (count < 0) throw std::invalid_argument("synthesize_noise_objects: negative count");
  std::vector<NoiseObject> out;
  out.reserve(count);
  const int n_jitter = gt.empty() ? 0 : static_cast<int>(std::floor(cfg.jitter_fraction * count));
  const double m = cfg.jitter_magnitude;
  for (int i = 0; i < n_jitter; ++i) {
    const auto& src = gt[rng.below(gt.size())];
    const double h = src.box.height(), w = src.box.width();
    const double dy = rng.uniform(-m, m) * h, dx = rng.uniform(-m, m) * w;
    const double dh = rng.uniform(-m, m) * h, dw = rng.uniform(-m, m) * w;
    BBox b{src.box.y_min + dy - dh / 2, src.box.x_min + dx - dw / 2, src.box.y_max + dy + dh / 2,
           src.box.x_max + dx + dw / 2};
    out.push_back({b.clipped(), src.class_id, NoiseOrigin::jittered});
  }
  for (int i = n_jitter; i < count; ++i) {
    double y0 = rng.uniform(), y1 = rng.uniform(), x0 = rng.uniform(), x1 = rng.uniform();
    if (y0 > y1) std::swap(y0, y1);
    if (x0 > x1) std::swap(x0, x1);
    out.push_back({{y0, x0, y1, x1}, static_cast<int>(rng.below(n_classes)), NoiseOrigin::random});
  }
  return out;
}

// Real objects (ordered, class inputs dropped to NA with class_dropout_p)
// followed by noise objects. Noise targets: NA for coordinates (weight 0),
// NOISE for the class slot (weight 1). No EOS; length 5 * total_objects.
inline TokenSequence augment_sequence(const std::vector<AnnotatedObject>& real, const std::vector<NoiseObject>& noise,
                                      const Vocabulary& vocab, const AugmentConfig& cfg, Rng& rng,
                                      OrderingStrategy strategy) {
  if (static_cast<int>(real.size() + noise.size()) != cfg.total_objects)
    throw std::invalid_argument("augment_sequence: real + noise object count must equal total_objects");
  TokenSequence seq;
  const std::size_t len = 5 * static_cast<std::size_t>(cfg.total_objects);
  seq.input.reserve(len);
  seq.target.reserve(len);
  seq.weights.reserve(len);

  for (const auto& obj : order_objects(real, strategy, rng)) {
    const auto tokens = encode_object(obj, vocab);
    const bool drop = cfg.class_dropout_p > 0 && rng.bernoulli(cfg.class_dropout_p);
    for (std::size_t j = 0; j < 5; ++j) {
      seq.input.push_back(j == 4 && drop ? vocab.na_token() : tokens[j]);
      seq.target.push_back(tokens[j]);
      seq.weights.push_back(1.0f);
    }
  }
  for (const auto& n : noise) {
    auto tokens = encode_box(n.box, vocab);
    tokens.push_back(vocab.class_token(n.class_id));
    for (std::size_t j = 0; j < 5; ++j) {
      seq.input.push_back(tokens[j]);
      seq.target.push_back(j == 4 ? vocab.noise_token() : vocab.na_token());
      seq.weights.push_back(j == 4 ? 1.0f : 0.0f);
    }
  }
  return seq;
}

}  // namespace pix2seq
