#pragma once

// Autoregressive decoding: argmax and nucleus sampling, EOS logit offset,
// fixed-length decoding, and extraction of scored detections.

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "pix2seq/codec.hpp"
#include "pix2seq/model.hpp"
#include "pix2seq/rng.hpp"

namespace pix2seq {

enum class DecodeMode { argmax, nucleus };

inline std::string_view to_string(DecodeMode m) { return m == DecodeMode::argmax ? "argmax" : "nucleus"; }

inline DecodeMode parse_decode_mode(std::string_view s) {
  if (s == "argmax") return DecodeMode::argmax;
  if (s == "nucleus") return DecodeMode::nucleus;
  throw std::invalid_argument("unknown decode mode: " + std::string(s));
}

struct DecodeConfig {
  DecodeMode mode = DecodeMode::nucleus;
  double p = 0.4;
  double eos_offset = 0.0;  // added to the EOS logit; -inf disables EOS
  int max_objects = 100;
  bool fixed_length = false;  // decode exactly 5 * max_objects tokens, EOS masked
  std::uint64_t seed = 0;
  friend bool operator==(const DecodeConfig&, const DecodeConfig&) = default;
};

inline void validate(const DecodeConfig& c) {
  if (!(c.p >= 0 && c.p <= 1)) throw std::invalid_argument("decode.p must be in [0, 1]");
  if (c.max_objects < 1) throw std::invalid_argument("decode.max_objects must be positive");
  if (std::isnan(c.eos_offset)) throw std::invalid_argument("decode.eos_offset must not be NaN");
}

struct Detection {
  BBox box;
  int class_id = 0;
  double score = 0.0;
  friend bool operator==(const Detection&, const Detection&) = default;
};

// Token ids by descending probability, ties by ascending id.
inline std::vector<std::size_t> rank_tokens(const std::vector<double>& probs) {
  std::vector<std::size_t> order(probs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  return order;
}

// Size of the top-p set: the smallest ranked prefix with mass >= p, at least
// one token; the whole vocabulary if rounding keeps the mass below p.
inline std::size_t nucleus_size(const std::vector<double>& probs, const std::vector<std::size_t>& order, double p) {
  double mass = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    mass += probs[order[k]];
    if (mass >= p) return k + 1;
  }
  return order.size();
}

inline std::vector<double> top_p_filter(const std::vector<double>& probs, double p) {
  if (probs.empty()) return {};
  const auto order = rank_tokens(probs);
  const std::size_t keep = nucleus_size(probs, order, p);
  double kept_mass = 0;
  for (std::size_t k = 0; k < keep; ++k) kept_mass += probs[order[k]];
  std::vector<double> out(probs.size(), 0.0);
  for (std::size_t k = 0; k < keep; ++k) out[order[k]] = kept_mass > 0 ? probs[order[k]] / kept_mass : 1.0 / keep;
  return out;
}

inline Token argmax_token(const std::vector<double>& probs) {
  return static_cast<Token>(std::max_element(probs.begin(), probs.end()) - probs.begin());
}

inline Token sample_token(const std::vector<double>& probs, DecodeMode mode, double p, Rng& rng) {
  if (probs.empty()) throw std::invalid_argument("sample_token: empty distribution");
  if (mode == DecodeMode::argmax) return argmax_token(probs);
  const auto filtered = top_p_filter(probs, p);
  const double u = rng.uniform();
  double acc = 0;
  Token last = 0;
  for (std::size_t i = 0; i < filtered.size(); ++i) {
    if (filtered[i] <= 0) continue;
    acc += filtered[i];
    last = static_cast<Token>(i);
    if (u < acc) return last;
  }
  return last;
}

template <class S>
std::vector<double> softmax_double(const ColVector<S>& logits) {
  std::vector<double> out(static_cast<std::size_t>(logits.size()));
  double mx = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < logits.size(); ++i) mx = std::max(mx, static_cast<double>(logits(i)));
  double sum = 0;
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    const double e = std::exp(static_cast<double>(logits(i)) - mx);
    out[static_cast<std::size_t>(i)] = e;
    sum += e;
  }
  for (auto& v : out) v /= sum;
  return out;
}

struct GenerateResult {
  std::vector<Token> tokens;
  std::vector<std::vector<double>> class_slot_probs;  // one per 5th position
  std::vector<std::vector<double>> cross_attention;   // per generated token, when requested
};

struct GenerateOptions {
  bool record_attention = false;
  std::vector<Token> forced_prefix;  // fed verbatim before sampling starts
};

template <class S>
GenerateResult generate(const Model<S>& model, const Tensor<S>& features, const DecodeConfig& cfg, Rng& rng,
                        const GenerateOptions& opts = {}) {
  validate(cfg);
  const int max_len = 5 * cfg.max_objects;
  if (max_len > model.config().max_target_len)
    throw std::invalid_argument("decode.max_objects needs " + std::to_string(max_len) +
                                " positions but model.max_target_len is " +
                                std::to_string(model.config().max_target_len));
  auto state = model.begin_decode(features);
  GenerateResult out;
  Token prev = Vocabulary::eos();
  ColVector<S> attn;
  for (int pos = 0; pos < max_len; ++pos) {
    ColVector<S> logits = state.step(prev, opts.record_attention ? &attn : nullptr);
    if (opts.record_attention) out.cross_attention.emplace_back(attn.data(), attn.data() + attn.size());
    if (cfg.fixed_length)
      logits(0) = -std::numeric_limits<S>::infinity();
    else if (cfg.eos_offset != 0.0)
      logits(0) += static_cast<S>(cfg.eos_offset);
    const auto probs = softmax_double(logits);
    if (pos % 5 == 4) out.class_slot_probs.push_back(probs);
    Token tok;
    if (static_cast<std::size_t>(pos) < opts.forced_prefix.size())
      tok = opts.forced_prefix[static_cast<std::size_t>(pos)];
    else
      tok = sample_token(probs, cfg.mode, cfg.p, rng);
    out.tokens.push_back(tok);
    prev = tok;
    if (!cfg.fixed_length && tok == Vocabulary::eos()) break;
  }
  return out;
}

// Noise-class emissions take the most likely real class of their slot; every
// detection is scored by its slot probability of the chosen class token.
inline std::vector<Detection> extract_detections(const std::vector<Token>& tokens,
                                                 const std::vector<std::vector<double>>& class_slot_probs,
                                                 const Vocabulary& vocab) {
  std::vector<Detection> out;
  for (const auto& obj : parse_sequence(tokens, vocab)) {
    if (obj.slot >= class_slot_probs.size())
      throw std::invalid_argument("extract_detections: missing class-slot distribution");
    const auto& dist = class_slot_probs[obj.slot];
    int cls = 0;
    if (vocab.is_noise(obj.class_token)) {
      double best = -1;
      for (int c = 0; c < vocab.n_classes(); ++c) {
        const double pc = dist.at(static_cast<std::size_t>(vocab.class_token(c)));
        if (pc > best) {
          best = pc;
          cls = c;
        }
      }
    } else {
      cls = vocab.class_of(obj.class_token);
    }
    out.push_back({obj.box, cls, dist.at(static_cast<std::size_t>(vocab.class_token(cls)))});
  }
  std::stable_sort(out.begin(), out.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  return out;
}

template <class S>
std::vector<Detection> detect(const Model<S>& model, const Image& image, const Vocabulary& vocab,
                              const DecodeConfig& cfg, Rng& rng) {
  const auto features = model.encode_image(image);
  const auto result = generate(model, features, cfg, rng);
  return extract_detections(result.tokens, result.class_slot_probs, vocab);
}

// Line format: image_id class_id score y_min x_min y_max x_max (6 decimals).
inline void write_detection_lines(std::ostream& os, std::int64_t image_id, const std::vector<Detection>& dets) {
  os << std::fixed << std::setprecision(6);
  for (const auto& d : dets)
    os << image_id << ' ' << d.class_id << ' ' << d.score << ' ' << d.box.y_min << ' ' << d.box.x_min << ' '
       << d.box.y_max << ' ' << d.box.x_max << '\n';
}

struct ImageDetection {
  std::int64_t image_id = 0;
  Detection detection;
};

inline std::vector<ImageDetection> read_detection_lines(std::istream& is) {
  std::vector<ImageDetection> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos || line[0] == '#') continue;
    std::istringstream ls(line);
    ImageDetection d;
    auto& b = d.detection.box;
    std::string extra;
    if (!(ls >> d.image_id >> d.detection.class_id >> d.detection.score >> b.y_min >> b.x_min >> b.y_max >> b.x_max) ||
        (ls >> extra))
      throw std::runtime_error("detections line " + std::to_string(line_no) + ": expected 7 fields");
    out.push_back(d);
  }
  return out;
}

}  // namespace pix2seq
