#pragma once

// Run configuration: one INI file with [model], [train], [augment], [decode]
// and [data] sections. Keys are the struct field names.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "pix2seq/augment.hpp"
#include "pix2seq/data.hpp"
#include "pix2seq/infer.hpp"
#include "pix2seq/model.hpp"
#include "pix2seq/optim.hpp"

namespace pix2seq {

struct RunConfig {
  ModelConfig model;
  int n_bins = 1000;
  TrainConfig train;
  AugmentConfig augment;
  DecodeConfig decode;
  SyntheticConfig data;
  std::string coco_annotations;  // optional; used by codec/eval tooling only
  friend bool operator==(const RunConfig&, const RunConfig&) = default;

  Vocabulary vocabulary() const { return Vocabulary(n_bins, data.n_classes); }
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string format_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& key, std::string s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.pop_back();
  std::size_t start = s.find_first_not_of(" \t");
  if (start == std::string::npos) throw ConfigError(key + ": empty value");
  s = s.substr(start);
  if (s == "inf" || s == "+inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  double v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw ConfigError(key + ": expected a number, got '" + s + "'");
  return v;
}

inline long long parse_integer(const std::string& key, const std::string& s) {
  const double v = parse_double(key, s);
  if (v != std::floor(v) || std::abs(v) > 9e15) throw ConfigError(key + ": expected an integer, got '" + s + "'");
  return static_cast<long long>(v);
}

inline bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1" || s == "on" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "off" || s == "no") return false;
  throw ConfigError(key + ": expected a boolean, got '" + s + "'");
}

struct Field {
  std::string section;
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

inline std::vector<Field> config_fields() {
  std::vector<Field> f;
  auto add_int = [&](const char* sec, const char* key, auto getter) {
    f.push_back({sec, key, [getter](const RunConfig& c) { return std::to_string(*getter(const_cast<RunConfig&>(c))); },
                 [getter, sec, key](RunConfig& c, const std::string& v) {
                   using V = std::remove_reference_t<decltype(*getter(c))>;
                   *getter(c) = static_cast<V>(parse_integer(std::string(sec) + "." + key, v));
                 }});
  };
  auto add_real = [&](const char* sec, const char* key, auto getter) {
    f.push_back({sec, key, [getter](const RunConfig& c) { return format_double(*getter(const_cast<RunConfig&>(c))); },
                 [getter, sec, key](RunConfig& c, const std::string& v) {
                   *getter(c) = parse_double(std::string(sec) + "." + key, v);
                 }});
  };
  auto add_bool = [&](const char* sec, const char* key, auto getter) {
    f.push_back({sec, key,
                 [getter](const RunConfig& c) { return std::string(*getter(const_cast<RunConfig&>(c)) ? "true" : "false"); },
                 [getter, sec, key](RunConfig& c, const std::string& v) {
                   *getter(c) = parse_bool(std::string(sec) + "." + key, v);
                 }});
  };
#define P2S_INT(sec, grp, name) add_int(sec, #name, [](RunConfig& c) { return &c.grp.name; })
#define P2S_REAL(sec, grp, name) add_real(sec, #name, [](RunConfig& c) { return &c.grp.name; })
#define P2S_BOOL(sec, grp, name) add_bool(sec, #name, [](RunConfig& c) { return &c.grp.name; })
  P2S_INT("model", model, image_size);
  P2S_INT("model", model, patch_size);
  P2S_INT("model", model, channels);
  P2S_INT("model", model, d_model);
  P2S_INT("model", model, n_heads);
  P2S_INT("model", model, d_ffn);
  P2S_INT("model", model, n_encoder_layers);
  P2S_INT("model", model, n_decoder_layers);
  P2S_INT("model", model, vocab_size);
  P2S_INT("model", model, max_target_len);
  P2S_REAL("model", model, dropout_rate);
  P2S_REAL("model", model, stochastic_depth_rate);
  add_int("model", "n_bins", [](RunConfig& c) { return &c.n_bins; });

  P2S_REAL("train", train, learning_rate);
  P2S_REAL("train", train, weight_decay);
  P2S_REAL("train", train, warmup_epochs);
  P2S_INT("train", train, epochs);
  P2S_INT("train", train, batch_size);
  P2S_BOOL("train", train, two_views_per_image);
  P2S_INT("train", train, seed);
  P2S_REAL("train", train, beta1);
  P2S_REAL("train", train, beta2);
  P2S_REAL("train", train, adam_eps);
  P2S_REAL("train", train, grad_clip_norm);
  f.push_back({"train", "loss_normalization",
               [](const RunConfig& c) {
                 return std::string(c.train.loss_normalization == LossNormalization::mean ? "mean" : "sum");
               },
               [](RunConfig& c, const std::string& v) {
                 if (v == "mean")
                   c.train.loss_normalization = LossNormalization::mean;
                 else if (v == "sum")
                   c.train.loss_normalization = LossNormalization::sum;
                 else
                   throw ConfigError("train.loss_normalization: expected mean or sum, got '" + v + "'");
               }});
  add_real("train", "token_weight_coord", [](RunConfig& c) { return &c.train.token_weights.coord; });
  add_real("train", "token_weight_class", [](RunConfig& c) { return &c.train.token_weights.class_label; });
  add_real("train", "token_weight_noise", [](RunConfig& c) { return &c.train.token_weights.noise; });
  add_real("train", "token_weight_eos", [](RunConfig& c) { return &c.train.token_weights.eos; });
  P2S_INT("train", train, max_steps);
  P2S_INT("train", train, log_every);
  P2S_INT("train", train, checkpoint_every);
  P2S_INT("train", train, eval_every);
  P2S_INT("train", train, eval_samples);

  P2S_INT("augment", augment, total_objects);
  P2S_REAL("augment", augment, jitter_fraction);
  P2S_REAL("augment", augment, jitter_magnitude);
  P2S_REAL("augment", augment, class_dropout_p);
  f.push_back({"augment", "scale_range",
               [](const RunConfig& c) {
                 return format_double(c.augment.scale_min) + ", " + format_double(c.augment.scale_max);
               },
               [](RunConfig& c, const std::string& v) {
                 const auto comma = v.find(',');
                 if (comma == std::string::npos) throw ConfigError("augment.scale_range: expected 'min, max'");
                 c.augment.scale_min = parse_double("augment.scale_range", v.substr(0, comma));
                 c.augment.scale_max = parse_double("augment.scale_range", v.substr(comma + 1));
               }});
  P2S_INT("augment", augment, crop_size);
  P2S_BOOL("augment", augment, use_sequence_augmentation);
  P2S_BOOL("augment", augment, eos_in_training);
  f.push_back({"augment", "ordering", [](const RunConfig& c) { return std::string(to_string(c.augment.ordering)); },
               [](RunConfig& c, const std::string& v) {
                 try {
                   c.augment.ordering = parse_ordering(v);
                 } catch (const std::invalid_argument& e) {
                   throw ConfigError(std::string("augment.ordering: ") + e.what());
                 }
               }});
  P2S_INT("augment", augment, pad_value);

  f.push_back({"decode", "mode", [](const RunConfig& c) { return std::string(to_string(c.decode.mode)); },
               [](RunConfig& c, const std::string& v) {
                 try {
                   c.decode.mode = parse_decode_mode(v);
                 } catch (const std::invalid_argument& e) {
                   throw ConfigError(std::string("decode.mode: ") + e.what());
                 }
               }});
  P2S_REAL("decode", decode, p);
  P2S_REAL("decode", decode, eos_offset);
  P2S_INT("decode", decode, max_objects);
  P2S_BOOL("decode", decode, fixed_length);
  P2S_INT("decode", decode, seed);

  P2S_INT("data", data, canvas_size);
  P2S_INT("data", data, min_objects);
  P2S_INT("data", data, max_objects);
  P2S_INT("data", data, n_classes);
  P2S_REAL("data", data, min_side_fraction);
  P2S_REAL("data", data, max_side_fraction);
  P2S_INT("data", data, background_min);
  P2S_INT("data", data, background_max);
  P2S_INT("data", data, foreground_min);
  P2S_INT("data", data, foreground_max);
  P2S_REAL("data", data, max_overlap);
  P2S_INT("data", data, dataset_size);
  P2S_INT("data", data, val_size);
  P2S_INT("data", data, seed);
  f.push_back({"data", "coco_annotations", [](const RunConfig& c) { return c.coco_annotations; },
               [](RunConfig& c, const std::string& v) { c.coco_annotations = v; }});
#undef P2S_INT
#undef P2S_REAL
#undef P2S_BOOL
  return f;
}

}  // namespace detail

// Fills derived fields and checks cross-section consistency.
inline void finalize(RunConfig& c) {
  if (c.n_bins < 2) throw ConfigError("model.n_bins must be at least 2");
  const int vocab = Vocabulary(c.n_bins, c.data.n_classes).size();
  if (c.model.vocab_size == 0) c.model.vocab_size = vocab;
  if (c.model.vocab_size != vocab)
    throw ConfigError("model.vocab_size is " + std::to_string(c.model.vocab_size) + " but n_bins and n_classes imply " +
                      std::to_string(vocab));
  if (c.model.image_size != c.augment.crop_size)
    throw ConfigError("augment.crop_size must equal model.image_size");
  const int needed = 5 * std::max(c.augment.total_objects, c.decode.max_objects) + 1;
  if (c.model.max_target_len < needed)
    throw ConfigError("model.max_target_len must be at least " + std::to_string(needed));
  try {
    validate(c.model);
    validate(c.train);
    validate(c.augment);
    validate(c.decode);
    validate(c.data);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (c.data.max_objects > c.augment.total_objects)
    throw ConfigError("data.max_objects must not exceed augment.total_objects");
}

// Applies `key = value` entries from INI text on top of `base`.
inline RunConfig parse_config(const std::string& text, RunConfig base = {}) {
  boost::property_tree::ptree tree;
  std::istringstream in(text);
  try {
    boost::property_tree::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  const auto fields = detail::config_fields();
  for (const auto& [section, entries] : tree) {
    if (entries.empty() && !entries.data().empty())
      throw ConfigError("config: key '" + section + "' is outside any section");
    for (const auto& [key, value] : entries) {
      const auto it = std::find_if(fields.begin(), fields.end(),
                                   [&](const detail::Field& f) { return f.section == section && f.key == key; });
      if (it == fields.end()) throw ConfigError("config: unknown key " + section + "." + key);
      it->set(base, value.data());
    }
  }
  return base;
}

inline RunConfig load_config(const std::string& path, RunConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

// Applies one "section.key=value" override.
inline void apply_override(RunConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq)
    throw ConfigError("override '" + assignment + "' must look like section.key=value");
  const std::string section = assignment.substr(0, dot), key = assignment.substr(dot + 1, eq - dot - 1);
  for (const auto& f : detail::config_fields())
    if (f.section == section && f.key == key) return f.set(c, assignment.substr(eq + 1));
  throw ConfigError("config: unknown key " + section + "." + key);
}

inline std::string write_config(const RunConfig& c) {
  std::ostringstream os;
  std::string section;
  for (const auto& f : detail::config_fields()) {
    if (f.section != section) {
      if (!section.empty()) os << '\n';
      section = f.section;
      os << '[' << section << "]\n";
    }
    os << f.key << " = " << f.get(c) << '\n';
  }
  return os.str();
}

}  // namespace pix2seq
