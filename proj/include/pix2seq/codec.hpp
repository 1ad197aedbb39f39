#pragma once

// Conversion between sets of (box, class) objects and discrete token
// sequences: coordinate quantization, vocabulary layout, object ordering,
// serialization and parsing of generated sequences.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "pix2seq/rng.hpp"

namespace pix2seq {

using Token = std::int32_t;

// Normalized corner coordinates; y by image height, x by image width.
struct BBox {
  double y_min = 0.0;
  double x_min = 0.0;
  double y_max = 0.0;
  double x_max = 0.0;

  double height() const { return y_max - y_min; }
  double width() const { return x_max - x_min; }
  double area() const { return height() * width(); }
  bool valid() const {
    return 0.0 <= y_min && y_min <= y_max && y_max <= 1.0 && 0.0 <= x_min && x_min <= x_max &&
           x_max <= 1.0;
  }
  BBox clipped() const {
    auto c = [](double v) { return std::clamp(v, 0.0, 1.0); };
    BBox b{c(y_min), c(x_min), c(y_max), c(x_max)};
    if (b.y_min > b.y_max) std::swap(b.y_min, b.y_max);
    if (b.x_min > b.x_max) std::swap(b.x_min, b.x_max);
    return b;
  }
  friend bool operator==(const BBox&, const BBox&) = default;
};

struct AnnotatedObject {
  BBox box;
  int class_id = 0;
  friend bool operator==(const AnnotatedObject&, const AnnotatedObject&) = default;
};

// quantize(x) = floor(x * (n_bins - 1)); the result is a bin in [0, n_bins-1].
inline int quantize_coord(double x, int n_bins) {
  if (n_bins < 2) throw std::domain_error("quantize_coord: n_bins must be >= 2");
  if (!(x >= 0.0 && x <= 1.0)) throw std::domain_error("quantize_coord: x outside [0, 1]");
  const int k = static_cast<int>(x * static_cast<double>(n_bins - 1));
  return std::min(k, n_bins - 1);
}

inline double dequantize_coord(int k, int n_bins) {
  if (n_bins < 2) throw std::domain_error("dequantize_coord: n_bins must be >= 2");
  if (k < 0 || k > n_bins - 1) throw std::domain_error("dequantize_coord: bin out of range");
  return static_cast<double>(k) / static_cast<double>(n_bins - 1);
}

enum class TokenKind { eos, coord, class_label, noise, na };

// Token id layout:
//   0                       EOS
//   [1, n_bins]             coordinate bins (bin k -> token k + 1)
//   1 + n_bins + c          class c
//   1 + n_bins + n_classes  NOISE class
//   2 + n_bins + n_classes  NA (zero-weight placeholder)
class Vocabulary {
 public:
  Vocabulary(int n_bins, int n_classes) : n_bins_(n_bins), n_classes_(n_classes) {
    if (n_bins < 2) throw std::domain_error("Vocabulary: n_bins must be >= 2");
    if (n_classes < 1) throw std::domain_error("Vocabulary: n_classes must be >= 1");
  }

  int n_bins() const { return n_bins_; }
  int n_classes() const { return n_classes_; }
  int size() const { return n_bins_ + n_classes_ + 3; }

  static constexpr Token eos() { return 0; }
  Token coord_token(int bin) const {
    if (bin < 0 || bin >= n_bins_) throw std::domain_error("Vocabulary: bin out of range");
    return bin + 1;
  }
  Token class_token(int class_id) const {
    if (class_id < 0 || class_id >= n_classes_)
      throw std::domain_error("Vocabulary: class id out of range");
    return 1 + n_bins_ + class_id;
  }
  Token noise_token() const { return 1 + n_bins_ + n_classes_; }
  Token na_token() const { return 2 + n_bins_ + n_classes_; }

  bool contains(Token t) const { return t >= 0 && t < size(); }
  bool is_eos(Token t) const { return t == eos(); }
  bool is_coord(Token t) const { return t >= 1 && t <= n_bins_; }
  bool is_class(Token t) const { return t > n_bins_ && t <= n_bins_ + n_classes_; }
  bool is_noise(Token t) const { return t == noise_token(); }
  bool is_na(Token t) const { return t == na_token(); }

  TokenKind kind(Token t) const {
    if (!contains(t)) throw std::domain_error("Vocabulary: token id out of range");
    if (is_eos(t)) return TokenKind::eos;
    if (is_coord(t)) return TokenKind::coord;
    if (is_class(t)) return TokenKind::class_label;
    if (is_noise(t)) return TokenKind::noise;
    return TokenKind::na;
  }

  int bin_of(Token t) const { return t - 1; }
  int class_of(Token t) const { return t - 1 - n_bins_; }

  friend bool operator==(const Vocabulary&, const Vocabulary&) = default;

 private:
  int n_bins_;
  int n_classes_;
};

// Paired decoder input / target with per-target loss weights.
struct TokenSequence {
  std::vector<Token> input;
  std::vector<Token> target;
  std::vector<float> weights;

  std::size_t size() const { return target.size(); }
};

enum class OrderingStrategy { random, area, dist2ori, class_id, class_area, class_dist2ori };

inline constexpr OrderingStrategy kAllOrderings[] = {
    OrderingStrategy::random,   OrderingStrategy::area,       OrderingStrategy::dist2ori,
    OrderingStrategy::class_id, OrderingStrategy::class_area, OrderingStrategy::class_dist2ori};

inline std::string_view to_string(OrderingStrategy s) {
  switch (s) {
    case OrderingStrategy::random: return "random";
    case OrderingStrategy::area: return "area";
    case OrderingStrategy::dist2ori: return "dist2ori";
    case OrderingStrategy::class_id: return "class";
    case OrderingStrategy::class_area: return "class_area";
    case OrderingStrategy::class_dist2ori: return "class_dist2ori";
  }
  return "?";
}

inline OrderingStrategy parse_ordering(std::string_view name) {
  for (auto s : kAllOrderings)
    if (to_string(s) == name) return s;
  throw std::invalid_argument("unknown ordering strategy: " + std::string(name));
}

// Permutation of [0, objects.size()) in emission order. Deterministic
// strategies use a stable sort, so ties keep input order. When `class_names`
// is given, the class key is the lexicographic rank of the name instead of
// the numeric id.
inline std::vector<std::size_t> order_indices(const std::vector<AnnotatedObject>& objects,
                                              OrderingStrategy strategy, Rng& rng,
                                              const std::vector<std::string>* class_names = nullptr) {
  std::vector<std::size_t> idx(objects.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (strategy == OrderingStrategy::random) {
    rng.shuffle(idx.begin(), idx.end());
    return idx;
  }

  std::vector<int> class_rank;
  if (class_names) {
    std::vector<int> by_name(class_names->size());
    std::iota(by_name.begin(), by_name.end(), 0);
    std::stable_sort(by_name.begin(), by_name.end(),
                     [&](int a, int b) { return (*class_names)[a] < (*class_names)[b]; });
    class_rank.assign(class_names->size(), 0);
    for (std::size_t r = 0; r < by_name.size(); ++r) class_rank[by_name[r]] = static_cast<int>(r);
  }
  auto class_key = [&](const AnnotatedObject& o) {
    return class_rank.empty() ? o.class_id : class_rank.at(o.class_id);
  };
  auto area = [](const AnnotatedObject& o) { return o.box.area(); };
  auto dist = [](const AnnotatedObject& o) {
    return std::sqrt(o.box.y_min * o.box.y_min + o.box.x_min * o.box.x_min);
  };

  auto less = [&](std::size_t a, std::size_t b) {
    const auto& oa = objects[a];
    const auto& ob = objects[b];
    switch (strategy) {
      case OrderingStrategy::area: return area(oa) > area(ob);
      case OrderingStrategy::dist2ori: return dist(oa) < dist(ob);
      case OrderingStrategy::class_id: return class_key(oa) < class_key(ob);
      case OrderingStrategy::class_area:
        if (class_key(oa) != class_key(ob)) return class_key(oa) < class_key(ob);
        return area(oa) > area(ob);
      case OrderingStrategy::class_dist2ori:
        if (class_key(oa) != class_key(ob)) return class_key(oa) < class_key(ob);
        return dist(oa) < dist(ob);
      case OrderingStrategy::random: break;
    }
    return false;
  };
  std::stable_sort(idx.begin(), idx.end(), less);
  return idx;
}

inline std::vector<AnnotatedObject> order_objects(const std::vector<AnnotatedObject>& objects,
                                                  OrderingStrategy strategy, Rng& rng) {
  std::vector<AnnotatedObject> out;
  out.reserve(objects.size());
  for (auto i : order_indices(objects, strategy, rng)) out.push_back(objects[i]);
  return out;
}

inline std::vector<Token> encode_box(const BBox& box, const Vocabulary& vocab) {
  const int n = vocab.n_bins();
  return {vocab.coord_token(quantize_coord(box.y_min, n)), vocab.coord_token(quantize_coord(box.x_min, n)),
          vocab.coord_token(quantize_coord(box.y_max, n)), vocab.coord_token(quantize_coord(box.x_max, n))};
}

// [y_min, x_min, y_max, x_max, class] as token ids.
inline std::vector<Token> encode_object(const AnnotatedObject& obj, const Vocabulary& vocab) {
  if (!obj.box.valid()) throw std::domain_error("encode_object: box violates [0,1] ordering");
  auto tokens = encode_box(obj.box, vocab);
  tokens.push_back(vocab.class_token(obj.class_id));
  return tokens;
}

// Objects in the given order followed by EOS; input == target, all weights 1.
inline TokenSequence construct_sequence(const std::vector<AnnotatedObject>& objects, const Vocabulary& vocab,
                                        OrderingStrategy strategy, Rng& rng) {
  TokenSequence seq;
  seq.target.reserve(5 * objects.size() + 1);
  for (const auto& obj : order_objects(objects, strategy, rng)) {
    const auto t = encode_object(obj, vocab);
    seq.target.insert(seq.target.end(), t.begin(), t.end());
  }
  seq.target.push_back(Vocabulary::eos());
  seq.input = seq.target;
  seq.weights.assign(seq.target.size(), 1.0f);
  return seq;
}

struct ParsedObject {
  BBox box;
  Token class_token = 0;
  std::size_t slot = 0;  // index of the 5-tuple within the sequence
};

// Reads 5-tuples up to the first EOS. Tuples holding a non-coordinate token in
// a coordinate slot or a non-class token in the class slot are dropped;
// inverted coordinate pairs are swapped.
inline std::vector<ParsedObject> parse_sequence(const std::vector<Token>& tokens, const Vocabulary& vocab) {
  std::vector<ParsedObject> out;
  std::size_t end = tokens.size();
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] == Vocabulary::eos()) {
      end = i;
      break;
    }
  }
  for (std::size_t s = 0; s + 5 <= end; s += 5) {
    bool ok = true;
    for (std::size_t j = 0; j < 4; ++j) ok = ok && vocab.is_coord(tokens[s + j]);
    const Token cls = tokens[s + 4];
    ok = ok && (vocab.is_class(cls) || vocab.is_noise(cls));
    if (!ok) continue;
    auto coord = [&](std::size_t j) { return dequantize_coord(vocab.bin_of(tokens[s + j]), vocab.n_bins()); };
    BBox b{coord(0), coord(1), coord(2), coord(3)};
    if (b.y_min > b.y_max) std::swap(b.y_min, b.y_max);
    if (b.x_min > b.x_max) std::swap(b.x_min, b.x_max);
    out.push_back({b, cls, s / 5});
  }
  return out;
}

// Golden-file format: whitespace-separated decimal ids, one sequence per line.
inline void write_token_lines(std::ostream& os, const std::vector<std::vector<Token>>& sequences) {
  for (const auto& seq : sequences) {
    for (std::size_t i = 0; i < seq.size(); ++i) os << (i ? " " : "") << seq[i];
    os << '\n';
  }
}

inline std::vector<std::vector<Token>> read_token_lines(std::istream& is) {
  std::vector<std::vector<Token>> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::vector<Token> seq;
    std::string word;
    while (ls >> word) {
      std::size_t used = 0;
      long v = 0;
      try {
        v = std::stol(word, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != word.size() || v < 0)
        throw std::runtime_error("token line " + std::to_string(line_no) + ": bad token '" + word + "'");
      seq.push_back(static_cast<Token>(v));
    }
    out.push_back(std::move(seq));
  }
  return out;
}

}  // namespace pix2seq
