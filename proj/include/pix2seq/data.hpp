#pragma once

// Synthetic shapes dataset and COCO annotation ingestion.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pix2seq/codec.hpp"
#include "pix2seq/eval.hpp"
#include "pix2seq/image.hpp"
#include "pix2seq/rng.hpp"

namespace pix2seq {

struct Sample {
  Image image;  // empty for annotation-only descriptors
  std::vector<AnnotatedObject> objects;
  std::int64_t image_id = 0;
  int width = 0;
  int height = 0;
  std::string file_name;
};

inline EvalImage to_eval_image(const Sample& s) { return {s.image_id, s.height, s.width, s.objects}; }

enum class ShapeKind { rectangle = 0, ellipse = 1, triangle = 2 };
inline constexpr const char* kShapeNames[] = {"rectangle", "ellipse", "triangle"};

struct SyntheticConfig {
  int canvas_size = 64;
  int min_objects = 1;
  int max_objects = 5;
  int n_classes = 3;
  double min_side_fraction = 0.15;
  double max_side_fraction = 0.5;
  int background_min = 0;
  int background_max = 60;
  int foreground_min = 100;
  int foreground_max = 255;
  double max_overlap = 0.2;  // largest IoU a new shape may have with earlier ones
  int dataset_size = 5000;
  int val_size = 500;
  std::uint64_t seed = 0;
  friend bool operator==(const SyntheticConfig&, const SyntheticConfig&) = default;
};

inline void validate(const SyntheticConfig& c) {
  if (c.canvas_size < 4) throw std::invalid_argument("data.canvas_size must be at least 4");
  if (c.min_objects < 0 || c.min_objects > c.max_objects)
    throw std::invalid_argument("data.min_objects must be in [0, data.max_objects]");
  if (c.n_classes < 1 || c.n_classes > 3) throw std::invalid_argument("data.n_classes must be in [1, 3]");
  if (!(c.min_side_fraction > 0 && c.min_side_fraction <= c.max_side_fraction && c.max_side_fraction <= 1))
    throw std::invalid_argument("data side fractions must satisfy 0 < min <= max <= 1");
  if (c.background_min < 0 || c.background_min > c.background_max || c.background_max > 255)
    throw std::invalid_argument("data background intensity range must be within [0, 255] with min <= max");
  if (c.foreground_min < 0 || c.foreground_min > c.foreground_max || c.foreground_max > 255)
    throw std::invalid_argument("data foreground intensity range must be within [0, 255] with min <= max");
  if (c.foreground_min <= c.background_max)
    throw std::invalid_argument("data.foreground_min must exceed data.background_max");
  if (c.max_overlap < 0 || c.max_overlap > 1) throw std::invalid_argument("data.max_overlap must be in [0, 1]");
  if (c.dataset_size < 0 || c.val_size < 0) throw std::invalid_argument("data sizes must be non-negative");
}

namespace detail {

// Pixel-center membership test for a shape inscribed in [y0,y1)x[x0,x1).
inline bool shape_contains(ShapeKind kind, double y0, double x0, double y1, double x1, double apex, double py,
                           double px) {
  switch (kind) {
    case ShapeKind::rectangle:
      return py >= y0 && py < y1 && px >= x0 && px < x1;
    case ShapeKind::ellipse: {
      const double cy = (y0 + y1) / 2, cx = (x0 + x1) / 2, ry = (y1 - y0) / 2, rx = (x1 - x0) / 2;
      const double dy = (py - cy) / ry, dx = (px - cx) / rx;
      return dy * dy + dx * dx <= 1.0;
    }
    case ShapeKind::triangle: {
      // apex on the top edge at x0 + apex * width, base along the bottom edge
      if (py < y0 || py >= y1) return false;
      const double t = (py - y0) / (y1 - y0);
      const double ax = x0 + apex * (x1 - x0);
      return px >= ax + t * (x0 - ax) && px <= ax + t * (x1 - ax);
    }
  }
  return false;
}

}  // namespace detail

// Shapes are drawn with distinct colors on a uniform background; each box is
// the tight pixel bound of its rendered mask, normalized by the canvas side.
inline Sample generate_synthetic_sample(const SyntheticConfig& cfg, Rng& rng) {
  validate(cfg);
  const int n = cfg.canvas_size;
  Sample s;
  s.width = s.height = n;
  s.image = Image(n, n, 3);
  const int bg[3] = {static_cast<int>(rng.between(cfg.background_min, cfg.background_max)),
                     static_cast<int>(rng.between(cfg.background_min, cfg.background_max)),
                     static_cast<int>(rng.between(cfg.background_min, cfg.background_max))};
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x)
      for (int c = 0; c < 3; ++c) s.image.at(y, x, c) = static_cast<std::uint8_t>(bg[c]);

  const int k = static_cast<int>(rng.between(cfg.min_objects, cfg.max_objects));
  std::vector<std::array<int, 3>> colors;
  for (int obj = 0; obj < k; ++obj) {
    for (int attempt = 0; attempt < 50; ++attempt) {
      const double h = rng.uniform(cfg.min_side_fraction, cfg.max_side_fraction) * n;
      const double w = rng.uniform(cfg.min_side_fraction, cfg.max_side_fraction) * n;
      const double y0 = rng.uniform(0, n - h), x0 = rng.uniform(0, n - w);
      const auto kind = static_cast<ShapeKind>(rng.below(static_cast<std::uint64_t>(cfg.n_classes)));
      const double apex = rng.uniform();
      std::array<int, 3> color;
      for (auto& c : color) c = static_cast<int>(rng.between(cfg.foreground_min, cfg.foreground_max));

      int ymin = n, xmin = n, ymax = -1, xmax = -1;
      std::vector<std::pair<int, int>> mask;
      for (int y = static_cast<int>(y0); y < std::min(n, static_cast<int>(std::ceil(y0 + h)) + 1); ++y)
        for (int x = static_cast<int>(x0); x < std::min(n, static_cast<int>(std::ceil(x0 + w)) + 1); ++x)
          if (detail::shape_contains(kind, y0, x0, y0 + h, x0 + w, apex, y + 0.5, x + 0.5)) {
            mask.emplace_back(y, x);
            ymin = std::min(ymin, y), ymax = std::max(ymax, y), xmin = std::min(xmin, x), xmax = std::max(xmax, x);
          }
      if (mask.empty()) continue;
      const BBox box{static_cast<double>(ymin) / n, static_cast<double>(xmin) / n, static_cast<double>(ymax + 1) / n,
                     static_cast<double>(xmax + 1) / n};
      bool ok = std::find(colors.begin(), colors.end(), color) == colors.end();
      for (const auto& o : s.objects) ok = ok && iou(o.box, box) <= cfg.max_overlap;
      if (!ok) continue;
      for (auto [y, x] : mask)
        for (int c = 0; c < 3; ++c) s.image.at(y, x, c) = static_cast<std::uint8_t>(color[c]);
      colors.push_back(color);
      s.objects.push_back({box, static_cast<int>(kind)});
      break;
    }
  }
  return s;
}

// Sample i of a split depends only on (seed, split, i).
enum class Split { train, val };

inline Sample synthetic_sample(const SyntheticConfig& cfg, Split split, std::uint64_t index) {
  const std::uint64_t offset = split == Split::train ? 0 : (std::uint64_t{1} << 40);
  Rng rng = Rng::stream(cfg.seed, offset + index);
  Sample s = generate_synthetic_sample(cfg, rng);
  s.image_id = static_cast<std::int64_t>(index);
  return s;
}

inline std::vector<Sample> synthetic_split(const SyntheticConfig& cfg, Split split, int count) {
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(synthetic_sample(cfg, split, static_cast<std::uint64_t>(i)));
  return out;
}

// Pixel coordinates (y_min, x_min, y_max, x_max) of a normalized box.
inline BBox to_pixels(const BBox& b, int height, int width) {
  return {b.y_min * height, b.x_min * width, b.y_max * height, b.x_max * width};
}

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CocoDataset {
  std::vector<Sample> samples;            // in document order, no pixels
  std::vector<std::int64_t> category_ids;  // dense index -> original category id
  std::vector<std::string> category_names;
  int skipped_annotations = 0;  // referenced an unknown image
  int clipped_boxes = 0;        // extended beyond the image and were clipped
  int dropped_boxes = 0;        // empty after clipping
};

inline CocoDataset parse_coco_annotations(const std::string& text, const std::string& source = "<string>") {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(source + ": " + e.what());
  }
  auto field = [&](const nlohmann::json& obj, const char* key, const std::string& where) -> const nlohmann::json& {
    if (!obj.is_object() || !obj.contains(key)) throw DataError(source + ": " + where + " is missing '" + key + "'");
    return obj.at(key);
  };
  auto number = [&](const nlohmann::json& obj, const char* key, const std::string& where) {
    const auto& v = field(obj, key, where);
    if (!v.is_number()) throw DataError(source + ": " + where + "." + key + " must be a number");
    return v.get<double>();
  };
  auto array = [&](const char* key) -> const nlohmann::json& {
    const auto& v = field(doc, key, "document");
    if (!v.is_array()) throw DataError(source + ": '" + key + "' must be an array");
    return v;
  };

  CocoDataset ds;
  std::map<std::int64_t, int> dense;
  std::vector<std::pair<std::int64_t, std::string>> cats;
  const auto& categories = array("categories");
  for (std::size_t i = 0; i < categories.size(); ++i) {
    const std::string where = "categories[" + std::to_string(i) + "]";
    const auto id = static_cast<std::int64_t>(number(categories[i], "id", where));
    std::string name = categories[i].contains("name") ? categories[i]["name"].get<std::string>() : std::to_string(id);
    cats.emplace_back(id, name);
  }
  std::sort(cats.begin(), cats.end());
  for (const auto& [id, name] : cats) {
    if (dense.count(id)) throw DataError(source + ": duplicate category id " + std::to_string(id));
    dense[id] = static_cast<int>(ds.category_ids.size());
    ds.category_ids.push_back(id);
    ds.category_names.push_back(name);
  }

  std::map<std::int64_t, std::size_t> by_id;
  const auto& images = array("images");
  for (std::size_t i = 0; i < images.size(); ++i) {
    const std::string where = "images[" + std::to_string(i) + "]";
    Sample s;
    s.image_id = static_cast<std::int64_t>(number(images[i], "id", where));
    s.width = static_cast<int>(number(images[i], "width", where));
    s.height = static_cast<int>(number(images[i], "height", where));
    if (s.width <= 0 || s.height <= 0) throw DataError(source + ": " + where + " has non-positive size");
    if (images[i].contains("file_name")) s.file_name = images[i]["file_name"].get<std::string>();
    if (!by_id.emplace(s.image_id, ds.samples.size()).second)
      throw DataError(source + ": duplicate image id " + std::to_string(s.image_id) + " at " + where);
    ds.samples.push_back(std::move(s));
  }

  const auto& anns = array("annotations");
  for (std::size_t i = 0; i < anns.size(); ++i) {
    const std::string where = "annotations[" + std::to_string(i) + "]";
    const auto image_id = static_cast<std::int64_t>(number(anns[i], "image_id", where));
    const auto cat = static_cast<std::int64_t>(number(anns[i], "category_id", where));
    const auto& bbox = field(anns[i], "bbox", where);
    if (!bbox.is_array() || bbox.size() != 4) throw DataError(source + ": " + where + ".bbox must have 4 numbers");
    const auto it = by_id.find(image_id);
    if (it == by_id.end()) {
      ++ds.skipped_annotations;
      continue;
    }
    const auto cit = dense.find(cat);
    if (cit == dense.end()) throw DataError(source + ": " + where + " has unknown category " + std::to_string(cat));
    Sample& s = ds.samples[it->second];
    const double x = bbox[0].get<double>(), y = bbox[1].get<double>(), w = bbox[2].get<double>(),
                 h = bbox[3].get<double>();
    const BBox raw{y / s.height, x / s.width, (y + h) / s.height, (x + w) / s.width};
    BBox box = raw.clipped();
    if (!(box == raw)) ++ds.clipped_boxes;
    if (box.height() <= 0 || box.width() <= 0) {
      ++ds.dropped_boxes;
      continue;
    }
    s.objects.push_back({box, cit->second});
  }
  return ds;
}

inline CocoDataset load_coco_annotations(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open annotation file " + path);
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_coco_annotations(text, path);
}

// Rescales stored dimensions so the longer side equals `longer_side`;
// normalized boxes are unchanged.
inline Sample resize_longer_side(Sample s, int longer_side) {
  const double f = static_cast<double>(longer_side) / std::max(s.width, s.height);
  const int h = std::max(1, static_cast<int>(std::lround(s.height * f)));
  const int w = std::max(1, static_cast<int>(std::lround(s.width * f)));
  if (!s.image.empty()) s.image = resize_bilinear(s.image, h, w);
  s.height = h;
  s.width = w;
  return s;
}

}  // namespace pix2seq
