#pragma once

// Analysis outputs: quantization overlays, cross-attention dumps, coordinate
// embedding similarity, and small SVG plots for ablation tables.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "pix2seq/codec.hpp"
#include "pix2seq/data.hpp"
#include "pix2seq/image.hpp"
#include "pix2seq/infer.hpp"
#include "pix2seq/model.hpp"

namespace pix2seq {

// ---- quantization ------------------------------------------------------------

inline BBox quantize_box(const BBox& b, int n_bins) {
  auto q = [&](double v) { return dequantize_coord(quantize_coord(v, n_bins), n_bins); };
  return {q(b.y_min), q(b.x_min), q(b.y_max), q(b.x_max)};
}

// Largest corner displacement in pixels after the quantize/dequantize trip.
inline double max_corner_displacement_px(const BBox& b, int n_bins, int height, int width) {
  const BBox r = quantize_box(b, n_bins);
  return std::max({std::abs(r.y_min - b.y_min) * height, std::abs(r.y_max - b.y_max) * height,
                   std::abs(r.x_min - b.x_min) * width, std::abs(r.x_max - b.x_max) * width});
}

struct QuantizationPanel {
  int n_bins = 0;
  Image image;
  std::vector<BBox> boxes;  // dequantized
  double max_displacement_px = 0;
};

inline std::vector<QuantizationPanel> quantization_figure(const Sample& s, const std::vector<int>& bins) {
  static constexpr std::uint8_t kOriginal[3] = {0, 255, 0};
  static constexpr std::uint8_t kQuantized[3] = {255, 0, 0};
  std::vector<QuantizationPanel> out;
  for (int n : bins) {
    QuantizationPanel p;
    p.n_bins = n;
    p.image = s.image;
    auto px = [&](const BBox& b, const std::uint8_t* color) {
      const BBox q = to_pixels(b, s.height, s.width);
      draw_rect(p.image, static_cast<int>(std::lround(q.y_min)), static_cast<int>(std::lround(q.x_min)),
                static_cast<int>(std::lround(q.y_max)) - 1, static_cast<int>(std::lround(q.x_max)) - 1, color);
    };
    for (const auto& o : s.objects) px(o.box, kOriginal);
    for (const auto& o : s.objects) {
      p.boxes.push_back(quantize_box(o.box, n));
      px(p.boxes.back(), kQuantized);
      p.max_displacement_px = std::max(p.max_displacement_px, max_corner_displacement_px(o.box, n, s.height, s.width));
    }
    out.push_back(std::move(p));
  }
  return out;
}

// ---- attention -----------------------------------------------------------------

struct AttentionGrid {
  std::string label;  // "token 12" or "region 1,3"
  Token token = 0;
  int grid = 0;
  std::vector<double> weights;  // row-major grid x grid
};

// Decode mode: one grid per generated token.
template <class S>
std::vector<AttentionGrid> attention_decode_mode(const Model<S>& model, const Image& image, const DecodeConfig& cfg,
                                                 Rng& rng, std::vector<Token>* tokens_out = nullptr) {
  const auto features = model.encode_image(image);
  GenerateOptions opts;
  opts.record_attention = true;
  const auto r = generate(model, features, cfg, rng, opts);
  std::vector<AttentionGrid> out;
  for (std::size_t j = 0; j < r.tokens.size(); ++j)
    out.push_back({"token " + std::to_string(j), r.tokens[j], model.config().grid(), r.cross_attention[j]});
  if (tokens_out) *tokens_out = r.tokens;
  return out;
}

// Region mode: for each cell of an N x N partition, the cell's four coordinate
// tokens are fed as a forced prefix and the attention recorded while the
// decoder reads the fourth one.
template <class S>
std::vector<AttentionGrid> attention_region_mode(const Model<S>& model, const Image& image, const Vocabulary& vocab,
                                                 int n) {
  if (n < 1) throw std::invalid_argument("attention_region_mode: grid must be positive");
  const auto features = model.encode_image(image);
  std::vector<AttentionGrid> out;
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) {
      const BBox cell{static_cast<double>(r) / n, static_cast<double>(c) / n, static_cast<double>(r + 1) / n,
                      static_cast<double>(c + 1) / n};
      DecodeConfig dc;
      dc.mode = DecodeMode::argmax;
      dc.max_objects = 1;
      dc.fixed_length = true;
      GenerateOptions opts;
      opts.record_attention = true;
      opts.forced_prefix = encode_box(cell, vocab);
      Rng rng(0);
      const auto g = generate(model, features, dc, rng, opts);
      out.push_back({"region " + std::to_string(r) + "," + std::to_string(c), opts.forced_prefix[3],
                     model.config().grid(), g.cross_attention.at(4)});
    }
  return out;
}

// Random permutation of pixel positions (channels move together).
inline Image shuffle_pixels(const Image& img, Rng& rng) {
  std::vector<std::size_t> perm(static_cast<std::size_t>(img.height) * img.width);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  rng.shuffle(perm.begin(), perm.end());
  Image out(img.height, img.width, img.channels);
  for (std::size_t i = 0; i < perm.size(); ++i)
    for (int c = 0; c < img.channels; ++c)
      out.data[i * img.channels + c] = img.data[perm[i] * img.channels + c];
  return out;
}

// Weights scaled to [0, 255] after clipping the top `clip_fraction` of values.
inline std::vector<std::uint8_t> display_levels(const std::vector<double>& w, double clip_fraction = 0.02) {
  if (w.empty()) return {};
  std::vector<double> sorted = w;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t keep = sorted.size() - static_cast<std::size_t>(std::floor(clip_fraction * sorted.size()));
  const double hi = sorted[std::max<std::size_t>(keep, 1) - 1], lo = sorted.front();
  std::vector<std::uint8_t> out(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double t = hi > lo ? (std::min(w[i], hi) - lo) / (hi - lo) : 0.0;
    out[i] = static_cast<std::uint8_t>(std::lround(255 * t));
  }
  return out;
}

// Attention heat map blended over the image (red channel carries attention).
inline Image attention_overlay(const Image& image, const AttentionGrid& g) {
  const auto levels = display_levels(g.weights);
  Image out(image.height, image.width, 3);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x) {
      const int gy = y * g.grid / image.height, gx = x * g.grid / image.width;
      const double a = levels[static_cast<std::size_t>(gy * g.grid + gx)] / 255.0;
      for (int c = 0; c < 3; ++c) {
        const double base = image.at(y, x, std::min(c, image.channels - 1)) * 0.5;
        const double heat = c == 0 ? 255.0 : 0.0;
        out.at(y, x, c) = static_cast<std::uint8_t>(std::lround(base * (1 - a) + heat * a));
      }
    }
  return out;
}

inline void write_attention_grids(std::ostream& os, const std::vector<AttentionGrid>& grids) {
  os << "# label token grid weights(row-major)\n" << std::setprecision(9);
  for (const auto& g : grids) {
    os << g.label << " | " << g.token << ' ' << g.grid;
    for (double w : g.weights) os << ' ' << w;
    os << '\n';
  }
}

// ---- embedding similarity --------------------------------------------------------

// Cosine similarity between output-projection columns of coordinate tokens.
template <class S>
Eigen::MatrixXd coordinate_similarity(const Model<S>& model, const Vocabulary& vocab) {
  const auto& w = model.params().output_proj;
  const int n = vocab.n_bins();
  Eigen::MatrixXd e(w.rows(), n);
  for (int k = 0; k < n; ++k) {
    e.col(k) = w.col(vocab.coord_token(k)).template cast<double>();
    const double norm = e.col(k).norm();
    if (norm > 0) e.col(k) /= norm;
  }
  Eigen::MatrixXd sim = e.transpose() * e;
  for (int k = 0; k < n; ++k) sim(k, k) = e.col(k).squaredNorm() > 0 ? 1.0 : 0.0;
  return sim;
}

struct SimilaritySummary {
  double near_mean = 0;  // 0 < |i-j| <= near
  double far_mean = 0;   // |i-j| >= far
  long near_pairs = 0, far_pairs = 0;
};

inline SimilaritySummary summarize_similarity(const Eigen::MatrixXd& sim, int near = 10, int far = 500) {
  SimilaritySummary s;
  double ns = 0, fs = 0;
  for (Eigen::Index i = 0; i < sim.rows(); ++i)
    for (Eigen::Index j = 0; j < sim.cols(); ++j) {
      const auto d = std::abs(i - j);
      if (d > 0 && d <= near) ns += sim(i, j), ++s.near_pairs;
      if (d >= far) fs += sim(i, j), ++s.far_pairs;
    }
  s.near_mean = s.near_pairs ? ns / s.near_pairs : 0.0;
  s.far_mean = s.far_pairs ? fs / s.far_pairs : 0.0;
  return s;
}

inline Image similarity_heatmap(const Eigen::MatrixXd& sim) {
  Image img(static_cast<int>(sim.rows()), static_cast<int>(sim.cols()), 1);
  for (Eigen::Index i = 0; i < sim.rows(); ++i)
    for (Eigen::Index j = 0; j < sim.cols(); ++j)
      img.at(static_cast<int>(i), static_cast<int>(j), 0) =
          static_cast<std::uint8_t>(std::lround(127.5 * (std::clamp(sim(i, j), -1.0, 1.0) + 1)));
  return img;
}

inline void write_matrix(std::ostream& os, const Eigen::MatrixXd& m) {
  os << std::setprecision(9);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) os << (j ? " " : "") << m(i, j);
    os << '\n';
  }
}

// ---- plots ---------------------------------------------------------------------

struct PlotSeries {
  std::string name;
  std::vector<double> x, y;
};

// Minimal SVG line/marker plot, axes fixed to [0, 1].
inline void write_svg_plot(std::ostream& os, const std::string& title, const std::string& x_label,
                           const std::string& y_label, const std::vector<PlotSeries>& series) {
  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
  const double w = 480, h = 360, left = 60, right = 20, top = 40, bottom = 50;
  auto sx = [&](double v) { return left + v * (w - left - right); };
  auto sy = [&](double v) { return h - bottom - v * (h - top - bottom); };
  os << std::fixed << std::setprecision(2);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << w / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
  os << "<line x1=\"" << sx(0) << "\" y1=\"" << sy(0) << "\" x2=\"" << sx(1) << "\" y2=\"" << sy(0)
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << sx(0) << "\" y1=\"" << sy(0) << "\" x2=\"" << sx(0) << "\" y2=\"" << sy(1)
     << "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double v = t / 4.0;
    os << "<text x=\"" << sx(v) << "\" y=\"" << sy(0) + 16 << "\" text-anchor=\"middle\" font-size=\"10\">" << v
       << "</text>\n";
    os << "<text x=\"" << sx(0) - 6 << "\" y=\"" << sy(v) + 3 << "\" text-anchor=\"end\" font-size=\"10\">" << v
       << "</text>\n";
  }
  os << "<text x=\"" << w / 2 << "\" y=\"" << h - 10 << "\" text-anchor=\"middle\" font-size=\"12\">" << x_label
     << "</text>\n";
  os << "<text x=\"14\" y=\"" << h / 2 << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 14 "
     << h / 2 << ")\">" << y_label << "</text>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = kColors[s % 6];
    const auto& ser = series[s];
    if (ser.x.size() > 1) {
      os << "<polyline fill=\"none\" stroke=\"" << color << "\" points=\"";
      for (std::size_t i = 0; i < ser.x.size(); ++i) os << sx(ser.x[i]) << ',' << sy(ser.y[i]) << ' ';
      os << "\"/>\n";
    }
    for (std::size_t i = 0; i < ser.x.size(); ++i)
      os << "<circle cx=\"" << sx(ser.x[i]) << "\" cy=\"" << sy(ser.y[i]) << "\" r=\"3\" fill=\"" << color
         << "\"/>\n";
    os << "<text x=\"" << w - right - 4 << "\" y=\"" << top + 14 * (s + 1) << "\" text-anchor=\"end\" font-size=\"11\" fill=\""
       << color << "\">" << ser.name << "</text>\n";
  }
  os << "</svg>\n";
}

}  // namespace pix2seq
