#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace pix2seq {

// Interleaved 8-bit image, row-major, `channels` values per pixel.
struct Image {
  int height = 0;
  int width = 0;
  int channels = 3;
  std::vector<std::uint8_t> data;

  Image() = default;
  Image(int h, int w, int c = 3, std::uint8_t fill = 0)
      : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {}

  bool empty() const { return height <= 0 || width <= 0; }
  std::uint8_t& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  std::uint8_t at(int y, int x, int c) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  friend bool operator==(const Image&, const Image&) = default;
};

// Bilinear resize with half-pixel centers, so pixel edges map linearly:
// an edge at y in the source lands at y * out_h / in_h.
inline Image resize_bilinear(const Image& src, int out_h, int out_w) {
  if (src.empty() || out_h <= 0 || out_w <= 0) throw std::invalid_argument("resize_bilinear: empty image");
  Image dst(out_h, out_w, src.channels);
  const double sy = static_cast<double>(src.height) / out_h;
  const double sx = static_cast<double>(src.width) / out_w;
  for (int y = 0; y < out_h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, src.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, src.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < src.channels; ++c) {
        const double v = (1 - wy) * ((1 - wx) * src.at(y0, x0, c) + wx * src.at(y0, x1, c)) +
                         wy * ((1 - wx) * src.at(y1, x0, c) + wx * src.at(y1, x1, c));
        dst.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  }
  return dst;
}

// Binary PPM (P6) for 3-channel images, PGM (P5) for 1-channel.
inline void write_pnm(const std::string& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw std::invalid_argument("write_pnm: 1 or 3 channels required");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  os << (img.channels == 3 ? "P6" : "P5") << '\n' << img.width << ' ' << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.data.data()), static_cast<std::streamsize>(img.data.size()));
  if (!os) throw std::runtime_error("write failed: " + path);
}

inline Image read_pnm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  is >> magic >> w >> h >> maxval;
  if ((magic != "P6" && magic != "P5") || w <= 0 || h <= 0 || maxval != 255)
    throw std::runtime_error(path + ": unsupported PNM header");
  is.get();
  Image img(h, w, magic == "P6" ? 3 : 1);
  is.read(reinterpret_cast<char*>(img.data.data()), static_cast<std::streamsize>(img.data.size()));
  if (!is) throw std::runtime_error(path + ": truncated PNM data");
  return img;
}

// Axis-aligned rectangle outline in pixel coordinates (inclusive).
inline void draw_rect(Image& img, int y0, int x0, int y1, int x1, const std::uint8_t* rgb) {
  auto put = [&](int y, int x) {
    if (y < 0 || x < 0 || y >= img.height || x >= img.width) return;
    for (int c = 0; c < img.channels; ++c) img.at(y, x, c) = rgb[std::min(c, 2)];
  };
  for (int x = x0; x <= x1; ++x) {
    put(y0, x);
    put(y1, x);
  }
  for (int y = y0; y <= y1; ++y) {
    put(y, x0);
    put(y, x1);
  }
}

}  // namespace pix2seq
