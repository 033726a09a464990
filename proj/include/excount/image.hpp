#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "excount/error.hpp"
#include "excount/geometry.hpp"

namespace excount {

// Interleaved RGB image with float channels in [0,1], row-major.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<float> pixels;  // size 3 * width * height

  Image() = default;
  Image(int w, int h, float fill = 0.0f) : width(w), height(h), pixels(3ull * w * h, fill) {}

  bool empty() const { return width <= 0 || height <= 0; }
  float& at(int x, int y, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  float at(int x, int y, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }

  friend bool operator==(const Image&, const Image&) = default;
};

// Bilinear sample at continuous pixel-center coordinates, edge-clamped.
inline float sample_bilinear(const Image& img, double x, double y, int c) {
  x = std::clamp(x, 0.0, static_cast<double>(img.width - 1));
  y = std::clamp(y, 0.0, static_cast<double>(img.height - 1));
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const int x1 = std::min(x0 + 1, img.width - 1);
  const int y1 = std::min(y0 + 1, img.height - 1);
  const double fx = x - x0;
  const double fy = y - y0;
  const double top = (1 - fx) * img.at(x0, y0, c) + fx * img.at(x1, y0, c);
  const double bot = (1 - fx) * img.at(x0, y1, c) + fx * img.at(x1, y1, c);
  return static_cast<float>((1 - fy) * top + fy * bot);
}

// Samples the continuous region `box` onto an out_w x out_h grid (ROI-align style,
// one bilinear tap per output pixel center).
inline Image crop_resize(const Image& img, const Box& box, int out_w, int out_h) {
  require_valid(box);
  Image out(out_w, out_h);
  const double sx = box.width() / out_w;
  const double sy = box.height() / out_h;
  for (int y = 0; y < out_h; ++y) {
    const double py = box.y_min + (y + 0.5) * sy - 0.5;
    for (int x = 0; x < out_w; ++x) {
      const double px = box.x_min + (x + 0.5) * sx - 0.5;
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = sample_bilinear(img, px, py, c);
    }
  }
  return out;
}

inline Image resize(const Image& img, int out_w, int out_h) {
  return crop_resize(img, Box{0, 0, static_cast<double>(img.width), static_cast<double>(img.height)},
                     out_w, out_h);
}

// Integer pixel crop covering the box (floor/ceil of its edges, clipped to the image).
inline Image crop(const Image& img, const Box& box) {
  const int x0 = std::clamp(static_cast<int>(std::floor(box.x_min)), 0, img.width);
  const int y0 = std::clamp(static_cast<int>(std::floor(box.y_min)), 0, img.height);
  const int x1 = std::clamp(static_cast<int>(std::ceil(box.x_max)), 0, img.width);
  const int y1 = std::clamp(static_cast<int>(std::ceil(box.y_max)), 0, img.height);
  Image out(std::max(0, x1 - x0), std::max(0, y1 - y0));
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = img.at(x0 + x, y0 + y, c);
  return out;
}

inline std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

// Binary PPM (P6, maxval 255).
inline std::string encode_ppm(const Image& img) {
  std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::string out = header;
  out.reserve(header.size() + img.pixels.size());
  for (float v : img.pixels) out.push_back(static_cast<char>(to_byte(v)));
  return out;
}

inline void write_ppm(const std::filesystem::path& path, const Image& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path.string() + " for writing");
  const std::string bytes = encode_ppm(img);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline Image decode_ppm(const std::string& bytes) {
  std::istringstream in(bytes);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic;
  auto skip_comments = [&] {
    in >> std::ws;
    while (in.peek() == '#') {
      std::string line;
      std::getline(in, line);
      in >> std::ws;
    }
  };
  skip_comments();
  in >> w;
  skip_comments();
  in >> h;
  skip_comments();
  in >> maxval;
  if (magic != "P6" || !in || w <= 0 || h <= 0 || maxval != 255) {
    throw FormatError("unsupported PPM header (expected P6 with maxval 255)");
  }
  in.get();
  const auto offset = static_cast<std::size_t>(in.tellg());
  const std::size_t need = 3ull * w * h;
  if (bytes.size() < offset + need) {
    throw FormatError("truncated PPM payload at offset " + std::to_string(bytes.size()));
  }
  Image img(w, h);
  for (std::size_t i = 0; i < need; ++i) {
    img.pixels[i] = static_cast<std::uint8_t>(bytes[offset + i]) / 255.0f;
  }
  return img;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path.string() + " for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline Image read_ppm(const std::filesystem::path& path) { return decode_ppm(read_file_bytes(path)); }

// Quantize to 8-bit and back, so in-memory images match what a PPM round trip yields.
inline Image quantized(Image img) {
  for (float& v : img.pixels) v = to_byte(v) / 255.0f;
  return img;
}

}  // namespace excount
