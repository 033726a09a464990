#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "excount/error.hpp"
#include "excount/geometry.hpp"
#include "excount/image.hpp"

namespace excount {

enum class ShapeKind { Circle, Square, Triangle, Diamond, Cross, Ring, Hexagon, Star };

struct ShapeInfo {
  std::string_view name;
  ShapeKind kind;
};

// Class names understood by the synthetic generator and the oracle detector.
inline constexpr std::array<ShapeInfo, 8> kShapeCatalog{{
    {"circle", ShapeKind::Circle},
    {"square", ShapeKind::Square},
    {"triangle", ShapeKind::Triangle},
    {"diamond", ShapeKind::Diamond},
    {"cross", ShapeKind::Cross},
    {"ring", ShapeKind::Ring},
    {"hexagon", ShapeKind::Hexagon},
    {"star", ShapeKind::Star},
}};

inline bool is_known_shape(std::string_view name) {
  return std::any_of(kShapeCatalog.begin(), kShapeCatalog.end(),
                     [&](const ShapeInfo& s) { return s.name == name; });
}

inline ShapeKind shape_kind(std::string_view name) {
  for (const auto& s : kShapeCatalog)
    if (s.name == name) return s.kind;
  throw ConfigError("unknown shape class '" + std::string(name) + "'");
}

struct Rgb {
  float r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

struct SceneObject {
  std::string class_name;
  double cx = 0;
  double cy = 0;
  double radius = 0;  // half extent of the axis-aligned footprint
  Rgb color;
  bool distractor = false;

  Box box() const { return {cx - radius, cy - radius, cx + radius, cy + radius}; }
  friend bool operator==(const SceneObject&, const SceneObject&) = default;
};

// A fully seeded synthetic image description; rendering is a pure function of it.
struct SyntheticScene {
  int width = 64;
  int height = 64;
  std::vector<SceneObject> objects;
  Rgb background;
  std::uint64_t seed = 0;

  std::vector<const SceneObject*> objects_of(std::string_view class_name) const {
    std::vector<const SceneObject*> out;
    for (const auto& o : objects)
      if (o.class_name == class_name) out.push_back(&o);
    return out;
  }

  bool valid() const {
    return std::all_of(objects.begin(), objects.end(), [&](const SceneObject& o) {
      return o.radius > 0 && o.cx - o.radius >= 0 && o.cy - o.radius >= 0 &&
             o.cx + o.radius <= width && o.cy + o.radius <= height;
    });
  }

  friend bool operator==(const SyntheticScene&, const SyntheticScene&) = default;
};

// splitmix64, used to derive independent deterministic sub-seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) { return mix_seed(a ^ mix_seed(b)); }

inline std::uint64_t hash_string(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a
  for (char c : s) {
    h ^= static_cast<std::uint8_t>(c);
    h *= 1099511628211ull;
  }
  return h;
}

namespace detail {

// Membership of (u,v), expressed in units of the object's radius, in the unit shape.
inline bool inside_shape(ShapeKind kind, double u, double v) {
  const double au = std::abs(u), av = std::abs(v);
  switch (kind) {
    case ShapeKind::Circle:
      return u * u + v * v <= 1.0;
    case ShapeKind::Square:
      return au <= 0.85 && av <= 0.85;
    case ShapeKind::Triangle:
      // apex up, base at v = 0.9
      return v <= 0.9 && v >= -0.95 && au <= (v + 0.95) / 1.85;
    case ShapeKind::Diamond:
      return au + av <= 1.0;
    case ShapeKind::Cross:
      return (au <= 0.3 && av <= 0.95) || (av <= 0.3 && au <= 0.95);
    case ShapeKind::Ring: {
      const double r2 = u * u + v * v;
      return r2 <= 1.0 && r2 >= 0.3;
    }
    case ShapeKind::Hexagon:
      return av <= 0.85 && au * 0.866 + av * 0.5 <= 0.85;
    case ShapeKind::Star: {
      const double r = std::sqrt(u * u + v * v);
      const double t = std::atan2(v, u);
      return r <= 0.55 + 0.45 * std::pow(std::abs(std::cos(2.5 * t)), 3.0);
    }
  }
  return false;
}

}  // namespace detail

// Renders with 3x3 supersampling over a seeded low-amplitude noisy background,
// quantized to 8 bits so in-memory images equal their PPM round trip.
inline Image render_scene(const SyntheticScene& scene) {
  Image img(scene.width, scene.height);
  std::mt19937_64 rng(mix_seed(scene.seed, 0x5ce7e));
  std::uniform_real_distribution<float> noise(-0.03f, 0.03f);
  for (int y = 0; y < scene.height; ++y) {
    for (int x = 0; x < scene.width; ++x) {
      const float n = noise(rng);
      img.at(x, y, 0) = scene.background.r + n;
      img.at(x, y, 1) = scene.background.g + n;
      img.at(x, y, 2) = scene.background.b + n;
    }
  }
  constexpr int kSub = 3;
  for (const auto& o : scene.objects) {
    const ShapeKind kind = shape_kind(o.class_name);
    const int x0 = std::max(0, static_cast<int>(std::floor(o.cx - o.radius)));
    const int x1 = std::min(scene.width - 1, static_cast<int>(std::ceil(o.cx + o.radius)));
    const int y0 = std::max(0, static_cast<int>(std::floor(o.cy - o.radius)));
    const int y1 = std::min(scene.height - 1, static_cast<int>(std::ceil(o.cy + o.radius)));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        int hits = 0;
        for (int sy = 0; sy < kSub; ++sy) {
          for (int sx = 0; sx < kSub; ++sx) {
            const double px = x + (sx + 0.5) / kSub;
            const double py = y + (sy + 0.5) / kSub;
            if (detail::inside_shape(kind, (px - o.cx) / o.radius, (py - o.cy) / o.radius)) ++hits;
          }
        }
        if (hits == 0) continue;
        const float a = static_cast<float>(hits) / (kSub * kSub);
        img.at(x, y, 0) = (1 - a) * img.at(x, y, 0) + a * o.color.r;
        img.at(x, y, 1) = (1 - a) * img.at(x, y, 1) + a * o.color.g;
        img.at(x, y, 2) = (1 - a) * img.at(x, y, 2) + a * o.color.b;
      }
    }
  }
  return quantized(std::move(img));
}

inline Rgb hsv_to_rgb(double h, double s, double v) {
  h = std::fmod(h, 360.0);
  if (h < 0) h += 360.0;
  const double c = v * s;
  const double x = c * (1 - std::abs(std::fmod(h / 60.0, 2.0) - 1));
  const double m = v - c;
  double r = 0, g = 0, b = 0;
  if (h < 60) { r = c; g = x; }
  else if (h < 120) { r = x; g = c; }
  else if (h < 180) { g = c; b = x; }
  else if (h < 240) { g = x; b = c; }
  else if (h < 300) { r = x; b = c; }
  else { r = c; b = x; }
  return {static_cast<float>(r + m), static_cast<float>(g + m), static_cast<float>(b + m)};
}

}  // namespace excount
