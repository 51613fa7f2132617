#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "betof/core.hpp"
#include "betof/image_io.hpp"

namespace betof {

/// Per-pixel physical quantities consumed by the forward model.
struct Scene {
  Grid<double> albedo;   // reflectance in [0, 1]
  Grid<double> ambient;  // photoelectrons per exposure window
  Grid<double> depth;    // meters; <= 0 marks an invalid pixel

  int width() const { return depth.width(); }
  int height() const { return depth.height(); }
  bool valid(std::size_t i) const { return depth[i] > 0.0; }

  /// Throws ConfigError if any invariant is broken.
  void validate() const {
    if (!albedo.same_shape(depth) || !ambient.same_shape(depth))
      throw ConfigError("scene grids must share dimensions");
    for (std::size_t i = 0; i < depth.size(); ++i) {
      if (!(albedo[i] >= 0.0 && albedo[i] <= 1.0)) throw ConfigError("albedo outside [0,1]");
      if (!std::isfinite(ambient[i]) || ambient[i] < 0.0) throw ConfigError("ambient must be finite and >= 0");
      if (!std::isfinite(depth[i]) || depth[i] < 0.0) throw ConfigError("depth must be finite and >= 0");
    }
  }
};

enum class SceneKind { Ramp, Staircase, Sphere, Plane, File };
enum class AlbedoPattern { Constant, Checker, Gradient, NoiseTexture };
enum class DepthFormat { Pfm, Pgm16 };

inline SceneKind parse_scene_kind(std::string_view s) {
  if (s == "ramp") return SceneKind::Ramp;
  if (s == "staircase") return SceneKind::Staircase;
  if (s == "sphere") return SceneKind::Sphere;
  if (s == "fronto-parallel-plane" || s == "plane") return SceneKind::Plane;
  if (s == "file") return SceneKind::File;
  throw ConfigError("unknown scene kind '" + std::string(s) + "'");
}

inline AlbedoPattern parse_albedo_pattern(std::string_view s) {
  if (s == "constant") return AlbedoPattern::Constant;
  if (s == "checker") return AlbedoPattern::Checker;
  if (s == "gradient") return AlbedoPattern::Gradient;
  if (s == "noise-texture" || s == "noise") return AlbedoPattern::NoiseTexture;
  throw ConfigError("unknown albedo pattern '" + std::string(s) + "'");
}

struct SceneSpec {
  SceneKind kind = SceneKind::Ramp;
  int width = 64;
  int height = 64;
  double d_min = 30.0;
  double d_max = 33.0;
  AlbedoPattern albedo_pattern = AlbedoPattern::Constant;
  double albedo_level = 0.5;  // used by the constant pattern
  double ambient_level = 0.0;
  std::uint64_t seed = 0;
  // kind == File only
  std::string path;
  DepthFormat format = DepthFormat::Pfm;
  double scale = 1.0;
};

namespace detail {

inline Grid<double> make_albedo(const SceneSpec& spec) {
  Grid<double> a(spec.width, spec.height, spec.albedo_level);
  switch (spec.albedo_pattern) {
    case AlbedoPattern::Constant:
      break;
    case AlbedoPattern::Checker:
      for (int y = 0; y < spec.height; ++y)
        for (int x = 0; x < spec.width; ++x) a(x, y) = ((x / 8 + y / 8) % 2 == 0) ? 0.9 : 0.2;
      break;
    case AlbedoPattern::Gradient:
      for (int y = 0; y < spec.height; ++y)
        for (int x = 0; x < spec.width; ++x) a(x, y) = 0.1 + 0.9 * y / (spec.height - 1.0);
      break;
    case AlbedoPattern::NoiseTexture:
      // [0.1, 1.0] keeps every pixel observable.
      for (std::size_t i = 0; i < a.size(); ++i) {
        auto rng = SplitMix64::for_stream(spec.seed, 1, i);
        a[i] = 0.1 + 0.9 * rng.uniform();
      }
      break;
  }
  return a;
}

}  // namespace detail

Scene load_depth_map(const std::string& path, DepthFormat format, double scale);

/// Builds a procedural scene. Pure: identical spec and seed give identical grids.
inline Scene generate_scene(const SceneSpec& spec) {
  if (spec.kind == SceneKind::File) {
    Scene s = load_depth_map(spec.path, spec.format, spec.scale);
    if (spec.albedo_pattern != AlbedoPattern::Constant || spec.albedo_level != 0.5) {
      SceneSpec tex = spec;
      tex.width = s.width();
      tex.height = s.height();
      s.albedo = detail::make_albedo(tex);
    }
    s.ambient = Grid<double>(s.width(), s.height(), spec.ambient_level);
    return s;
  }
  if (spec.width < 8 || spec.height < 8) throw ConfigError("scene width and height must be >= 8");
  if (!std::isfinite(spec.d_min) || !std::isfinite(spec.d_max) || spec.d_min < 0.0)
    throw ConfigError("scene depth range must be finite and non-negative");
  // A plane is the one kind where a degenerate range is meaningful.
  if (spec.d_min > spec.d_max || (spec.d_min == spec.d_max && spec.kind != SceneKind::Plane))
    throw ConfigError("scene depth range requires d_min < d_max");
  if (spec.ambient_level < 0.0) throw ConfigError("ambient_level must be >= 0");
  if (spec.albedo_level < 0.0 || spec.albedo_level > 1.0) throw ConfigError("albedo_level must lie in [0,1]");

  const int w = spec.width;
  const int h = spec.height;
  const double lo = spec.d_min;
  const double hi = spec.d_max;
  Grid<double> depth(w, h, lo);

  switch (spec.kind) {
    case SceneKind::Ramp:
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) depth(x, y) = lo + (hi - lo) * x / (w - 1.0);
      break;
    case SceneKind::Staircase: {
      constexpr int kSteps = 4;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const int step = std::min(kSteps - 1, x * kSteps / w);
          depth(x, y) = lo + (hi - lo) * step / (kSteps - 1.0);
        }
      break;
    }
    case SceneKind::Sphere: {
      // Spherical cap facing the camera over a background plane at d_max;
      // the apex touches d_min. The seed jitters center and radius.
      auto rng = SplitMix64::for_stream(spec.seed, 2, 0);
      const double cx = (0.35 + 0.3 * rng.uniform()) * (w - 1);
      const double cy = (0.35 + 0.3 * rng.uniform()) * (h - 1);
      const double radius = (0.3 + 0.15 * rng.uniform()) * std::min(w, h);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const double r2 = ((x - cx) * (x - cx) + (y - cy) * (y - cy)) / (radius * radius);
          depth(x, y) = r2 < 1.0 ? hi - (hi - lo) * std::sqrt(1.0 - r2) : hi;
        }
      break;
    }
    case SceneKind::Plane:
      for (auto& d : depth.data()) d = 0.5 * (lo + hi);
      break;
    case SceneKind::File:
      break;
  }

  Scene s{detail::make_albedo(spec), Grid<double>(w, h, spec.ambient_level), std::move(depth)};
  return s;
}

/// Loads a depth map; depth = raw value x scale. Albedo defaults to 0.5, ambient to 0.
inline Scene load_depth_map(const std::string& path, DepthFormat format, double scale) {
  if (!(scale > 0.0) || !std::isfinite(scale)) throw ConfigError("depth scale must be positive");
  Grid<double> depth;
  if (format == DepthFormat::Pfm) {
    const auto raw = io::read_pfm(path);
    depth = Grid<double>(raw.width(), raw.height());
    for (std::size_t i = 0; i < raw.size(); ++i) {
      const double v = static_cast<double>(raw[i]) * scale;
      depth[i] = std::isfinite(v) && v > 0.0 ? v : 0.0;
    }
  } else {
    const auto raw = io::read_pgm(path);
    depth = Grid<double>(raw.pixels.width(), raw.pixels.height());
    for (std::size_t i = 0; i < raw.pixels.size(); ++i) depth[i] = raw.pixels[i] * scale;
  }
  const int w = depth.width();
  const int h = depth.height();
  return Scene{Grid<double>(w, h, 0.5), Grid<double>(w, h, 0.0), std::move(depth)};
}

inline void save_depth_pfm(const std::string& path, const Grid<double>& depth) { io::write_pfm(path, depth); }

}  // namespace betof
