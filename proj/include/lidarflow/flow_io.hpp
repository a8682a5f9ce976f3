#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "lidarflow/binary_io.hpp"
#include "lidarflow/error.hpp"
#include "lidarflow/flow.hpp"
#include "lidarflow/png_io.hpp"

namespace lidarflow {

inline constexpr float kFloMagic = 202021.25f;

// ---- Middlebury .flo ----

inline io::Bytes encode_flo(const FlowField& f) {
  for (std::size_t i = 0; i < f.size(); ++i) {
    if (!f.is_valid(i)) throw EncodeError(".flo cannot encode invalid pixels");
  }
  io::Writer w;
  w.f32(kFloMagic);
  w.i32(f.width);
  w.i32(f.height);
  for (std::size_t i = 0; i < f.size(); ++i) {
    w.f32(f.u[i]);
    w.f32(f.v[i]);
  }
  return w.take();
}

inline FlowField decode_flo(const io::Bytes& bytes, const std::string& what = ".flo") {
  io::Reader r(bytes, what);
  const float magic = r.f32();
  if (magic != kFloMagic) throw FormatError(what + ": bad magic, not a .flo file");
  const std::int32_t w = r.i32();
  const std::int32_t h = r.i32();
  if (w < 0 || h < 0) throw FormatError(what + ": negative dimensions in header");
  const std::size_t n = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
  r.need(n * 8);
  FlowField f(h, w);
  for (std::size_t i = 0; i < n; ++i) {
    f.u[i] = r.f32();
    f.v[i] = r.f32();
  }
  return f;
}

inline FlowField read_flo(const std::filesystem::path& path) { return decode_flo(io::read_file(path), path.string()); }
inline void write_flo(const std::filesystem::path& path, const FlowField& f) { io::write_file(path, encode_flo(f)); }

// ---- KITTI 16-bit PNG ----

inline constexpr double kKittiScale = 64.0;
inline constexpr double kKittiOffset = 32768.0;
inline constexpr double kKittiMaxFlow = 512.0;

inline std::uint16_t kitti_encode_component(float value) {
  if (!(std::abs(value) < kKittiMaxFlow)) {
    throw EncodeError("flow component " + std::to_string(value) + " outside the KITTI PNG range (-512, 512)");
  }
  return static_cast<std::uint16_t>(std::lround(static_cast<double>(value) * kKittiScale + kKittiOffset));
}

inline float kitti_decode_component(std::uint16_t stored) {
  return static_cast<float>((static_cast<double>(stored) - kKittiOffset) / kKittiScale);
}

/// Invalid pixels are written as (0, 0, 0) whatever their flow holds.
inline png::Image kitti_image(const FlowField& f) {
  png::Image img{f.width, f.height, 3, 16, {}};
  img.samples.assign(f.size() * 3, 0);
  for (std::size_t i = 0; i < f.size(); ++i) {
    if (!f.is_valid(i)) continue;
    img.samples[3 * i] = kitti_encode_component(f.u[i]);
    img.samples[3 * i + 1] = kitti_encode_component(f.v[i]);
    img.samples[3 * i + 2] = 1;
  }
  return img;
}

inline FlowField kitti_field(const png::Image& img, const std::string& what) {
  if (img.bit_depth != 16) throw FormatError(what + ": KITTI flow must be a 16-bit PNG");
  if (img.channels != 3) throw FormatError(what + ": KITTI flow must have 3 channels");
  FlowField f(img.height, img.width, true);
  for (std::size_t i = 0; i < f.size(); ++i) {
    const bool valid = img.samples[3 * i + 2] != 0;
    f.valid[i] = valid;
    if (!valid) continue;
    f.u[i] = kitti_decode_component(img.samples[3 * i]);
    f.v[i] = kitti_decode_component(img.samples[3 * i + 1]);
  }
  return f;
}

inline io::Bytes encode_kitti_png(const FlowField& f) { return png::encode(kitti_image(f)); }
inline FlowField decode_kitti_png(const io::Bytes& bytes, const std::string& what = "KITTI PNG") {
  return kitti_field(png::decode(bytes, what), what);
}
inline FlowField read_kitti_png(const std::filesystem::path& path) {
  return decode_kitti_png(io::read_file(path), path.string());
}
inline void write_kitti_png(const std::filesystem::path& path, const FlowField& f) {
  io::write_file(path, encode_kitti_png(f));
}

/// Object map as an 8-bit grayscale PNG, nonzero = foreground.
inline void write_object_map(const std::filesystem::path& path, int height, int width,
                             const std::vector<std::uint8_t>& fg) {
  if (fg.size() != static_cast<std::size_t>(height) * width) throw ShapeError("object map size mismatch");
  png::Image img{width, height, 1, 8, {}};
  img.samples.assign(fg.begin(), fg.end());
  png::save(path, img);
}

inline std::vector<std::uint8_t> read_object_map(const std::filesystem::path& path, int& height, int& width) {
  const png::Image img = png::load(path);
  if (img.channels != 1) throw FormatError(path.string() + ": object map must be single-channel");
  height = img.height;
  width = img.width;
  std::vector<std::uint8_t> fg(img.samples.size());
  for (std::size_t i = 0; i < fg.size(); ++i) fg[i] = img.samples[i] != 0;
  return fg;
}

// ---- colour wheel ----

struct RgbImage {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> rgb;  // interleaved, row-major

  friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

namespace detail {

// Middlebury wheel segment lengths: red-yellow, yellow-green, green-cyan,
// cyan-blue, blue-magenta, magenta-red.
inline const std::vector<std::array<double, 3>>& color_wheel() {
  static const std::vector<std::array<double, 3>> wheel = [] {
    constexpr int RY = 15, YG = 6, GC = 4, CB = 11, BM = 13, MR = 6;
    std::vector<std::array<double, 3>> w;
    for (int i = 0; i < RY; ++i) w.push_back({255.0, 255.0 * i / RY, 0.0});
    for (int i = 0; i < YG; ++i) w.push_back({255.0 - 255.0 * i / YG, 255.0, 0.0});
    for (int i = 0; i < GC; ++i) w.push_back({0.0, 255.0, 255.0 * i / GC});
    for (int i = 0; i < CB; ++i) w.push_back({0.0, 255.0 - 255.0 * i / CB, 255.0});
    for (int i = 0; i < BM; ++i) w.push_back({255.0 * i / BM, 0.0, 255.0});
    for (int i = 0; i < MR; ++i) w.push_back({255.0, 0.0, 255.0 - 255.0 * i / MR});
    return w;
  }();
  return wheel;
}

}  // namespace detail

/// Position on the wheel in [0, 1]; rightward flow (u > 0, v = 0) sits at 1,
/// which is the red end of the magenta-red segment.
inline double wheel_position(double u, double v) { return (std::atan2(-v, -u) / std::numbers::pi + 1.0) / 2.0; }

/// Nearest-rank 99th percentile of valid magnitudes, 1 when that is zero.
inline double robust_max_magnitude(const FlowField& f) {
  std::vector<double> mags;
  mags.reserve(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) {
    if (f.is_valid(i)) mags.push_back(std::hypot(static_cast<double>(f.u[i]), static_cast<double>(f.v[i])));
  }
  if (mags.empty()) return 1.0;
  const auto rank = static_cast<std::size_t>(std::ceil(0.99 * static_cast<double>(mags.size())));
  const auto k = std::max<std::size_t>(rank, 1) - 1;
  std::nth_element(mags.begin(), mags.begin() + static_cast<std::ptrdiff_t>(k), mags.end());
  const double m = mags[k];
  return m > 0.0 && std::isfinite(m) ? m : 1.0;
}

inline RgbImage flow_to_color(const FlowField& f, std::optional<double> max_mag = std::nullopt) {
  if (max_mag && !(*max_mag > 0.0)) throw ConfigError("flow_to_color: max_mag must be positive");
  const double norm = max_mag ? *max_mag : robust_max_magnitude(f);
  const auto& wheel = detail::color_wheel();
  const int ncols = static_cast<int>(wheel.size());
  RgbImage img{f.height, f.width, std::vector<std::uint8_t>(f.size() * 3, 0)};
  for (std::size_t i = 0; i < f.size(); ++i) {
    if (!f.is_valid(i)) continue;
    const double u = f.u[i] / norm;
    const double v = f.v[i] / norm;
    const double rad = std::min(std::hypot(u, v), 1.0);
    const double fk = wheel_position(u, v) * (ncols - 1);
    const int k0 = static_cast<int>(std::floor(fk));
    const int k1 = (k0 + 1) % ncols;
    const double frac = fk - k0;
    for (int c = 0; c < 3; ++c) {
      const double col = ((1.0 - frac) * wheel[k0][c] + frac * wheel[k1][c]) / 255.0;
      const double shaded = 1.0 - rad * (1.0 - col);
      img.rgb[3 * i + c] = static_cast<std::uint8_t>(std::floor(255.0 * shaded));
    }
  }
  return img;
}

inline io::Bytes encode_ppm(const RgbImage& img) {
  io::Writer w;
  w.str("P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n");
  w.raw(img.rgb.data(), img.rgb.size());
  return w.take();
}

inline void write_ppm(const std::filesystem::path& path, const RgbImage& img) { io::write_file(path, encode_ppm(img)); }

inline void write_png_rgb(const std::filesystem::path& path, const RgbImage& img) {
  png::Image out{img.width, img.height, 3, 8, std::vector<std::uint16_t>(img.rgb.begin(), img.rgb.end())};
  png::save(path, out);
}

}  // namespace lidarflow
