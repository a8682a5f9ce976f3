#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "lidarflow/error.hpp"
#include "lidarflow/flow.hpp"
#include "lidarflow/lidar.hpp"
#include "lidarflow/training.hpp"

namespace lidarflow {

/// Parameters of one synthetic scene. Flow bounds are in image pixels.
struct SceneConfig {
  GridSpec spec = GridSpec::desk();
  int n_objects = 2;
  double background_max = 3.0;        // |tu|, |tv| of the background translation
  double object_translation_max = 4.0;
  double object_affine_max = 0.02;    // |d flow / d pixel| of object motion
  int texture_octaves = 3;
  double dropout = 0.02;              // probability a lidar cell has no return
  std::uint64_t seed = 0;

  /// Largest |u| or |v| the bounds allow.
  [[nodiscard]] double flow_bound() const {
    return background_max + object_translation_max + 2.0 * object_affine_max * std::max(spec.width, spec.height);
  }

  void validate() const {
    spec.validate();
    if (n_objects < 0 || n_objects > 5) throw ConfigError("n_objects must lie in [0, 5]");
    if (!(background_max >= 0.0) || !(object_translation_max >= 0.0) || !(object_affine_max >= 0.0)) {
      throw ConfigError("flow bounds must be non-negative");
    }
    if (!(flow_bound() < 512.0)) {
      throw ConfigError("infeasible bounds: flows up to " + std::to_string(flow_bound()) +
                        " px exceed the PNG-encodable range");
    }
    if (texture_octaves < 1) throw ConfigError("texture_octaves must be >= 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  }
};

/// Axis-aligned object in image pixels with flow u = a0 + a1 dx + a2 dy and
/// v = b0 + b1 dx + b2 dy about its centre.
struct SceneObject {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // half-open
  double a0 = 0, a1 = 0, a2 = 0;
  double b0 = 0, b1 = 0, b2 = 0;
  double range_offset = 0;

  [[nodiscard]] bool contains(int x, int y) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }
  [[nodiscard]] double cx() const { return 0.5 * (x0 + x1 - 1); }
  [[nodiscard]] double cy() const { return 0.5 * (y0 + y1 - 1); }
  [[nodiscard]] double u(int x, int y) const { return a0 + a1 * (x - cx()) + a2 * (y - cy()); }
  [[nodiscard]] double v(int x, int y) const { return b0 + b1 * (x - cx()) + b2 * (y - cy()); }
};

/// Inverse warp: out(q) samples `src` bilinearly at q - flow(q), where flow
/// is in grid cells (u along columns, v along rows). A cell becomes invalid
/// when the sample point leaves the grid or any neighbour carrying non-zero
/// weight is invalid.
inline RangeImage warp_range_image(const RangeImage& src, const FlowField& flow) {
  if (flow.height != src.rows || flow.width != src.cols) throw ShapeError("warp_range_image: flow does not match grid");
  RangeImage out(src.rows, src.cols);
  for (int r = 0; r < src.rows; ++r) {
    for (int c = 0; c < src.cols; ++c) {
      const auto k = out.index(r, c);
      if (!flow.is_valid(k)) continue;
      const double sx = c - static_cast<double>(flow.u[k]);
      const double sy = r - static_cast<double>(flow.v[k]);
      const double fx0 = std::floor(sx), fy0 = std::floor(sy);
      const double ax = sx - fx0, ay = sy - fy0;
      const int x0 = static_cast<int>(fx0), y0 = static_cast<int>(fy0);
      double range = 0.0, refl = 0.0;
      bool ok = true;
      for (int dy = 0; dy < 2 && ok; ++dy) {
        for (int dx = 0; dx < 2 && ok; ++dx) {
          const double w = (dx ? ax : 1.0 - ax) * (dy ? ay : 1.0 - ay);
          if (w == 0.0) continue;
          const int x = x0 + dx, y = y0 + dy;
          if (x < 0 || y < 0 || x >= src.cols || y >= src.rows || !src.is_valid(y, x)) {
            ok = false;
            break;
          }
          range += w * src.range[src.index(y, x)];
          refl += w * src.reflectivity[src.index(y, x)];
        }
      }
      if (!ok) continue;
      out.valid[k] = 1;
      out.range[k] = static_cast<float>(range);
      out.reflectivity[k] = static_cast<float>(refl);
    }
  }
  return out;
}

/// Image pixel hit by each cell-centre ray (row-major over the grid). A ray
/// that misses the image gives -1, or the nearest border pixel with `clamp`.
inline std::vector<std::int64_t> cell_pixels(const GridSpec& spec, const CameraModel& cam, bool clamp = false) {
  std::vector<std::int64_t> out(static_cast<std::size_t>(spec.rows) * spec.cols, -1);
  for (int r = 0; r < spec.rows; ++r) {
    for (int c = 0; c < spec.cols; ++c) {
      double el = 0, az = 0;
      cell_center_angles(spec, r, c, el, az);
      const Eigen::Vector3d p(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el));
      const auto px = pinhole_project(p, cam);
      int row = 0, col = 0;
      if (nearest_pixel(px, spec.height, spec.width, row, col)) {
        out[static_cast<std::size_t>(r) * spec.cols + c] = static_cast<std::int64_t>(row) * spec.width + col;
      } else if (clamp && px.depth > 0.0) {
        row = static_cast<int>(std::clamp(std::round(px.v), 0.0, spec.height - 1.0));
        col = static_cast<int>(std::clamp(std::round(px.u), 0.0, spec.width - 1.0));
        out[static_cast<std::size_t>(r) * spec.cols + c] = static_cast<std::int64_t>(row) * spec.width + col;
      }
    }
  }
  return out;
}

/// Lidar-grid flow in cells for an image flow: u maps to columns with the
/// sign reversed (column 0 is the rightmost ray), v maps to rows. Rays that
/// miss the image take the flow of the nearest border pixel.
inline FlowField grid_flow_from_image(const FlowField& dense, const GridSpec& spec, const CameraModel& cam) {
  const auto pix = cell_pixels(spec, cam, true);
  FlowField out(spec.rows, spec.cols, true);
  const double su = -static_cast<double>(spec.cols) / spec.width;
  const double sv = static_cast<double>(spec.rows) / spec.height;
  for (std::size_t k = 0; k < pix.size(); ++k) {
    if (pix[k] < 0 || !dense.is_valid(static_cast<std::size_t>(pix[k]))) {
      out.valid[k] = 0;
      continue;
    }
    out.u[k] = static_cast<float>(su * dense.u[static_cast<std::size_t>(pix[k])]);
    out.v[k] = static_cast<float>(sv * dense.v[static_cast<std::size_t>(pix[k])]);
  }
  return out;
}

/// Pixels not involved in a two-motion conflict: every pixel is pushed to
/// its rounded target, and targets reached by more than one motion label
/// mark all of their sources as occluded.
inline std::vector<std::uint8_t> noc_mask(const FlowField& dense, const std::vector<std::uint8_t>& labels) {
  const int h = dense.height, w = dense.width;
  std::vector<std::uint32_t> hits(dense.size(), 0);
  std::vector<std::int64_t> target(dense.size(), -1);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const auto i = dense.index(y, x);
      const double tx = std::round(x + static_cast<double>(dense.u[i]));
      const double ty = std::round(y + static_cast<double>(dense.v[i]));
      if (tx < 0 || ty < 0 || tx >= w || ty >= h) continue;
      target[i] = static_cast<std::int64_t>(ty) * w + static_cast<std::int64_t>(tx);
      hits[static_cast<std::size_t>(target[i])] |= 1u << labels[i];
    }
  }
  std::vector<std::uint8_t> noc(dense.size(), 1);
  for (std::size_t i = 0; i < noc.size(); ++i) {
    if (target[i] < 0) continue;
    const auto m = hits[static_cast<std::size_t>(target[i])];
    if ((m & (m - 1)) != 0) noc[i] = 0;
  }
  return noc;
}

inline std::string sample_id(std::uint64_t seed) {
  std::ostringstream os;
  os << "s" << seed;
  return os.str();
}

/// One deterministic synthetic training pair with dense, sparse and mask
/// ground truth.
inline TrainSample generate_sample(const SceneConfig& cfg) {
  cfg.validate();
  const GridSpec& spec = cfg.spec;
  const int H = spec.height, W = spec.width;
  std::mt19937_64 rng(cfg.seed);
  auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  auto uni_int = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };

  const double tu = uni(-cfg.background_max, cfg.background_max);
  const double tv = uni(-cfg.background_max, cfg.background_max);
  std::vector<SceneObject> objects;
  for (int o = 0; o < cfg.n_objects; ++o) {
    SceneObject ob;
    const int ow = uni_int(std::max(2, W / 8), std::max(2, W / 3));
    const int oh = uni_int(std::max(2, H / 8), std::max(2, H / 3));
    ob.x0 = uni_int(0, W - ow);
    ob.y0 = uni_int(0, H - oh);
    ob.x1 = ob.x0 + ow;
    ob.y1 = ob.y0 + oh;
    const double t = cfg.object_translation_max, a = cfg.object_affine_max;
    ob.a0 = tu + uni(-t, t);
    ob.b0 = tv + uni(-t, t);
    ob.a1 = uni(-a, a);
    ob.a2 = uni(-a, a);
    ob.b1 = uni(-a, a);
    ob.b2 = uni(-a, a);
    ob.range_offset = -uni(5.0, 8.0);
    objects.push_back(ob);
  }

  TrainSample s;
  s.id = sample_id(cfg.seed);
  s.gt_dense = FlowField(H, W);
  s.fg.assign(s.gt_dense.size(), 0);
  std::vector<std::uint8_t> labels(s.gt_dense.size(), 0);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const auto i = s.gt_dense.index(y, x);
      double u = tu, v = tv;
      for (std::size_t o = 0; o < objects.size(); ++o) {  // later objects lie on top
        if (!objects[o].contains(x, y)) continue;
        u = objects[o].u(x, y);
        v = objects[o].v(x, y);
        labels[i] = static_cast<std::uint8_t>(o + 1);
      }
      s.gt_dense.u[i] = static_cast<float>(u);
      s.gt_dense.v[i] = static_cast<float>(v);
      s.fg[i] = labels[i] != 0;
    }
  }
  s.noc = noc_mask(s.gt_dense, labels);

  // Range texture on the grid, then per-object offsets where the cell's ray
  // hits an object.
  struct Wave {
    double amp, fx, fy, phase;
  };
  std::vector<Wave> range_waves, refl_waves;
  for (int k = 0; k < cfg.texture_octaves; ++k) {
    const double f = std::ldexp(1.0, k) * uni(1.0, 2.0);
    const double theta = uni(0.0, 2.0 * std::numbers::pi);
    range_waves.push_back({15.0 / std::ldexp(1.0, k), f * std::cos(theta), f * std::sin(theta),
                           uni(0.0, 2.0 * std::numbers::pi)});
    const double g = std::ldexp(1.0, k) * uni(1.0, 2.0);
    const double phi = uni(0.0, 2.0 * std::numbers::pi);
    refl_waves.push_back({0.2 / std::ldexp(1.0, k), g * std::cos(phi), g * std::sin(phi),
                          uni(0.0, 2.0 * std::numbers::pi)});
  }
  auto texture = [&](const std::vector<Wave>& waves, double base, int r, int c) {
    double acc = base;
    for (const auto& wv : waves) {
      acc += wv.amp * std::sin(2.0 * std::numbers::pi * (wv.fx * c / spec.cols + wv.fy * r / spec.rows) + wv.phase);
    }
    return acc;
  };
  const CameraModel cam = camera_for_grid(spec);
  const auto pix = cell_pixels(spec, cam, true);
  s.xt = RangeImage(spec.rows, spec.cols);
  for (int r = 0; r < spec.rows; ++r) {
    for (int c = 0; c < spec.cols; ++c) {
      const auto k = s.xt.index(r, c);
      const bool dropped = uni(0.0, 1.0) < cfg.dropout;
      if (dropped) continue;
      double range = texture(range_waves, 40.0, r, c);
      if (pix[k] >= 0 && labels[static_cast<std::size_t>(pix[k])] != 0) {
        range += objects[labels[static_cast<std::size_t>(pix[k])] - 1u].range_offset;
      }
      s.xt.valid[k] = 1;
      s.xt.range[k] = static_cast<float>(std::clamp(range, 2.0, 80.0));
      s.xt.reflectivity[k] = static_cast<float>(std::clamp(texture(refl_waves, 0.5, r, c), 0.0, 1.0));
    }
  }
  s.xt1 = warp_range_image(s.xt, grid_flow_from_image(s.gt_dense, spec, cam));
  s.gt_lidar = project_flow_to_lidar(range_image_to_cloud(s.xt, spec), s.gt_dense, cam, spec);
  return s;
}

// ---------------------------------------------------------------- manifest

struct ManifestEntry {
  std::string split;
  std::uint64_t seed = 0;
  std::string id;

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

/// Disjoint seed ranges per split: train from base, val from base + 1e6,
/// test from base + 2e6.
inline std::vector<ManifestEntry> make_manifest(int n_train, int n_val, int n_test, std::uint64_t base_seed = 0) {
  if (n_train < 0 || n_val < 0 || n_test < 0) throw ConfigError("split sizes must be >= 0");
  if (std::max({n_train, n_val, n_test}) > 1000000) throw ConfigError("split sizes must be <= 1e6");
  std::vector<ManifestEntry> out;
  const std::pair<const char*, int> splits[] = {{"train", n_train}, {"val", n_val}, {"test", n_test}};
  std::uint64_t offset = 0;
  for (const auto& [name, n] : splits) {
    for (int i = 0; i < n; ++i) {
      const std::uint64_t seed = base_seed + offset + static_cast<std::uint64_t>(i);
      out.push_back(ManifestEntry{name, seed, sample_id(seed)});
    }
    offset += 1000000;
  }
  return out;
}

inline void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write " + path.string());
  for (const auto& e : entries) os << e.split << ' ' << e.seed << ' ' << e.id << '\n';
  if (!os) throw FormatError("failed writing " + path.string());
}

/// Lines of "split seed id"; blank lines and lines starting with '#' are skipped.
inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open " + path.string());
  std::vector<ManifestEntry> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    ManifestEntry e;
    std::string extra;
    if (!(ls >> e.split >> e.seed >> e.id) || (ls >> extra)) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected 'split seed id'");
    }
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace lidarflow
