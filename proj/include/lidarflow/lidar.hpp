#pragma once

#include <Eigen/Core>
#include <Eigen/LU>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "lidarflow/binary_io.hpp"
#include "lidarflow/error.hpp"
#include "lidarflow/flow.hpp"
#include "lidarflow/tensor.hpp"

namespace lidarflow {

inline constexpr double deg2rad(double d) { return d * std::numbers::pi / 180.0; }

/// Lidar grid and image geometry shared by every stage of the pipeline.
struct GridSpec {
  int rows = 64;     // N
  int cols = 384;    // M
  int height = 256;  // H
  int width = 1224;  // W
  double azimuth_min = deg2rad(-45.0);
  double azimuth_max = deg2rad(45.0);
  double elevation_min = deg2rad(-24.8);
  double elevation_max = deg2rad(2.0);

  /// Full-size resolutions (64-beam scan, 256 x 1224 image).
  static GridSpec paper() { return GridSpec{}; }
  /// Desk-scale resolutions used for the overfit experiment.
  static GridSpec desk() {
    GridSpec g;
    g.rows = 32;
    g.cols = 64;
    g.height = 64;
    g.width = 128;
    return g;
  }

  void validate() const {
    if (rows <= 0 || cols <= 0 || height <= 0 || width <= 0) throw ConfigError("grid dimensions must be positive");
    if (rows % 32 != 0 || cols % 32 != 0) {
      throw ConfigError("lidar grid " + std::to_string(rows) + "x" + std::to_string(cols) + " must be divisible by 32");
    }
    if (height % 8 != 0 || width % 8 != 0) {
      throw ConfigError("image " + std::to_string(height) + "x" + std::to_string(width) + " must be divisible by 8");
    }
    if (!(azimuth_min < azimuth_max)) throw ConfigError("horizontal FOV must satisfy min < max");
    if (!(elevation_min < elevation_max)) throw ConfigError("vertical FOV must satisfy min < max");
  }

  friend bool operator==(const GridSpec&, const GridSpec&) = default;
};

struct LidarPoint {
  float x = 0;  // forward, m
  float y = 0;  // left, m
  float z = 0;  // up, m
  float reflectivity = 0;

  friend bool operator==(const LidarPoint&, const LidarPoint&) = default;
};

using PointCloud = std::vector<LidarPoint>;

/// N x M grid of (range, reflectivity) with per-cell validity. Invalid cells
/// hold 0 in both channels.
struct RangeImage {
  int rows = 0;
  int cols = 0;
  std::vector<float> range;
  std::vector<float> reflectivity;
  std::vector<std::uint8_t> valid;

  RangeImage() = default;
  RangeImage(int n, int m)
      : rows(n), cols(m), range(static_cast<std::size_t>(n) * m, 0.0f),
        reflectivity(static_cast<std::size_t>(n) * m, 0.0f), valid(static_cast<std::size_t>(n) * m, 0) {}

  [[nodiscard]] std::size_t size() const { return range.size(); }
  [[nodiscard]] std::size_t index(int r, int c) const { return static_cast<std::size_t>(r) * cols + c; }
  [[nodiscard]] bool is_valid(int r, int c) const { return valid[index(r, c)] != 0; }
  [[nodiscard]] std::size_t valid_count() const {
    std::size_t n = 0;
    for (auto b : valid) n += b != 0;
    return n;
  }

  friend bool operator==(const RangeImage&, const RangeImage&) = default;
};

/// Network input layout: (1, 2, N, M) with range in channel 0.
template <typename T>
Tensor<T> to_tensor(const RangeImage& ri) {
  Tensor<T> t(Shape4{1, 2, ri.rows, ri.cols});
  for (std::size_t i = 0; i < ri.size(); ++i) {
    t[i] = static_cast<T>(ri.range[i]);
    t[ri.size() + i] = static_cast<T>(ri.reflectivity[i]);
  }
  return t;
}

inline Mask validity_mask(const RangeImage& ri) {
  Mask m(1, ri.rows, ri.cols, true);
  m.bits = ri.valid;
  return m;
}

inline RangeImage mirror_columns(const RangeImage& ri) {
  RangeImage out = ri;
  for (int r = 0; r < ri.rows; ++r) {
    for (int c = 0; c < ri.cols; ++c) {
      const auto src = ri.index(r, ri.cols - 1 - c);
      const auto dst = ri.index(r, c);
      out.range[dst] = ri.range[src];
      out.reflectivity[dst] = ri.reflectivity[src];
      out.valid[dst] = ri.valid[src];
    }
  }
  return out;
}

/// Pinhole intrinsics plus a rigid lidar-to-camera transform.
struct CameraModel {
  double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  void validate() const {
    if (!(fx > 0.0) || !(fy > 0.0)) throw ConfigError("camera focal lengths must be positive");
    const double ortho = (rotation.transpose() * rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
    if (ortho > 1e-9 || std::abs(rotation.determinant() - 1.0) > 1e-9) {
      throw ConfigError("camera rotation must be orthonormal with determinant +1");
    }
  }

  /// Lidar axes (x fwd, y left, z up) to camera axes (x right, y down, z fwd).
  static Eigen::Matrix3d lidar_to_camera_axes() {
    Eigen::Matrix3d r;
    r << 0, -1, 0, 0, 0, -1, 1, 0, 0;
    return r;
  }
};

/// Co-located camera whose image spans the grid's angular FOV, with pixel
/// centres at integer coordinates.
inline CameraModel camera_for_grid(const GridSpec& spec) {
  CameraModel cam;
  cam.rotation = CameraModel::lidar_to_camera_axes();
  cam.fx = spec.width / (std::tan(spec.azimuth_max) - std::tan(spec.azimuth_min));
  cam.cx = cam.fx * std::tan(spec.azimuth_max) - 0.5;
  cam.fy = spec.height / (std::tan(spec.elevation_max) - std::tan(spec.elevation_min));
  cam.cy = cam.fy * std::tan(spec.elevation_max) - 0.5;
  return cam;
}

struct PixelProjection {
  double u = 0;
  double v = 0;
  double depth = 0;  // <= 0 means behind the camera; u, v are then meaningless
};

inline PixelProjection pinhole_project(const Eigen::Vector3d& p, const CameraModel& cam) {
  const Eigen::Vector3d q = cam.rotation * p + cam.translation;
  if (q.z() <= 0.0) return PixelProjection{0.0, 0.0, q.z()};
  return PixelProjection{cam.fx * q.x() / q.z() + cam.cx, cam.fy * q.y() / q.z() + cam.cy, q.z()};
}

/// Inverse of pinhole_project for a known depth.
inline Eigen::Vector3d pinhole_unproject(double u, double v, double depth, const CameraModel& cam) {
  const Eigen::Vector3d q((u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth);
  return cam.rotation.transpose() * (q - cam.translation);
}

/// Nearest pixel index of a projection, or false when outside the image.
inline bool nearest_pixel(const PixelProjection& p, int height, int width, int& row, int& col) {
  if (p.depth <= 0.0) return false;
  const double cu = std::round(p.u);
  const double cv = std::round(p.v);
  if (cu < 0.0 || cv < 0.0 || cu >= width || cv >= height) return false;
  col = static_cast<int>(cu);
  row = static_cast<int>(cv);
  return true;
}

inline double azimuth_of(const LidarPoint& p) { return std::atan2(static_cast<double>(p.y), static_cast<double>(p.x)); }
inline double elevation_of(const LidarPoint& p) {
  return std::atan2(static_cast<double>(p.z), std::hypot(static_cast<double>(p.x), static_cast<double>(p.y)));
}

// -------------------------------------------------------------- scan files

/// KITTI velodyne scan: consecutive little-endian f32 (x, y, z, reflectance).
inline PointCloud decode_point_cloud(const io::Bytes& bytes, const std::string& what = "point cloud") {
  if (bytes.size() % 16 != 0) {
    throw FormatError(what + ": truncated record at byte offset " + std::to_string(bytes.size() - bytes.size() % 16) +
                      " (file length " + std::to_string(bytes.size()) + " is not a multiple of 16)");
  }
  io::Reader in(bytes, what);
  PointCloud cloud(bytes.size() / 16);
  for (auto& p : cloud) {
    const std::size_t at = in.offset();
    p.x = in.f32();
    p.y = in.f32();
    p.z = in.f32();
    p.reflectivity = in.f32();
    if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z) || !std::isfinite(p.reflectivity)) {
      throw FormatError(what + ": non-finite value in record at byte offset " + std::to_string(at));
    }
    if (p.reflectivity < 0.0f || p.reflectivity > 1.0f) {
      throw FormatError(what + ": reflectivity outside [0, 1] in record at byte offset " + std::to_string(at));
    }
  }
  return cloud;
}

inline io::Bytes encode_point_cloud(const PointCloud& cloud) {
  io::Writer out;
  for (const auto& p : cloud) {
    out.f32(p.x);
    out.f32(p.y);
    out.f32(p.z);
    out.f32(p.reflectivity);
  }
  return out.take();
}

inline PointCloud load_point_cloud(const std::filesystem::path& path) {
  return decode_point_cloud(io::read_file(path), path.string());
}

inline void save_point_cloud(const std::filesystem::path& path, const PointCloud& cloud) {
  io::write_file(path, encode_point_cloud(cloud));
}

// -------------------------------------------------------------- projection

inline bool in_fov(const LidarPoint& p, const GridSpec& spec) {
  const double az = azimuth_of(p);
  const double el = elevation_of(p);
  return az >= spec.azimuth_min && az <= spec.azimuth_max && el >= spec.elevation_min && el <= spec.elevation_max;
}

/// Points inside the horizontal and vertical FOV, in their original order.
inline PointCloud crop_fov(const PointCloud& cloud, const GridSpec& spec) {
  PointCloud out;
  for (const auto& p : cloud) {
    if (in_fov(p, spec)) out.push_back(p);
  }
  return out;
}

/// Grid cell of an in-FOV point. Rows run top (max elevation) to bottom;
/// column 0 is the rightmost ray (minimum azimuth).
inline void grid_cell(const LidarPoint& p, const GridSpec& spec, int& row, int& col) {
  const double el = elevation_of(p);
  const double az = azimuth_of(p);
  row = static_cast<int>(std::floor(spec.rows * (spec.elevation_max - el) / (spec.elevation_max - spec.elevation_min)));
  col = static_cast<int>(std::floor(spec.cols * (az - spec.azimuth_min) / (spec.azimuth_max - spec.azimuth_min)));
  row = std::clamp(row, 0, spec.rows - 1);
  col = std::clamp(col, 0, spec.cols - 1);
}

struct RangeProjection {
  RangeImage image;
  std::vector<std::int64_t> winner;  // index into the cloud per cell, -1 if empty
};

/// Bin the cloud into the N x M grid; the nearest point wins each cell.
/// Out-of-FOV points and points at the sensor origin are ignored.
inline RangeProjection project_with_index(const PointCloud& cloud, const GridSpec& spec) {
  RangeProjection out{RangeImage(spec.rows, spec.cols), std::vector<std::int64_t>(std::size_t(spec.rows) * spec.cols, -1)};
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto& p = cloud[i];
    if (!in_fov(p, spec)) continue;
    const auto range = static_cast<float>(std::sqrt(static_cast<double>(p.x) * p.x + static_cast<double>(p.y) * p.y +
                                                    static_cast<double>(p.z) * p.z));
    if (!(range > 0.0f)) continue;
    int row = 0, col = 0;
    grid_cell(p, spec, row, col);
    const auto k = out.image.index(row, col);
    if (out.image.valid[k] && out.image.range[k] <= range) continue;
    out.image.valid[k] = 1;
    out.image.range[k] = range;
    out.image.reflectivity[k] = p.reflectivity;
    out.winner[k] = static_cast<std::int64_t>(i);
  }
  return out;
}

inline RangeImage project_to_range_image(const PointCloud& cloud, const GridSpec& spec) {
  return project_with_index(cloud, spec).image;
}

/// Azimuth/elevation of a grid cell centre.
inline void cell_center_angles(const GridSpec& spec, double row, double col, double& elevation, double& azimuth) {
  elevation = spec.elevation_max - (row + 0.5) * (spec.elevation_max - spec.elevation_min) / spec.rows;
  azimuth = spec.azimuth_min + (col + 0.5) * (spec.azimuth_max - spec.azimuth_min) / spec.cols;
}

/// One point per valid cell, placed on the cell-centre ray at the stored
/// range; projecting the result reproduces the image.
inline PointCloud range_image_to_cloud(const RangeImage& ri, const GridSpec& spec) {
  PointCloud cloud;
  for (int r = 0; r < ri.rows; ++r) {
    for (int c = 0; c < ri.cols; ++c) {
      if (!ri.is_valid(r, c)) continue;
      double el = 0, az = 0;
      cell_center_angles(spec, r, c, el, az);
      const double range = ri.range[ri.index(r, c)];
      cloud.push_back(LidarPoint{static_cast<float>(range * std::cos(el) * std::cos(az)),
                                 static_cast<float>(range * std::cos(el) * std::sin(az)),
                                 static_cast<float>(range * std::sin(el)), ri.reflectivity[ri.index(r, c)]});
    }
  }
  return cloud;
}

/// Sample dense image flow at the pixel each winning lidar point projects
/// to. Cells stay invalid when empty, behind the camera, outside the image,
/// or landing on an invalid flow pixel. Values stay in image-pixel units.
inline SparseLidarFlow project_flow_to_lidar(const PointCloud& cloud, const FlowField& dense, const CameraModel& cam,
                                             const GridSpec& spec) {
  if (dense.height != spec.height || dense.width != spec.width) {
    throw ShapeError("project_flow_to_lidar: dense flow is " + std::to_string(dense.height) + "x" +
                     std::to_string(dense.width) + ", grid expects " + std::to_string(spec.height) + "x" +
                     std::to_string(spec.width));
  }
  const auto proj = project_with_index(cloud, spec);
  SparseLidarFlow out(spec.rows, spec.cols, true);
  std::fill(out.valid.begin(), out.valid.end(), 0);
  for (std::size_t k = 0; k < proj.winner.size(); ++k) {
    if (proj.winner[k] < 0) continue;
    const auto& p = cloud[static_cast<std::size_t>(proj.winner[k])];
    const auto px = pinhole_project(Eigen::Vector3d(p.x, p.y, p.z), cam);
    int row = 0, col = 0;
    if (!nearest_pixel(px, dense.height, dense.width, row, col)) continue;
    const auto d = dense.index(row, col);
    if (!dense.is_valid(d)) continue;
    out.u[k] = dense.u[d];
    out.v[k] = dense.v[d];
    out.valid[k] = 1;
  }
  return out;
}

// -------------------------------------------------------------- LRI1 files

inline io::Bytes encode_lri(const RangeImage& ri) {
  io::Writer out;
  out.str("LRI1");
  out.u32(static_cast<std::uint32_t>(ri.rows));
  out.u32(static_cast<std::uint32_t>(ri.cols));
  for (float r : ri.range) out.f32(r);
  for (float r : ri.reflectivity) out.f32(r);
  for (auto b : ri.valid) out.u8(b ? 1 : 0);
  return out.take();
}

inline RangeImage decode_lri(const io::Bytes& bytes, const std::string& what = "LRI1") {
  io::Reader in(bytes, what);
  if (in.str(4) != "LRI1") throw FormatError(what + ": bad magic, expected LRI1");
  const auto n = in.u32();
  const auto m = in.u32();
  const std::uint64_t cells = static_cast<std::uint64_t>(n) * m;
  if (n > (1u << 20) || m > (1u << 20) || cells * 9 != in.remaining()) {
    throw FormatError(what + ": payload of " + std::to_string(in.remaining()) + " bytes does not match " +
                      std::to_string(n) + "x" + std::to_string(m) + " header");
  }
  RangeImage ri(static_cast<int>(n), static_cast<int>(m));
  for (auto& r : ri.range) r = in.f32();
  for (auto& r : ri.reflectivity) r = in.f32();
  for (std::size_t i = 0; i < ri.size(); ++i) {
    const auto b = in.u8();
    if (b > 1) throw FormatError(what + ": validity byte " + std::to_string(b) + " at cell " + std::to_string(i));
    ri.valid[i] = b;
    if (b && !(ri.range[i] > 0.0f)) throw FormatError(what + ": valid cell " + std::to_string(i) + " has range <= 0");
  }
  return ri;
}

inline RangeImage load_lri(const std::filesystem::path& path) { return decode_lri(io::read_file(path), path.string()); }
inline void save_lri(const std::filesystem::path& path, const RangeImage& ri) { io::write_file(path, encode_lri(ri)); }

}  // namespace lidarflow
