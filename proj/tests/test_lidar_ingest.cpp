#include <gtest/gtest.h>

#include <Eigen/Geometry>

#include <cmath>
#include <limits>
#include <map>
#include <random>

#include "lidarflow/lidar.hpp"
#include "temp_dir.hpp"

using namespace lidarflow;
using lidarflow::testing::TempDir;

namespace {

PointCloud random_cloud(std::size_t n, std::mt19937_64& rng, double max_range = 60.0) {
  std::uniform_real_distribution<double> az(deg2rad(-60.0), deg2rad(60.0));
  std::uniform_real_distribution<double> el(deg2rad(-30.0), deg2rad(5.0));
  std::uniform_real_distribution<double> r(1.0, max_range);
  std::uniform_real_distribution<double> refl(0.0, 1.0);
  PointCloud cloud(n);
  for (auto& p : cloud) {
    const double a = az(rng), e = el(rng), d = r(rng);
    p = LidarPoint{static_cast<float>(d * std::cos(e) * std::cos(a)), static_cast<float>(d * std::cos(e) * std::sin(a)),
                   static_cast<float>(d * std::sin(e)), static_cast<float>(refl(rng))};
  }
  return cloud;
}

LidarPoint at_angles(double az, double el, double range) {
  return LidarPoint{static_cast<float>(range * std::cos(el) * std::cos(az)),
                    static_cast<float>(range * std::cos(el) * std::sin(az)), static_cast<float>(range * std::sin(el)),
                    0.5f};
}

}  // namespace

TEST(PointCloudIo, DecodesTwoKnownQuadruples) {
  const PointCloud expected{{1.0f, 2.0f, 3.0f, 0.25f}, {-4.5f, 0.0f, 7.0f, 1.0f}};
  TempDir dir;
  io::Writer w;
  for (const auto& p : expected) {
    w.f32(p.x);
    w.f32(p.y);
    w.f32(p.z);
    w.f32(p.reflectivity);
  }
  ASSERT_EQ(w.bytes().size(), 32u);
  io::write_file(dir / "scan.bin", w.bytes());
  EXPECT_EQ(load_point_cloud(dir / "scan.bin"), expected);
}

TEST(PointCloudIo, EmptyFileGivesEmptyCloud) {
  TempDir dir;
  io::write_file(dir / "empty.bin", {});
  EXPECT_TRUE(load_point_cloud(dir / "empty.bin").empty());
}

TEST(PointCloudIo, RoundTripIsIdentity) {
  std::mt19937_64 rng(7);
  const auto cloud = random_cloud(500, rng);
  TempDir dir;
  save_point_cloud(dir / "c.bin", cloud);
  EXPECT_EQ(load_point_cloud(dir / "c.bin"), cloud);
}

TEST(PointCloudIo, TruncatedFileReportsOffset) {
  io::Bytes bytes(37, 0);
  try {
    decode_point_cloud(bytes, "scan");
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("offset 32"), std::string::npos) << e.what();
  }
}

TEST(PointCloudIo, MissingFileIsFormatError) { EXPECT_THROW(load_point_cloud("/nonexistent/scan.bin"), FormatError); }

TEST(CropFov, StraightAheadKept) {
  const GridSpec spec;
  EXPECT_EQ(crop_fov({{10, 0, 0, 0}}, spec).size(), 1u);
}

TEST(CropFov, BehindDropped) {
  const GridSpec spec;
  EXPECT_TRUE(crop_fov({{-10, 0, 0, 0}}, spec).empty());
}

TEST(CropFov, MatchesBruteForcePredicate) {
  std::mt19937_64 rng(11);
  const auto cloud = random_cloud(5000, rng);
  const GridSpec spec;
  PointCloud expected;
  for (const auto& p : cloud) {
    const double az = std::atan2(p.y, p.x);
    const double el = std::atan2(p.z, std::sqrt(double(p.x) * p.x + double(p.y) * p.y));
    if (az >= spec.azimuth_min && az <= spec.azimuth_max && el >= spec.elevation_min && el <= spec.elevation_max) {
      expected.push_back(p);
    }
  }
  EXPECT_EQ(crop_fov(cloud, spec), expected);
  EXPECT_GT(expected.size(), 0u);
  EXPECT_LT(expected.size(), cloud.size());
}

TEST(RangeProjection, MidFovPointLandsInCentreBand) {
  const GridSpec spec;
  const double az = 0.5 * (spec.azimuth_min + spec.azimuth_max);
  const double el = 0.5 * (spec.elevation_min + spec.elevation_max);
  const auto ri = project_to_range_image({at_angles(az, el, 10.0)}, spec);
  ASSERT_EQ(ri.valid_count(), 1u);
  int hit_r = -1, hit_c = -1;
  for (int r = 0; r < ri.rows; ++r)
    for (int c = 0; c < ri.cols; ++c)
      if (ri.is_valid(r, c)) hit_r = r, hit_c = c;
  EXPECT_TRUE(hit_r == spec.rows / 2 || hit_r == spec.rows / 2 - 1) << hit_r;
  EXPECT_TRUE(hit_c == spec.cols / 2 || hit_c == spec.cols / 2 - 1) << hit_c;
}

TEST(RangeProjection, NearestWinsInSharedCell) {
  const GridSpec spec;
  const auto ri = project_to_range_image({at_angles(0.01, -0.1, 9.0), at_angles(0.01, -0.1, 5.0)}, spec);
  ASSERT_EQ(ri.valid_count(), 1u);
  for (std::size_t i = 0; i < ri.size(); ++i)
    if (ri.valid[i]) EXPECT_NEAR(ri.range[i], 5.0f, 1e-5);
}

TEST(RangeProjection, ThreeFourFiveRange) {
  const GridSpec spec;
  const auto ri = project_to_range_image({{4, 3, 0, 0.3f}}, spec);
  ASSERT_EQ(ri.valid_count(), 1u);
  for (std::size_t i = 0; i < ri.size(); ++i) {
    if (!ri.valid[i]) continue;
    EXPECT_EQ(ri.range[i], 5.0f);
    EXPECT_EQ(ri.reflectivity[i], 0.3f);
  }
}

TEST(RangeProjection, ColumnZeroIsRightmostRay) {
  const GridSpec spec;
  // Negative azimuth is to the right of the sensor.
  const auto ri = project_to_range_image({at_angles(spec.azimuth_min + 1e-4, -0.1, 10.0)}, spec);
  bool found = false;
  for (int r = 0; r < ri.rows; ++r) found = found || ri.is_valid(r, 0);
  EXPECT_TRUE(found);
}

TEST(RangeProjection, EmptyCloudAllInvalid) {
  const auto ri = project_to_range_image({}, GridSpec::desk());
  EXPECT_EQ(ri.valid_count(), 0u);
  EXPECT_EQ(ri.rows, 32);
  EXPECT_EQ(ri.cols, 64);
}

TEST(RangeProjection, NearestWinsAgainstBruteForce) {
  std::mt19937_64 rng(3);
  const auto cloud = random_cloud(10000, rng);
  const GridSpec spec = GridSpec::desk();
  const auto ri = project_to_range_image(cloud, spec);
  std::map<std::pair<int, int>, float> best;
  for (const auto& p : cloud) {
    const double az = std::atan2(p.y, p.x);
    const double el = std::atan2(p.z, std::hypot(p.x, p.y));
    if (az < spec.azimuth_min || az > spec.azimuth_max || el < spec.elevation_min || el > spec.elevation_max) continue;
    int r = static_cast<int>(std::floor(spec.rows * (spec.elevation_max - el) / (spec.elevation_max - spec.elevation_min)));
    int c = static_cast<int>(std::floor(spec.cols * (az - spec.azimuth_min) / (spec.azimuth_max - spec.azimuth_min)));
    r = std::clamp(r, 0, spec.rows - 1);
    c = std::clamp(c, 0, spec.cols - 1);
    const auto range = static_cast<float>(std::sqrt(double(p.x) * p.x + double(p.y) * p.y + double(p.z) * p.z));
    auto [it, inserted] = best.emplace(std::make_pair(r, c), range);
    if (!inserted) it->second = std::min(it->second, range);
  }
  EXPECT_EQ(ri.valid_count(), best.size());
  for (const auto& [cell, range] : best) {
    ASSERT_TRUE(ri.is_valid(cell.first, cell.second));
    EXPECT_EQ(ri.range[ri.index(cell.first, cell.second)], range);
  }
  for (std::size_t i = 0; i < ri.size(); ++i) {
    if (ri.valid[i]) {
      EXPECT_GT(ri.range[i], 0.0f);
    } else {
      EXPECT_EQ(ri.range[i], 0.0f);
      EXPECT_EQ(ri.reflectivity[i], 0.0f);
    }
  }
}

TEST(RangeProjection, MirroringCloudMirrorsColumns) {
  std::mt19937_64 rng(5);
  const GridSpec spec = GridSpec::desk();
  const auto cloud = random_cloud(3000, rng);
  PointCloud mirrored = cloud;
  for (auto& p : mirrored) p.y = -p.y;
  EXPECT_EQ(project_to_range_image(mirrored, spec), mirror_columns(project_to_range_image(cloud, spec)));
}

TEST(Pinhole, OpticalAxis) {
  CameraModel cam;
  cam.fx = cam.fy = 500;
  cam.cx = cam.cy = 100;
  const auto p = pinhole_project({0, 0, 5}, cam);
  EXPECT_DOUBLE_EQ(p.u, 100);
  EXPECT_DOUBLE_EQ(p.v, 100);
  EXPECT_DOUBLE_EQ(p.depth, 5);
}

TEST(Pinhole, ClosedForm) {
  CameraModel cam;
  cam.fx = cam.fy = 500;
  cam.cx = cam.cy = 100;
  const auto p = pinhole_project({1, 0, 5}, cam);
  EXPECT_DOUBLE_EQ(p.u, 200);
  EXPECT_DOUBLE_EQ(p.v, 100);
  EXPECT_DOUBLE_EQ(p.depth, 5);
}

TEST(Pinhole, UnprojectInvertsProject) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> d(-5.0, 5.0);
  CameraModel cam = camera_for_grid(GridSpec{});
  cam.translation = Eigen::Vector3d(0.1, -0.2, 0.3);
  cam.validate();
  for (int i = 0; i < 200; ++i) {
    const Eigen::Vector3d p(std::abs(d(rng)) + 1.0, d(rng), d(rng));
    const auto px = pinhole_project(p, cam);
    ASSERT_GT(px.depth, 0.0);
    EXPECT_LT((pinhole_unproject(px.u, px.v, px.depth, cam) - p).norm(), 1e-9);
  }
}

TEST(Pinhole, RejectsNonOrthonormalRotation) {
  CameraModel cam;
  cam.rotation(0, 0) = 2.0;
  EXPECT_THROW(cam.validate(), ConfigError);
  CameraModel reflect;
  reflect.rotation(0, 0) = -1.0;
  EXPECT_THROW(reflect.validate(), ConfigError);
}

TEST(GridSpecCheck, DivisibilityEnforced) {
  GridSpec g = GridSpec::desk();
  EXPECT_NO_THROW(g.validate());
  g.cols = 48;
  EXPECT_THROW(g.validate(), ConfigError);
  g = GridSpec::desk();
  g.width = 100;
  EXPECT_THROW(g.validate(), ConfigError);
}

TEST(FlowToLidar, SamplesDenseFlowAtProjectedPixel) {
  GridSpec spec = GridSpec::desk();
  const CameraModel cam = camera_for_grid(spec);
  // Place a point on the ray through pixel (10, 20).
  const Eigen::Vector3d p = pinhole_unproject(20.0, 10.0, 8.0, cam);
  FlowField dense(spec.height, spec.width);
  dense.u[dense.index(10, 20)] = 2.0f;
  dense.v[dense.index(10, 20)] = -1.0f;
  const PointCloud cloud{{static_cast<float>(p.x()), static_cast<float>(p.y()), static_cast<float>(p.z()), 0.1f}};
  const auto gt = project_flow_to_lidar(cloud, dense, cam, spec);
  ASSERT_EQ(gt.valid_count(), 1u);
  for (std::size_t k = 0; k < gt.size(); ++k) {
    if (!gt.valid[k]) continue;
    EXPECT_EQ(gt.u[k], 2.0f);
    EXPECT_EQ(gt.v[k], -1.0f);
  }
}

TEST(FlowToLidar, BehindCameraIsInvalid) {
  const PixelProjection p = pinhole_project({0, 0, -3}, CameraModel{});
  int r = 0, c = 0;
  EXPECT_FALSE(nearest_pixel(p, 10, 10, r, c));
  // A camera looking backwards sees in-FOV points at negative depth.
  GridSpec spec = GridSpec::desk();
  CameraModel cam = camera_for_grid(spec);
  cam.rotation = Eigen::Matrix3d(Eigen::AngleAxisd(std::numbers::pi, Eigen::Vector3d::UnitY())) * cam.rotation;
  const auto gt = project_flow_to_lidar({{10, 0, -1, 0.5f}}, FlowField(spec.height, spec.width), cam, spec);
  EXPECT_EQ(gt.valid_count(), 0u);
}

TEST(FlowToLidar, MismatchedDimsIsShapeError) {
  const GridSpec spec = GridSpec::desk();
  EXPECT_THROW(project_flow_to_lidar({}, FlowField(10, 10), camera_for_grid(spec), spec), ShapeError);
}

TEST(FlowToLidar, AffineFieldOracle) {
  const GridSpec spec = GridSpec::desk();
  const CameraModel cam = camera_for_grid(spec);
  auto fu = [](int y, int x) { return 1.5 + 0.25 * x - 0.5 * y; };
  auto fv = [](int y, int x) { return -2.0 + 0.125 * x + 0.375 * y; };
  FlowField dense(spec.height, spec.width);
  for (int y = 0; y < spec.height; ++y)
    for (int x = 0; x < spec.width; ++x) {
      dense.u[dense.index(y, x)] = static_cast<float>(fu(y, x));
      dense.v[dense.index(y, x)] = static_cast<float>(fv(y, x));
    }
  std::mt19937_64 rng(21);
  const auto cloud = random_cloud(4000, rng);
  const auto proj = project_with_index(cloud, spec);
  const auto gt = project_flow_to_lidar(cloud, dense, cam, spec);
  std::size_t checked = 0;
  for (std::size_t k = 0; k < gt.size(); ++k) {
    if (!gt.valid[k]) continue;
    ASSERT_TRUE(proj.image.valid[k]);
    const auto& p = cloud[static_cast<std::size_t>(proj.winner[k])];
    const auto px = pinhole_project(Eigen::Vector3d(p.x, p.y, p.z), cam);
    const int x = static_cast<int>(std::round(px.u));
    const int y = static_cast<int>(std::round(px.v));
    EXPECT_EQ(gt.u[k], static_cast<float>(fu(y, x)));
    EXPECT_EQ(gt.v[k], static_cast<float>(fv(y, x)));
    ++checked;
  }
  EXPECT_GT(checked, 100u);
}

TEST(FlowToLidar, ValiditySubsetOfRangeImage) {
  std::mt19937_64 rng(2);
  const GridSpec spec = GridSpec::desk();
  CameraModel cam = camera_for_grid(spec);
  cam.translation = Eigen::Vector3d(0.5, 0.0, 0.0);  // shifted camera clips part of the grid
  const auto cloud = random_cloud(4000, rng);
  const auto ri = project_to_range_image(cloud, spec);
  const auto gt = project_flow_to_lidar(cloud, FlowField(spec.height, spec.width), cam, spec);
  for (std::size_t k = 0; k < gt.size(); ++k)
    if (gt.valid[k]) EXPECT_TRUE(ri.valid[k]);
  EXPECT_LT(gt.valid_count(), ri.valid_count());
}

TEST(FlowToLidar, CellCentreCloudReprojectsToSameImage) {
  std::mt19937_64 rng(4);
  const GridSpec spec = GridSpec::desk();
  const auto ri = project_to_range_image(random_cloud(3000, rng), spec);
  const auto again = project_to_range_image(range_image_to_cloud(ri, spec), spec);
  EXPECT_EQ(again.valid, ri.valid);
  for (std::size_t i = 0; i < ri.size(); ++i) EXPECT_NEAR(again.range[i], ri.range[i], 1e-4);
}

TEST(LriFormat, RoundTripBitExact) {
  std::mt19937_64 rng(8);
  const GridSpec spec = GridSpec::desk();
  const auto ri = project_to_range_image(random_cloud(2000, rng), spec);
  TempDir dir;
  save_lri(dir / "x.lri", ri);
  EXPECT_EQ(load_lri(dir / "x.lri"), ri);
  EXPECT_EQ(io::read_file(dir / "x.lri").size(), 12u + 9u * ri.size());
}

TEST(LriFormat, GoldenBytes) {
  RangeImage ri(1, 2);
  ri.range = {5.0f, 0.0f};
  ri.reflectivity = {0.5f, 0.0f};
  ri.valid = {1, 0};
  const io::Bytes expected{'L', 'R', 'I', '1', 1, 0, 0, 0, 2, 0, 0, 0,           // header
                           0x00, 0x00, 0xa0, 0x40, 0x00, 0x00, 0x00, 0x00,        // ranges
                           0x00, 0x00, 0x00, 0x3f, 0x00, 0x00, 0x00, 0x00,        // reflectivities
                           1, 0};
  EXPECT_EQ(encode_lri(ri), expected);
  EXPECT_EQ(decode_lri(expected), ri);
}

TEST(LriFormat, RejectsBadInput) {
  io::Bytes bad_magic{'L', 'R', 'I', '2', 0, 0, 0, 0, 0, 0, 0, 0};
  EXPECT_THROW(decode_lri(bad_magic), FormatError);
  RangeImage ri(1, 1);
  auto bytes = encode_lri(ri);
  bytes.pop_back();
  EXPECT_THROW(decode_lri(bytes), FormatError);
  bytes = encode_lri(ri);
  bytes.back() = 1;  // valid but range 0
  EXPECT_THROW(decode_lri(bytes), FormatError);
}
