#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "lidarflow/network.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace lidarflow;
using lidarflow::testing::network_gradient_error;
using lidarflow::testing::random_input;
using lidarflow::testing::random_range_image;
using lidarflow::testing::small_desk;

namespace {

void expect_dims(const Shape4& s, int h, int w) {
  EXPECT_EQ(s.n, 1);
  EXPECT_EQ(s.c, 2);
  EXPECT_EQ(s.h, h);
  EXPECT_EQ(s.w, w);
}

/// Parameter count computed directly from the configuration.
std::size_t closed_form_count(const NetworkConfig& c) {
  const std::size_t b = c.base_channels;
  auto conv = [](std::size_t in, std::size_t out, std::size_t kh, std::size_t kw) { return out * in * kh * kw + out; };
  std::size_t n = 0;
  const std::size_t ch[6] = {4, b, 2 * b, 4 * b, 8 * b, 8 * b};
  const std::size_t k[5] = {7, 5, 5, 3, 3};
  for (int l = 0; l < 5; ++l) n += conv(ch[l], ch[l + 1], k[l], k[l]);
  n += conv(ch[5], 2, 3, 3);
  std::size_t feat = ch[5];
  for (int l = 4; l >= 1; --l) {
    const std::size_t d = std::max<std::size_t>(1, ch[l] / 2);
    n += conv(feat, d, 4, 4);
    feat = ch[l] + d + 2;
    n += conv(feat, 2, 3, 3);
  }
  const auto hs = width_schedule(c.spec.rows / 2, c.spec.height / 8, c.dt_stages);
  const auto ws = width_schedule(c.spec.cols / 2, c.spec.width / 8, c.dt_stages);
  std::size_t in = 6;
  int h = c.spec.rows / 2, w = c.spec.cols / 2;
  for (int s = 0; s < c.dt_stages; ++s) {
    n += conv(in, b, c.narrow_kernel[0], c.narrow_kernel[1]);
    n += (c.narrow_layers - 1) * conv(b, b, c.narrow_kernel[0], c.narrow_kernel[1]);
    const int kh = std::max(c.wide_kernel_height, 1 - (hs[s] - h));
    const int kw = std::max(c.wide_kernel_width, 1 - (ws[s] - w));
    n += conv(in, b, kh, kw);
    in = 2 * b;
    h = hs[s];
    w = ws[s];
  }
  n += conv(2 * b, b, 4, 4) + conv(b, 2, 3, 3);
  n += conv(b + 2, b, 4, 4) + conv(b, 2, 3, 3);
  n += c.refine_iters * (conv(b + 2, b, 3, 3) + (c.refine_convs_per_iter - 1) * conv(b, b, 3, 3) + conv(b, 2, 3, 3));
  return n;
}

}  // namespace

TEST(WidthSchedule, EqualSteps) { EXPECT_EQ(width_schedule(192, 153, 3), (std::vector<int>{179, 166, 153})); }

TEST(WidthSchedule, Identity) { EXPECT_EQ(width_schedule(100, 100, 3), (std::vector<int>{100, 100, 100})); }

TEST(WidthSchedule, RoundingScheme) {
  const auto s = width_schedule(10, 25, 4);
  ASSERT_EQ(s.size(), 4u);
  EXPECT_EQ(s.back(), 25);
  int prev = 10;
  for (int v : s) {
    EXPECT_TRUE(v - prev == 3 || v - prev == 4) << v - prev;
    prev = v;
  }
}

TEST(WidthSchedule, MatchesRationalRoundingOracle) {
  for (int a = 1; a < 60; a += 3)
    for (int b = 1; b < 60; b += 5)
      for (int s = 1; s <= 5; ++s) {
        const auto got = width_schedule(a, b, s);
        for (int k = 1; k <= s; ++k) {
          const double exact = a + (b - a) * static_cast<double>(k) / s;
          EXPECT_EQ(got[k - 1], a + static_cast<int>(std::round(exact - a))) << a << " " << b << " " << s;
        }
        EXPECT_EQ(got.back(), b);
      }
}

TEST(Plan, PaperConfigShapes) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto plan = make_plan(NetworkConfig::paper());
  EXPECT_EQ(plan.lidar_out_h, 32);
  EXPECT_EQ(plan.lidar_out_w, 192);
  EXPECT_EQ(plan.sites.front().h, 2);
  EXPECT_EQ(plan.sites.front().w, 12);
  EXPECT_EQ(plan.dt_widths, (std::vector<int>{179, 166, 153}));
  EXPECT_EQ(plan.a_out_h, 32);
  EXPECT_EQ(plan.a_out_w, 153);
  EXPECT_EQ(plan.up_out_h, 128);
  EXPECT_EQ(plan.up_out_w, 612);
  EXPECT_EQ(plan.final_h, 256);
  EXPECT_EQ(plan.final_w, 1224);
  ASSERT_EQ(plan.sites.size(), 12u);
  for (int i = 5; i < 12; ++i) {
    EXPECT_EQ(plan.sites[i].h, i == 5 ? 64 : 128);
    EXPECT_EQ(plan.sites[i].w, i == 5 ? 306 : 612);
  }
  EXPECT_EQ(plan.layer("up.a1.wide").kw, 25);
  EXPECT_EQ(plan.layer("up.a1.wide").kh, 3);
  EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 5.0);
}

TEST(Plan, LidarPredictionScales) {
  const auto plan = make_plan(NetworkConfig::paper());
  const int expect[5][2] = {{2, 12}, {4, 24}, {8, 48}, {16, 96}, {32, 192}};
  for (int i = 0; i < 5; ++i) {
    EXPECT_EQ(plan.sites[i].h, expect[i][0]);
    EXPECT_EQ(plan.sites[i].w, expect[i][1]);
    EXPECT_EQ(plan.sites[i].block, "lidar");
  }
}

TEST(Plan, DeskConfigShapes) {
  const auto plan = make_plan(NetworkConfig::desk());
  EXPECT_EQ(plan.lidar_out_h, 16);
  EXPECT_EQ(plan.lidar_out_w, 32);
  EXPECT_EQ(plan.sites.front().h, 1);
  EXPECT_EQ(plan.sites.front().w, 2);
  EXPECT_EQ(plan.a_out_h, 8);
  EXPECT_EQ(plan.a_out_w, 16);
  EXPECT_EQ(plan.up_out_h, 32);
  EXPECT_EQ(plan.up_out_w, 64);
  EXPECT_EQ(plan.final_h, 64);
  EXPECT_EQ(plan.final_w, 128);
  // The height schedule 16 -> 13 shrinks by 3, so the wide kernel grows to 4.
  EXPECT_EQ(plan.dt_heights, (std::vector<int>{13, 11, 8}));
  EXPECT_EQ(plan.layer("up.a1.wide").kh, 4);
}

TEST(Plan, WideDeskConfigShapes) {
  NetworkConfig c = NetworkConfig::desk();
  c.spec.cols = 128;
  c.spec.width = 320;
  const auto plan = make_plan(c);
  EXPECT_EQ(plan.lidar_out_w, 64);
  EXPECT_EQ(plan.dt_widths, (std::vector<int>{56, 48, 40}));
  EXPECT_EQ(plan.a_out_w, 40);
  EXPECT_EQ(plan.up_out_w, 160);
  EXPECT_EQ(plan.final_w, 320);
}

TEST(Plan, GrowingScheduleIsSupported) {
  NetworkConfig c = NetworkConfig::desk();
  c.spec.width = 512;  // W/8 = 64 > M/2 = 32
  const auto plan = make_plan(c);
  EXPECT_EQ(plan.dt_widths, (std::vector<int>{43, 53, 64}));
  EXPECT_EQ(plan.a_out_w, 64);
}

TEST(Plan, InfeasibleScheduleIsGeometryError) {
  NetworkConfig c = NetworkConfig::desk();
  c.narrow_layers = 1;
  c.narrow_kernel = {1, 1};  // a 1x1 narrow branch cannot shrink anything
  EXPECT_THROW(make_plan(c), GeometryError);
}

TEST(Plan, InvalidGridIsConfigError) {
  NetworkConfig c = NetworkConfig::desk();
  c.spec.rows = 40;
  EXPECT_THROW(make_plan(c), ConfigError);
}

TEST(Plan, ParameterCountMatchesClosedForm) {
  for (const auto& c : {NetworkConfig::paper(), NetworkConfig::desk(), small_desk(3)}) {
    const auto plan = make_plan(c);
    EXPECT_EQ(plan.param_count(), closed_form_count(c));
    EXPECT_EQ(zero_params<float>(plan).scalar_count(), closed_form_count(c));
  }
}

TEST(Plan, EveryParameterRegisteredOnce) {
  const auto p = zero_params<float>(make_plan(NetworkConfig::desk()));
  std::set<std::string> seen(p.names.begin(), p.names.end());
  EXPECT_EQ(seen.size(), p.names.size());
  for (const auto& n : p.names) {
    const auto block = n.substr(0, n.find('.'));
    EXPECT_TRUE(block == "lidar" || block == "up" || block == "end") << n;
  }
}

TEST(Forward, DeskShapesMatchPlan) {
  const auto cfg = small_desk();
  const auto plan = make_plan(cfg);
  const auto params = init_params<double>(plan, 1);
  Graph<double> g;
  const auto out = full_forward(g, plan, params, random_input<double>(cfg, 2));
  ASSERT_EQ(out.sites().size(), 12u);
  for (std::size_t i = 0; i < 12; ++i) expect_dims(out.sites()[i].shape(), plan.sites[i].h, plan.sites[i].w);
  expect_dims(out.lidar_preds.back().shape(), 16, 32);
  expect_dims(out.lidar_preds.front().shape(), 1, 2);
  EXPECT_EQ(out.a_features.shape().h, 8);
  EXPECT_EQ(out.a_features.shape().w, 16);
  expect_dims(out.up_preds.back().shape(), 32, 64);
  for (const auto& p : out.refine_preds) expect_dims(p.shape(), 32, 64);
  expect_dims(out.final.shape(), 64, 128);
}

TEST(Forward, FinalIsUpsampledLastRefinement) {
  const auto cfg = small_desk();
  const auto plan = make_plan(cfg);
  const auto params = init_params<double>(plan, 4);
  Graph<double> g;
  const auto out = full_forward(g, plan, params, random_input<double>(cfg, 5));
  Graph<double> h;
  const auto up = bilinear_upsample2x(h.input(out.refine_preds.back().value()));
  EXPECT_EQ(up.value(), out.final.value());
}

TEST(Forward, ZeroInputsGiveZeroLidarPredictions) {
  const auto cfg = small_desk();
  const auto plan = make_plan(cfg);
  const auto params = init_params<double>(plan, 3);
  const RangeImage empty(cfg.spec.rows, cfg.spec.cols);
  Graph<double> g;
  const auto out = full_forward(g, plan, params, make_input<double>(cfg, empty, empty));
  for (const auto& p : out.lidar_preds)
    for (double v : p.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(Forward, DeterministicGivenSeed) {
  const auto cfg = small_desk();
  const auto plan = make_plan(cfg);
  const auto in = random_input<float>(cfg, 9);
  Graph<float> g1, g2;
  const auto a = full_forward(g1, plan, init_params<float>(plan, 42), in);
  const auto b = full_forward(g2, plan, init_params<float>(plan, 42), in);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(a.sites()[i].value(), b.sites()[i].value());
  EXPECT_EQ(a.final.value(), b.final.value());
  EXPECT_NE(init_params<float>(plan, 42), init_params<float>(plan, 43));
}

TEST(Forward, WrongInputDimsIsShapeError) {
  const auto cfg = small_desk();
  EXPECT_THROW(make_input<double>(cfg, RangeImage(16, 64), RangeImage(16, 64)), ShapeError);
}

TEST(Forward, InputNormalisationTouchesValidCellsOnly) {
  NetworkConfig cfg = small_desk();
  cfg.input_scale = {0.5, 2.0};
  cfg.input_shift = {-1.0, 0.0};
  RangeImage ri(cfg.spec.rows, cfg.spec.cols);
  ri.valid[0] = 1;
  ri.range[0] = 10.0f;
  ri.reflectivity[0] = 0.25f;
  const auto t = normalized_input<double>(ri, cfg);
  const int last = cfg.spec.cols - 1;  // grid column 0 is the rightmost ray
  EXPECT_EQ(t(0, 0, 0, last), 4.0);
  EXPECT_EQ(t(0, 1, 0, last), 0.5);
  EXPECT_EQ(t(0, 0, 0, 0), 0.0);
  EXPECT_EQ(t(0, 0, 0, last - 1), 0.0);
}

TEST(Forward, NetworkColumnOrderIsAnInvolution) {
  FlowField f(2, 4, true);
  for (std::size_t i = 0; i < f.size(); ++i) f.u[i] = static_cast<float>(i);
  f.valid[1] = 0;
  const auto n = to_network_columns(f);
  EXPECT_EQ(n.u[3], 0.0f);
  EXPECT_EQ(n.valid[2], 0);
  EXPECT_EQ(to_network_columns(n), f);
}

// Refinement pass-through: each iteration carries (u, -u, v, -v) in its first
// four feature channels; since leaky(x) - leaky(-x) = (1 + slope) x, every
// linear read-out recovers the flow exactly.
TEST(Refinement, ConstructedIdentityReproducesYUp) {
  const auto cfg = small_desk(4);
  const auto plan = make_plan(cfg);
  auto params = zero_params<double>(plan);
  const double gain = 1.0 / (1.0 + cfg.leaky_slope);
  const int b = cfg.base_channels;
  for (int i = 1; i <= cfg.refine_iters; ++i) {
    const std::string it = "end.r" + std::to_string(i);
    auto& w1 = params[it + ".conv1.weight"];  // (b, b + 2, 3, 3)
    auto& w2 = params[it + ".conv2.weight"];  // (b, b, 3, 3)
    auto& wp = params[it + ".pred.weight"];   // (2, b, 3, 3)
    for (int f = 0; f < 2; ++f) {
      if (i == 1) {
        // Seed from the raw prediction channels b, b + 1.
        w1(2 * f, b + f, 1, 1) = 1.0;
        w1(2 * f + 1, b + f, 1, 1) = -1.0;
      } else {
        w1(2 * f, 2 * f, 1, 1) = gain;
        w1(2 * f, 2 * f + 1, 1, 1) = -gain;
        w1(2 * f + 1, 2 * f, 1, 1) = -gain;
        w1(2 * f + 1, 2 * f + 1, 1, 1) = gain;
      }
      w2(2 * f, 2 * f, 1, 1) = gain;
      w2(2 * f, 2 * f + 1, 1, 1) = -gain;
      w2(2 * f + 1, 2 * f, 1, 1) = -gain;
      w2(2 * f + 1, 2 * f + 1, 1, 1) = gain;
      wp(f, 2 * f, 1, 1) = gain;
      wp(f, 2 * f + 1, 1, 1) = -gain;
    }
  }
  std::mt19937_64 rng(6);
  Graph<double> g;
  const auto bound = bind(g, params);
  Forward<double> fwd(plan, bound);
  const auto y_up = g.input(lidarflow::testing::random_tensor<double>(Shape4{1, 2, 32, 64}, rng, -5, 5));
  const auto carry = g.input(lidarflow::testing::random_tensor<double>(Shape4{1, b, 32, 64}, rng));
  const auto out = fwd.refine(y_up, carry);
  ASSERT_EQ(out.preds.size(), 5u);
  for (const auto& p : out.preds) {
    expect_dims(p.shape(), 32, 64);
    for (std::size_t k = 0; k < p.value().size(); ++k) EXPECT_NEAR(p.value()[k], y_up.value()[k], 1e-12);
  }
}

TEST(Gradients, NetworkMatchesFiniteDifferences64) { EXPECT_LT(network_gradient_error<double>(1e-6), 1e-4); }

TEST(Gradients, NetworkMatchesFiniteDifferences32) { EXPECT_LT(network_gradient_error<float>(1e-6), 1e-3); }

// Horizontal mirror equivariance. The stride-2 odd-kernel contractions of the
// lidar block cannot commute with a mirror on even widths, so that block is
// zeroed and the check covers the domain transform and refinement blocks,
// with weights symmetrised according to the per-channel mirror parity.
TEST(Equivariance, MirrorCommutesWithSymmetricWeights) {
  NetworkConfig cfg;
  cfg.spec.rows = 32;
  cfg.spec.cols = 64;
  cfg.spec.height = 128;
  cfg.spec.width = 256;
  cfg.base_channels = 3;
  const auto plan = make_plan(cfg);
  auto params = init_params<double>(plan, 21);
  std::mt19937_64 rng(22);
  std::uniform_real_distribution<double> bias(-0.2, 0.2);
  for (std::size_t k = 0; k < plan.layers.size(); ++k) {
    const auto& l = plan.layers[k];
    auto& w = params.values[2 * k];
    auto& bvec = params.values[2 * k + 1];
    if (l.block == "lidar") {
      w.fill(0.0);
      continue;
    }
    ASSERT_EQ(l.pad.left, l.pad.right) << l.name;
    const Tensor<double> orig = w;
    const Shape4 s = w.shape();
    for (int a = 0; a < s.n; ++a)
      for (int c = 0; c < s.c; ++c) {
        const int po = l.kind == LayerKind::conv ? l.out_parity[a] : l.out_parity[c];
        const int pi = l.kind == LayerKind::conv ? l.in_parity[c] : l.in_parity[a];
        for (int y = 0; y < s.h; ++y)
          for (int x = 0; x < s.w; ++x) w(a, c, y, x) = 0.5 * (orig(a, c, y, x) + po * pi * orig(a, c, y, s.w - 1 - x));
      }
    for (int o = 0; o < l.out_ch; ++o) bvec(0, o, 0, 0) = l.out_parity[o] > 0 ? bias(rng) : 0.0;
  }

  std::mt19937_64 data(23);
  const auto a = random_range_image(cfg.spec.rows, cfg.spec.cols, data);
  const auto b = random_range_image(cfg.spec.rows, cfg.spec.cols, data);
  Graph<double> g1, g2;
  const auto out = full_forward(g1, plan, params, make_input<double>(cfg, a, b));
  const auto mir = full_forward(g2, plan, params, make_input<double>(cfg, mirror_columns(a), mirror_columns(b)));
  double worst = 0.0, scale = 0.0;
  const auto s1 = out.sites(), s2 = mir.sites();
  for (std::size_t i = 5; i < 12; ++i) {
    const auto& p = s1[i].value();
    const auto& q = s2[i].value();
    const Shape4 s = p.shape();
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        worst = std::max(worst, std::abs(p(0, 0, y, x) + q(0, 0, y, s.w - 1 - x)));
        worst = std::max(worst, std::abs(p(0, 1, y, x) - q(0, 1, y, s.w - 1 - x)));
        scale = std::max(scale, std::abs(p(0, 0, y, x)));
      }
  }
  EXPECT_GT(scale, 1e-3);
  EXPECT_LT(worst, 1e-9 * std::max(1.0, scale));
}
