#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>
#include <set>
#include <sstream>

#include "lidarflow/synth.hpp"
#include "lidarflow/training.hpp"

using namespace lidarflow;

namespace {

NetworkConfig tiny() {
  NetworkConfig c = NetworkConfig::desk();
  c.base_channels = 2;
  c.input_scale = {1.0 / 40.0, 1.0};
  return c;
}

TrainSample synthetic(std::uint64_t seed, const NetworkPlan& plan) {
  SceneConfig sc;
  sc.spec = plan.config.spec;
  sc.seed = seed;
  auto s = generate_sample(sc);
  s.targets = build_targets(s, plan);
  return s;
}

TrainConfig short_run(std::int64_t iters) {
  TrainConfig c;
  c.total_iters = iters;
  c.batch_size = 2;
  c.seed = 99;
  c.threads = 1;
  return c;
}

/// Masked EPE of two random fields, computed through the graph op.
double graph_epe(const FlowField& pred, const FlowField& gt) {
  Graph<double> g;
  return masked_epe_loss(g.input(to_tensor<double>(pred)), to_tensor<double>(gt), validity_mask(gt)).value()[0];
}

FlowField random_field(int h, int w, std::mt19937_64& rng, bool holes) {
  std::uniform_real_distribution<double> d(-20.0, 20.0), u(0.0, 1.0);
  FlowField f(h, w, true);
  for (std::size_t i = 0; i < f.size(); ++i) {
    f.u[i] = static_cast<float>(d(rng));
    f.v[i] = static_cast<float>(d(rng));
    if (holes && u(rng) < 0.3) f.valid[i] = 0;
  }
  f.valid[0] = 1;
  return f;
}

}  // namespace

TEST(LrSchedule, PaperBreakpoints) {
  const TrainConfig c;
  EXPECT_EQ(lr_at(0, c), 1e-3);
  EXPECT_EQ(lr_at(149999, c), 1e-3);
  EXPECT_EQ(lr_at(150000, c), 5e-4);
  EXPECT_EQ(lr_at(209999, c), 5e-4);
  EXPECT_EQ(lr_at(210000, c), 2.5e-4);
  EXPECT_EQ(lr_at(270000, c), 1.25e-4);
  EXPECT_THROW(lr_at(-1, c), ConfigError);
}

TEST(LrSchedule, ChangesOnlyAtBreakpoints) {
  TrainConfig c;
  c.lr_hold = 7;
  c.lr_half_every = 5;
  std::set<std::int64_t> breaks;
  for (std::int64_t k = 0; k < 10; ++k) breaks.insert(c.lr_hold + k * c.lr_half_every);
  for (std::int64_t i = 1; i < 50; ++i) {
    const double prev = lr_at(i - 1, c), cur = lr_at(i, c);
    EXPECT_LE(cur, prev);
    if (breaks.count(i)) {
      EXPECT_EQ(cur, prev / 2) << i;
    } else {
      EXPECT_EQ(cur, prev) << i;
    }
  }
}

TEST(Flip, ForcedFlipMirrorsAndNegates) {
  const auto plan = make_plan(tiny());
  auto s = synthetic(1, plan);
  s.gt_dense.u[s.gt_dense.index(3, 5)] = 3.0f;
  const auto f = flip_sample(s);
  EXPECT_EQ(f.gt_dense.u[f.gt_dense.index(3, s.gt_dense.width - 1 - 5)], -3.0f);
  EXPECT_EQ(f.xt.range[f.xt.index(2, 0)], s.xt.range[s.xt.index(2, s.xt.cols - 1)]);
  EXPECT_EQ(f.fg[static_cast<std::size_t>(s.gt_dense.width - 1)], s.fg[0]);
  for (std::size_t k = 0; k < s.targets.size(); ++k) EXPECT_EQ(f.targets[k], mirror_columns(s.targets[k]));
}

TEST(Flip, DoubleFlipIsIdentity) {
  const auto plan = make_plan(tiny());
  const auto s = synthetic(2, plan);
  const auto back = flip_sample(flip_sample(s));
  EXPECT_EQ(back.xt, s.xt);
  EXPECT_EQ(back.xt1, s.xt1);
  EXPECT_EQ(back.gt_dense, s.gt_dense);
  EXPECT_EQ(back.gt_lidar, s.gt_lidar);
  EXPECT_EQ(back.targets, s.targets);
  EXPECT_EQ(back.fg, s.fg);
  EXPECT_EQ(back.noc, s.noc);
}

TEST(Flip, ProbabilityZeroIsBitIdenticalAndOneAlwaysFlips) {
  const auto plan = make_plan(tiny());
  const auto s = synthetic(3, plan);
  std::mt19937_64 rng(5);
  for (int i = 0; i < 5; ++i) {
    EXPECT_EQ(augment_flip(s, rng, 0.0).gt_dense, s.gt_dense);
    EXPECT_EQ(augment_flip(s, rng, 1.0).gt_dense, mirror_columns(s.gt_dense));
  }
}

TEST(Flip, PooledTargetsCommuteWithFlip) {
  const auto plan = make_plan(tiny());
  const auto s = synthetic(4, plan);
  auto flipped = flip_sample(s);
  flipped.targets.clear();
  const auto rebuilt = build_targets(flipped, plan);
  const auto mirrored = flip_sample(s).targets;
  for (std::size_t k = 0; k < rebuilt.size(); ++k) {
    ASSERT_EQ(rebuilt[k].valid, mirrored[k].valid) << k;
    for (std::size_t i = 0; i < rebuilt[k].size(); ++i) {
      EXPECT_NEAR(rebuilt[k].u[i], mirrored[k].u[i], 1e-4);
      EXPECT_NEAR(rebuilt[k].v[i], mirrored[k].v[i], 1e-4);
    }
  }
}

TEST(Flip, MaskedEpeInvariantUnderMirrorAndNegate) {
  std::mt19937_64 rng(6);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto pred = random_field(9, 14, rng, false);
    const auto gt = random_field(9, 14, rng, true);
    worst = std::max(worst, std::abs(graph_epe(pred, gt) - graph_epe(mirror_columns(pred), mirror_columns(gt))));
  }
  EXPECT_LT(worst, 1e-12);
}

TEST(Targets, ShapesMatchSites) {
  const auto plan = make_plan(tiny());
  const auto s = synthetic(5, plan);
  ASSERT_EQ(s.targets.size(), 12u);
  for (std::size_t k = 0; k < 12; ++k) {
    EXPECT_EQ(s.targets[k].height, plan.sites[k].h);
    EXPECT_EQ(s.targets[k].width, plan.sites[k].w);
  }
}

TEST(Targets, SparsePoolingMatchesBlockMeanOfValidCells) {
  const auto plan = make_plan(tiny());
  auto s = synthetic(6, plan);
  std::mt19937_64 rng(7);
  s.gt_lidar = random_field(plan.config.spec.rows, plan.config.spec.cols, rng, true);
  const auto t = build_targets(s, plan)[4];  // finest lidar site, N/2 x M/2
  const auto net = to_network_columns(s.gt_lidar);
  for (int y = 0; y < t.height; ++y) {
    for (int x = 0; x < t.width; ++x) {
      double su = 0, sv = 0;
      int n = 0;
      for (int dy = 0; dy < 2; ++dy) {
        for (int dx = 0; dx < 2; ++dx) {
          if (!net.is_valid(2 * y + dy, 2 * x + dx)) continue;
          su += net.u[net.index(2 * y + dy, 2 * x + dx)];
          sv += net.v[net.index(2 * y + dy, 2 * x + dx)];
          ++n;
        }
      }
      ASSERT_EQ(t.is_valid(y, x), n > 0);
      if (n == 0) continue;
      EXPECT_NEAR(t.u[t.index(y, x)], su / n, 1e-5);
      EXPECT_NEAR(t.v[t.index(y, x)], sv / n, 1e-5);
    }
  }
}

TEST(Targets, DensePyramidOfConstantFieldIsConstant) {
  const auto plan = make_plan(tiny());
  auto s = synthetic(8, plan);
  for (auto& u : s.gt_dense.u) u = 2.5f;
  for (auto& v : s.gt_dense.v) v = -1.0f;
  const auto t = build_targets(s, plan);
  for (std::size_t k = 5; k < 12; ++k) {
    for (std::size_t i = 0; i < t[k].size(); ++i) {
      EXPECT_EQ(t[k].u[i], 2.5f);
      EXPECT_EQ(t[k].v[i], -1.0f);
    }
  }
}

namespace {

/// Predictions equal to the targets, as graph inputs.
std::vector<Var<double>> exact_preds(Graph<double>& g, const std::vector<FlowField>& targets) {
  std::vector<Var<double>> p;
  for (const auto& t : targets) p.push_back(g.input(to_tensor<double>(t)));
  return p;
}

}  // namespace

TEST(TotalLoss, ZeroWhenPredictionsMatch) {
  const auto plan = make_plan(tiny());
  const auto s = synthetic(9, plan);
  Graph<double> g;
  const auto l = total_loss(exact_preds(g, s.targets), s.targets, TrainConfig{}.lambda);
  EXPECT_EQ(l.total.value()[0], 0.0);
}

TEST(TotalLoss, SingleSiteErrorIsWeighted) {
  const auto plan = make_plan(tiny());
  const auto s = synthetic(10, plan);
  Graph<double> g;
  auto preds = exact_preds(g, s.targets);
  auto shifted = to_tensor<double>(s.targets[6]);
  for (int y = 0; y < shifted.shape().h; ++y)
    for (int x = 0; x < shifted.shape().w; ++x) {
      shifted(0, 0, y, x) += 3.0;
      shifted(0, 1, y, x) += 4.0;
    }
  preds[6] = g.input(shifted);
  auto lambda = TrainConfig{}.lambda;
  lambda[6] = 0.5;
  const auto l = total_loss(preds, s.targets, lambda);
  EXPECT_NEAR(l.total.value()[0], 2.5, 1e-12);
  EXPECT_NEAR(l.site[6], 5.0, 1e-12);
}

TEST(TotalLoss, EqualsIndependentPerSiteSum) {
  const auto plan = make_plan(tiny());
  const auto s = synthetic(11, plan);
  std::mt19937_64 rng(12);
  Graph<double> g;
  std::vector<Var<double>> preds;
  std::vector<FlowField> pred_fields;
  for (const auto& t : s.targets) {
    pred_fields.push_back(random_field(t.height, t.width, rng, false));
    preds.push_back(g.input(to_tensor<double>(pred_fields.back())));
  }
  std::array<double, 12> lambda{};
  double expected = 0.0;
  for (std::size_t k = 0; k < 12; ++k) {
    lambda[k] = 0.25 * static_cast<double>(k + 1);
    const auto& t = s.targets[k];
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (!t.is_valid(i)) continue;
      sum += std::hypot(double(pred_fields[k].u[i]) - t.u[i], double(pred_fields[k].v[i]) - t.v[i]);
      ++n;
    }
    if (n) expected += lambda[k] * sum / static_cast<double>(n);
  }
  EXPECT_NEAR(total_loss(preds, s.targets, lambda).total.value()[0], expected, 1e-9 * expected);
}

TEST(TotalLoss, EmptySitesSkippedAndAllEmptyRejected) {
  const auto plan = make_plan(tiny());
  auto s = synthetic(13, plan);
  Graph<double> g;
  auto targets = s.targets;
  std::fill(targets[0].valid.begin(), targets[0].valid.end(), 0);
  const auto l = total_loss(exact_preds(g, s.targets), targets, TrainConfig{}.lambda);
  EXPECT_FALSE(l.present[0]);
  EXPECT_TRUE(l.present[1]);
  for (auto& t : targets) std::fill(t.valid.begin(), t.valid.end(), 0);
  EXPECT_THROW(total_loss(exact_preds(g, s.targets), targets, TrainConfig{}.lambda), EmptyMaskError);
}

TEST(Batches, EachEpochVisitsEverySampleOnce) {
  for (std::int64_t epoch = 0; epoch < 4; ++epoch) {
    std::multiset<std::size_t> seen;
    for (std::int64_t it = 0; it < 3; ++it) {
      for (auto i : batch_indices(17, epoch * 3 + it, 4, 12)) seen.insert(i);
    }
    for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(seen.count(i), 1u) << "epoch " << epoch;
  }
  EXPECT_EQ(batch_indices(17, 5, 4, 12), batch_indices(17, 5, 4, 12));
  EXPECT_NE(batch_indices(17, 0, 12, 12), batch_indices(18, 0, 12, 12));
}

TEST(Train, ZeroIterationsLeavesParametersUnchanged) {
  const auto plan = make_plan(tiny());
  const std::vector<TrainSample> data{synthetic(20, plan)};
  const auto init = init_params<float>(plan, 1);
  auto state = TrainState<float>::fresh(init);
  const auto trace = train(plan, data, short_run(0), state);
  EXPECT_TRUE(trace.empty());
  EXPECT_EQ(state.params, init);
}

TEST(Train, IdenticalRunsGiveIdenticalTracesAcrossThreadCounts) {
  const auto plan = make_plan(tiny());
  const std::vector<TrainSample> data{synthetic(21, plan), synthetic(22, plan), synthetic(23, plan)};
  auto a = TrainState<float>::fresh(init_params<float>(plan, 2));
  auto b = a;
  auto cfg = short_run(4);
  const auto ta = train(plan, data, cfg, a);
  cfg.threads = 2;
  const auto tb = train(plan, data, cfg, b);
  ASSERT_EQ(ta.size(), 4u);
  for (std::size_t i = 0; i < ta.size(); ++i) {
    EXPECT_EQ(ta[i].total, tb[i].total);
    EXPECT_EQ(ta[i].site, tb[i].site);
    EXPECT_TRUE(std::isfinite(ta[i].total));
  }
  EXPECT_EQ(a.params, b.params);
  EXPECT_EQ(a.iter, 4);
}

TEST(Train, ResumingMatchesAnUninterruptedRun) {
  const auto plan = make_plan(tiny());
  const std::vector<TrainSample> data{synthetic(24, plan), synthetic(25, plan)};
  auto full = TrainState<float>::fresh(init_params<float>(plan, 3));
  auto split = full;
  train(plan, data, short_run(4), full);
  train(plan, data, short_run(2), split);
  const auto rest = train(plan, data, short_run(4), split);
  EXPECT_EQ(rest.front().iter, 2);
  EXPECT_EQ(full.params, split.params);
}

TEST(Train, LossDecreasesOnASinglePair) {
  const auto plan = make_plan(tiny());
  const std::vector<TrainSample> data{synthetic(26, plan)};
  auto state = TrainState<float>::fresh(init_params<float>(plan, 4));
  auto cfg = short_run(40);
  cfg.batch_size = 1;
  cfg.flip_prob = 0.0;
  const auto trace = train(plan, data, cfg, state);
  EXPECT_LT(trace.back().total, 0.8 * trace.front().total);
}

TEST(Train, NonFiniteLossReportsIteration) {
  const auto plan = make_plan(tiny());
  const std::vector<TrainSample> data{synthetic(27, plan)};
  auto state = TrainState<float>::fresh(init_params<float>(plan, 5));
  for (auto& v : state.params["lidar.conv1.weight"].data()) v = std::numeric_limits<float>::max();
  try {
    train(plan, data, short_run(1), state);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("iteration 0"), std::string::npos) << e.what();
  }
}

TEST(Train, CsvHasFifteenColumns) {
  std::ostringstream os;
  write_loss_csv_header(os);
  LossRecord r;
  r.iter = 3;
  r.lr = 1e-3;
  write_loss_csv_row(os, r);
  std::istringstream is(os.str());
  std::string header, row;
  std::getline(is, header);
  std::getline(is, row);
  EXPECT_EQ(std::count(header.begin(), header.end(), ','), 14);
  EXPECT_EQ(std::count(row.begin(), row.end(), ','), 14);
  EXPECT_EQ(header.substr(0, 13), "iter,lr,loss1");
}

TEST(Train, RejectsEmptyDatasetAndBadConfig) {
  const auto plan = make_plan(tiny());
  auto state = TrainState<float>::fresh(init_params<float>(plan, 6));
  EXPECT_THROW(train(plan, {}, short_run(1), state), ConfigError);
  auto cfg = short_run(1);
  cfg.batch_size = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = short_run(1);
  cfg.flip_prob = 1.5;
  EXPECT_THROW(cfg.validate(), ConfigError);
}
