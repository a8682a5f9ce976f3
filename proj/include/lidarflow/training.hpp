#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "lidarflow/autodiff.hpp"
#include "lidarflow/error.hpp"
#include "lidarflow/flow.hpp"
#include "lidarflow/lidar.hpp"
#include "lidarflow/network.hpp"
#include "lidarflow/ops.hpp"
#include "lidarflow/optim.hpp"
#include "lidarflow/parallel.hpp"

namespace lidarflow {

inline constexpr int kSiteCount = 12;

struct TrainConfig {
  std::int64_t total_iters = 400000;
  int batch_size = 10;
  double lr0 = 1e-3;
  std::int64_t lr_hold = 150000;
  std::int64_t lr_half_every = 60000;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double flip_prob = 0.5;
  std::array<double, kSiteCount> lambda = [] {
    std::array<double, kSiteCount> a{};
    a.fill(1.0);
    return a;
  }();
  std::uint64_t seed = 0;
  double grad_clip = 0.0;  // global L2 norm cap; 0 disables
  int threads = 0;         // 0 means thread_budget()

  void validate() const {
    if (total_iters < 0) throw ConfigError("total_iters must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(lr0 > 0.0)) throw ConfigError("lr0 must be positive");
    if (lr_hold < 0 || lr_half_every < 1) throw ConfigError("lr_hold must be >= 0 and lr_half_every >= 1");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("Adam eps must be positive");
    if (!(flip_prob >= 0.0 && flip_prob <= 1.0)) throw ConfigError("flip_prob must lie in [0, 1]");
    for (double l : lambda)
      if (!(l >= 0.0) || !std::isfinite(l)) throw ConfigError("loss weights must be finite and non-negative");
    if (!(grad_clip >= 0.0)) throw ConfigError("grad_clip must be >= 0");
    if (threads < 0) throw ConfigError("threads must be >= 0");
  }
};

/// Learning rate: lr0 until lr_hold, then halved at lr_hold and every
/// lr_half_every iterations after it.
inline double lr_at(std::int64_t iter, const TrainConfig& cfg) {
  if (iter < 0) throw ConfigError("lr_at: iteration must be >= 0");
  if (iter < cfg.lr_hold) return cfg.lr0;
  const std::int64_t halvings = 1 + (iter - cfg.lr_hold) / cfg.lr_half_every;
  return std::ldexp(cfg.lr0, -static_cast<int>(std::min<std::int64_t>(halvings, 2000)));
}

/// One training pair with its ground truth. `targets` holds the 12 site
/// targets in loss order; `fg` and `noc` are optional H x W evaluation masks.
struct TrainSample {
  std::string id;
  RangeImage xt, xt1;
  FlowField gt_dense;
  SparseLidarFlow gt_lidar;
  std::vector<FlowField> targets;
  std::vector<std::uint8_t> fg, noc;
};

namespace detail {

inline FlowField pool_flow(const FlowField& f) {
  const Mask valid = validity_mask(f);
  auto [t, m] = avg_pool2x(to_tensor<double>(f), f.has_mask() ? &valid : nullptr);
  FlowField out = from_tensor(t);
  if (f.has_mask()) out.valid = m.bits;
  return out;
}

inline std::vector<std::uint8_t> mirror_mask(const std::vector<std::uint8_t>& m, int h, int w) {
  if (m.empty()) return m;
  std::vector<std::uint8_t> out(m.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      out[static_cast<std::size_t>(y) * w + x] = m[static_cast<std::size_t>(y) * w + (w - 1 - x)];
  return out;
}

}  // namespace detail

/// Site targets for `plan`: the lidar sites average valid cells of gt_lidar
/// (sparse-aware pooling, applied repeatedly from N x M, in network column
/// order), the image sites average gt_dense the same way.
inline std::vector<FlowField> build_targets(const TrainSample& s, const NetworkPlan& plan) {
  const auto& spec = plan.config.spec;
  if (s.gt_lidar.height != spec.rows || s.gt_lidar.width != spec.cols) {
    throw ShapeError("gt_lidar must be " + std::to_string(spec.rows) + "x" + std::to_string(spec.cols));
  }
  if (s.gt_dense.height != spec.height || s.gt_dense.width != spec.width) {
    throw ShapeError("gt_dense must be " + std::to_string(spec.height) + "x" + std::to_string(spec.width));
  }
  auto down_to = [](std::vector<FlowField>& chain, int h, int w) -> const FlowField& {
    for (const auto& f : chain)
      if (f.height == h && f.width == w) return f;
    while (chain.back().height > h) chain.push_back(detail::pool_flow(chain.back()));
    if (chain.back().height != h || chain.back().width != w) {
      throw GeometryError("no pooled ground truth at " + std::to_string(h) + "x" + std::to_string(w));
    }
    return chain.back();
  };
  std::vector<FlowField> lidar{to_network_columns(s.gt_lidar)}, dense{s.gt_dense};
  std::vector<FlowField> out;
  for (const auto& site : plan.sites) {
    auto& chain = site.block == "lidar" ? lidar : dense;
    FlowField t = down_to(chain, site.h, site.w);
    t.ensure_mask();
    out.push_back(std::move(t));
  }
  if (out.size() != kSiteCount) throw ShapeError("plan has " + std::to_string(out.size()) + " sites, expected 12");
  return out;
}

/// Mirror every image, flow and mask column-wise and negate u.
inline TrainSample flip_sample(const TrainSample& s) {
  TrainSample out = s;
  out.xt = mirror_columns(s.xt);
  out.xt1 = mirror_columns(s.xt1);
  out.gt_dense = mirror_columns(s.gt_dense);
  out.gt_lidar = mirror_columns(s.gt_lidar);
  for (auto& t : out.targets) t = mirror_columns(t);
  out.fg = detail::mirror_mask(s.fg, s.gt_dense.height, s.gt_dense.width);
  out.noc = detail::mirror_mask(s.noc, s.gt_dense.height, s.gt_dense.width);
  return out;
}

/// Flip with probability `flip_prob`, consuming exactly one draw from `rng`.
inline TrainSample augment_flip(const TrainSample& s, std::mt19937_64& rng, double flip_prob) {
  const double draw = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  return draw < flip_prob ? flip_sample(s) : s;
}

template <typename T>
struct LossTerms {
  Var<T> total;
  std::array<double, kSiteCount> site{};  // unweighted per-site EPE; 0 when skipped
  std::array<bool, kSiteCount> present{};
};

/// Weighted sum of masked EPE over the 12 sites; sites whose target mask is
/// empty are skipped. A sample with no valid target anywhere is an error.
template <typename T>
LossTerms<T> total_loss(const std::vector<Var<T>>& preds, const std::vector<FlowField>& targets,
                        const std::array<double, kSiteCount>& lambda) {
  if (preds.size() != kSiteCount || targets.size() != kSiteCount) {
    throw ShapeError("total_loss: expected 12 predictions and 12 targets");
  }
  LossTerms<T> out;
  for (int k = 0; k < kSiteCount; ++k) {
    const auto& t = targets[static_cast<std::size_t>(k)];
    const Mask mask = validity_mask(t);
    if (mask.count() == 0) continue;
    Var<T> term;
    try {
      term = masked_epe_loss(preds[static_cast<std::size_t>(k)], to_tensor<T>(t), mask);
    } catch (const NumericalError& e) {
      throw NumericalError("loss term " + std::to_string(k + 1) + ": " + e.what());
    }
    const double value = static_cast<double>(term.value()[0]);
    if (!std::isfinite(value)) throw NumericalError("loss term " + std::to_string(k + 1) + " is not finite");
    out.site[static_cast<std::size_t>(k)] = value;
    out.present[static_cast<std::size_t>(k)] = true;
    Var<T> weighted = scale(term, static_cast<T>(lambda[static_cast<std::size_t>(k)]));
    out.total = out.total.valid() ? add(out.total, weighted) : weighted;
  }
  if (!out.total.valid()) throw EmptyMaskError("degenerate sample: no valid ground truth at any prediction site");
  return out;
}

struct LossRecord {
  std::int64_t iter = 0;
  double lr = 0.0;
  std::array<double, kSiteCount> site{};  // batch mean per site
  double total = 0.0;
};

inline void write_loss_csv_header(std::ostream& os) {
  os << "iter,lr";
  for (int k = 1; k <= kSiteCount; ++k) os << ",loss" << k;
  os << ",total\n";
}

inline void write_loss_csv_row(std::ostream& os, const LossRecord& r) {
  const auto flags = os.flags();
  const auto prec = os.precision(17);
  os << r.iter << ',' << r.lr;
  for (double v : r.site) os << ',' << v;
  os << ',' << r.total << '\n';
  os.precision(prec);
  os.flags(flags);
}

template <typename T>
struct TrainState {
  NetworkParams<T> params;
  std::vector<AdamState<T>> adam;
  std::int64_t iter = 0;

  static TrainState fresh(NetworkParams<T> p) {
    TrainState s;
    s.params = std::move(p);
    for (const auto& v : s.params.values) s.adam.emplace_back(v.shape());
    return s;
  }
};

/// Dataset indices of batch `iter`. Sample positions run through a fresh
/// seeded permutation per epoch, so the order depends only on (seed, iter).
inline std::vector<std::size_t> batch_indices(std::uint64_t seed, std::int64_t iter, int batch_size,
                                              std::size_t dataset_size) {
  std::vector<std::size_t> out;
  std::int64_t cached_epoch = -1;
  std::vector<std::size_t> perm(dataset_size);
  for (int b = 0; b < batch_size; ++b) {
    const auto pos = static_cast<std::uint64_t>(iter) * static_cast<std::uint64_t>(batch_size) + b;
    const auto epoch = static_cast<std::int64_t>(pos / dataset_size);
    if (epoch != cached_epoch) {
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0x5348u,
                        static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32)};
      std::mt19937_64 rng(seq);
      std::shuffle(perm.begin(), perm.end(), rng);
      cached_epoch = epoch;
    }
    out.push_back(perm[pos % dataset_size]);
  }
  return out;
}

/// Augmentation stream for slot `slot` of batch `iter`.
inline std::mt19937_64 augment_rng(std::uint64_t seed, std::int64_t iter, int slot) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0x464cu,
                    static_cast<std::uint32_t>(iter), static_cast<std::uint32_t>(iter >> 32),
                    static_cast<std::uint32_t>(slot)};
  return std::mt19937_64(seq);
}

template <typename T>
struct SampleGradient {
  std::vector<Tensor<T>> grads;
  std::array<double, kSiteCount> site{};
  double total = 0.0;
};

/// Forward, 12-term loss and backward for one (already augmented) sample.
template <typename T>
SampleGradient<T> sample_gradient(const NetworkPlan& plan, const NetworkParams<T>& params, const TrainSample& s,
                                  const std::array<double, kSiteCount>& lambda) {
  Graph<T> g;
  BoundParams<T> bound;
  const auto out = full_forward(g, plan, params, make_input<T>(plan.config, s.xt, s.xt1), &bound);
  const auto loss = total_loss(out.sites(), s.targets.empty() ? build_targets(s, plan) : s.targets, lambda);
  g.backward(loss.total);
  SampleGradient<T> r;
  r.site = loss.site;
  r.total = static_cast<double>(loss.total.value()[0]);
  r.grads.reserve(bound.size());
  for (std::size_t i = 0; i < bound.size(); ++i) {
    const Tensor<T>* gr = g.grad(bound[i]);
    r.grads.push_back(gr ? *gr : Tensor<T>(params.values[i].shape()));
  }
  return r;
}

/// Per-site EPE of the current parameters on an unaugmented sample.
template <typename T>
std::array<std::optional<double>, kSiteCount> site_errors(const NetworkPlan& plan, const NetworkParams<T>& params,
                                                          const TrainSample& s) {
  Graph<T> g;
  BoundParams<T> bound;
  for (const auto& v : params.values) bound.push_back(g.input(v));
  const auto out = Forward<T>(plan, bound).full(make_input<T>(plan.config, s.xt, s.xt1));
  const auto targets = s.targets.empty() ? build_targets(s, plan) : s.targets;
  std::array<double, kSiteCount> ones{};
  ones.fill(1.0);
  std::array<std::optional<double>, kSiteCount> r{};
  const auto sites = out.sites();
  for (int k = 0; k < kSiteCount; ++k) {
    const Mask mask = validity_mask(targets[static_cast<std::size_t>(k)]);
    if (mask.count() == 0) continue;
    r[static_cast<std::size_t>(k)] = static_cast<double>(
        masked_epe_loss(sites[static_cast<std::size_t>(k)], to_tensor<T>(targets[static_cast<std::size_t>(k)]), mask)
            .value()[0]);
  }
  return r;
}

/// Runs cfg.total_iters - state.iter iterations. Each iteration draws a
/// batch, flips each sample independently, averages per-sample gradients in
/// batch order and takes one Adam step at lr_at(iter). `on_step` sees the
/// record of the losses measured before the update and the updated state.
template <typename T>
std::vector<LossRecord> train(const NetworkPlan& plan, const std::vector<TrainSample>& data, const TrainConfig& cfg,
                              TrainState<T>& state,
                              const std::function<void(const LossRecord&, const TrainState<T>&)>& on_step = {}) {
  cfg.validate();
  if (data.empty()) throw ConfigError("train: dataset is empty");
  if (state.params.size() != 2 * plan.layers.size() || state.adam.size() != state.params.size()) {
    throw ShapeError("train: state does not match the layer plan");
  }
  const int threads = cfg.threads > 0 ? cfg.threads : thread_budget();
  std::vector<LossRecord> trace;
  while (state.iter < cfg.total_iters) {
    const std::int64_t iter = state.iter;
    const auto picks = batch_indices(cfg.seed, iter, cfg.batch_size, data.size());
    std::vector<SampleGradient<T>> results(picks.size());
    try {
      parallel_for(static_cast<int>(picks.size()), threads, [&](int b) {
        auto rng = augment_rng(cfg.seed, iter, b);
        const TrainSample s = augment_flip(data[picks[static_cast<std::size_t>(b)]], rng, cfg.flip_prob);
        results[static_cast<std::size_t>(b)] = sample_gradient(plan, state.params, s, cfg.lambda);
      });
    } catch (const NumericalError& e) {
      throw NumericalError("iteration " + std::to_string(iter) + ": " + e.what());
    }

    const T inv_b = T{1} / static_cast<T>(picks.size());
    std::vector<Tensor<T>> grads = std::move(results[0].grads);
    for (std::size_t b = 1; b < results.size(); ++b) {
      for (std::size_t i = 0; i < grads.size(); ++i) {
        auto& acc = grads[i];
        const auto& gi = results[b].grads[i];
        for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += gi[j];
      }
    }
    double sq = 0.0;
    for (std::size_t i = 0; i < grads.size(); ++i) {
      for (T& v : grads[i].data()) {
        v *= inv_b;
        sq += static_cast<double>(v) * static_cast<double>(v);
      }
      if (!grads[i].all_finite()) {
        throw NumericalError("iteration " + std::to_string(iter) + ": non-finite gradient in " + state.params.names[i]);
      }
    }
    if (cfg.grad_clip > 0.0 && std::sqrt(sq) > cfg.grad_clip) {
      const auto f = static_cast<T>(cfg.grad_clip / std::sqrt(sq));
      for (auto& gr : grads)
        for (T& v : gr.data()) v *= f;
    }

    LossRecord rec;
    rec.iter = iter;
    rec.lr = lr_at(iter, cfg);
    for (const auto& r : results) {
      for (int k = 0; k < kSiteCount; ++k) rec.site[static_cast<std::size_t>(k)] += r.site[static_cast<std::size_t>(k)];
      rec.total += r.total;
    }
    for (double& v : rec.site) v /= static_cast<double>(results.size());
    rec.total /= static_cast<double>(results.size());

    const AdamHyper hyper{rec.lr, cfg.beta1, cfg.beta2, cfg.eps};
    for (std::size_t i = 0; i < grads.size(); ++i) adam_step(state.params.values[i], grads[i], state.adam[i], hyper);
    trace.push_back(rec);
    ++state.iter;
    if (on_step) on_step(rec, state);
  }
  return trace;
}

}  // namespace lidarflow
