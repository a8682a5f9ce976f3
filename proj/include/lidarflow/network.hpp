#pragma once

#include <array>
#include <cstdint>
#include <cstdlib>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "lidarflow/autodiff.hpp"
#include "lidarflow/error.hpp"
#include "lidarflow/lidar.hpp"
#include "lidarflow/ops.hpp"
#include "lidarflow/optim.hpp"
#include "lidarflow/tensor.hpp"

namespace lidarflow {

/// Every architectural dimension of the three-block network.
struct NetworkConfig {
  GridSpec spec = GridSpec::paper();
  int base_channels = 64;
  int contraction_levels = 5;
  int dt_stages = 3;
  int dt_upscale_stages = 2;
  int refine_iters = 5;
  std::array<int, 2> narrow_kernel{3, 5};
  int narrow_layers = 5;
  int wide_kernel_height = 3;
  int wide_kernel_width = 25;
  int refine_convs_per_iter = 2;
  double leaky_slope = kDefaultLeakySlope;
  // Affine map applied to valid input cells, per channel (range, reflectivity).
  std::array<double, 2> input_scale{1.0, 1.0};
  std::array<double, 2> input_shift{0.0, 0.0};

  static NetworkConfig paper() { return NetworkConfig{}; }
  static NetworkConfig desk() {
    NetworkConfig c;
    c.spec = GridSpec::desk();
    c.base_channels = 16;
    return c;
  }

  void validate() const {
    spec.validate();
    if (base_channels < 1) throw ConfigError("base_channels must be >= 1");
    if (contraction_levels != 5) throw ConfigError("the lidar block is built with exactly 5 contraction levels");
    if (dt_stages < 1 || dt_upscale_stages < 1 || refine_iters < 1 || refine_convs_per_iter < 1 || narrow_layers < 1) {
      throw ConfigError("stage and iteration counts must be >= 1");
    }
    if (dt_upscale_stages != 2) {
      throw ConfigError("sub-block B must have 2 upscaling stages to reach (H/2, W/2) from (H/8, W/8)");
    }
    if (narrow_kernel[0] < 1 || narrow_kernel[1] < 1 || wide_kernel_height < 1 || wide_kernel_width < 1) {
      throw ConfigError("kernel sizes must be positive");
    }
    if (!(leaky_slope > 0.0 && leaky_slope < 1.0)) throw ConfigError("leaky slope must lie in (0, 1)");
  }

  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

/// `stages` integer targets from w_in (exclusive) to w_out (inclusive) on a
/// straight line, rounding half away from zero.
inline std::vector<int> width_schedule(int w_in, int w_out, int stages) {
  if (stages < 1) throw ConfigError("width_schedule: stages must be >= 1");
  std::vector<int> out;
  const long long delta = static_cast<long long>(w_out) - w_in;
  for (int k = 1; k <= stages; ++k) {
    const long long num = delta * k;
    const long long mag = (2 * std::llabs(num) + stages) / (2LL * stages);
    out.push_back(static_cast<int>(w_in + (num < 0 ? -mag : mag)));
  }
  return out;
}

enum class LayerKind { conv, deconv };

/// Geometry and wiring of one parametrised layer, fixed at construction.
struct LayerSpec {
  std::string name;   // "<block>.<layer>"
  std::string block;  // lidar, up or end
  LayerKind kind = LayerKind::conv;
  int in_ch = 0, out_ch = 0;
  int kh = 0, kw = 0;
  Stride stride;
  Pad pad;
  bool activation = false;
  int in_h = 0, in_w = 0, out_h = 0, out_w = 0;
  // Horizontal-mirror parity per channel: -1 for a u flow component, +1 otherwise.
  std::vector<int> in_parity, out_parity;

  [[nodiscard]] Shape4 weight_shape() const {
    return kind == LayerKind::conv ? Shape4{out_ch, in_ch, kh, kw} : Shape4{in_ch, out_ch, kh, kw};
  }
  [[nodiscard]] Shape4 bias_shape() const { return Shape4{1, out_ch, 1, 1}; }
  [[nodiscard]] std::size_t param_count() const { return weight_shape().size() + static_cast<std::size_t>(out_ch); }
};

struct SiteSpec {
  std::string name;
  std::string block;
  int h = 0, w = 0;
};

/// The resolved layer plan: every layer's shape, and the 12 prediction sites
/// in loss order (lidar coarse to fine, upscaling, refinement).
struct NetworkPlan {
  NetworkConfig config;
  std::vector<LayerSpec> layers;
  std::vector<SiteSpec> sites;
  std::vector<int> dt_heights, dt_widths;  // sub-block A stage targets
  int lidar_out_h = 0, lidar_out_w = 0;
  int a_out_h = 0, a_out_w = 0, a_out_ch = 0;
  int up_out_h = 0, up_out_w = 0;
  int final_h = 0, final_w = 0;

  [[nodiscard]] const LayerSpec& layer(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("no layer named " + name);
    return layers[it->second];
  }
  [[nodiscard]] std::size_t layer_index(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("no layer named " + name);
    return it->second;
  }
  [[nodiscard]] std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.param_count();
    return n;
  }

  void add(LayerSpec l) {
    if (index_.count(l.name)) throw ConfigError("duplicate layer " + l.name);
    index_[l.name] = layers.size();
    layers.push_back(std::move(l));
  }

 private:
  std::map<std::string, std::size_t> index_;
};

namespace detail {

inline std::vector<int> even_parity(int n) { return std::vector<int>(static_cast<std::size_t>(n), 1); }
inline std::vector<int> flow_parity() { return {-1, 1}; }
inline std::vector<int> cat(std::vector<int> a, const std::vector<int>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

/// Splits `total` padding over `layers` layers as evenly as possible, and
/// each layer's share as evenly as possible between the two sides.
inline std::pair<int, int> spread_pad(int total, int layers, int i) {
  const int p = total / layers + (i < total % layers ? 1 : 0);
  return {p / 2, p - p / 2};
}

inline LayerSpec conv_layer(std::string name, std::string block, int in_ch, int out_ch, int in_h, int in_w, int kh,
                            int kw, Stride s, Pad p, bool act, std::vector<int> in_par, std::vector<int> out_par) {
  LayerSpec l{std::move(name), std::move(block), LayerKind::conv, in_ch, out_ch, kh, kw, s, p, act, in_h, in_w,
              0, 0, std::move(in_par), std::move(out_par)};
  l.out_h = conv_out_size(in_h, kh, s.y, p.top, p.bottom);
  l.out_w = conv_out_size(in_w, kw, s.x, p.left, p.right);
  if (l.out_h < 1) throw GeometryError(l.name + ": non-positive output height");
  if (l.out_w < 1) throw GeometryError(l.name + ": non-positive output width");
  return l;
}

/// 4x4, stride 2, pad 1: exactly doubles both axes.
inline LayerSpec up_layer(std::string name, std::string block, int in_ch, int out_ch, int in_h, int in_w,
                          std::vector<int> in_par) {
  LayerSpec l{std::move(name), std::move(block), LayerKind::deconv, in_ch, out_ch, 4, 4, Stride{2, 2},
              Pad::uniform(1), true, in_h, in_w, 2 * in_h, 2 * in_w, std::move(in_par), even_parity(out_ch)};
  return l;
}

}  // namespace detail

/// Resolve all layer shapes for `cfg`. Throws GeometryError when the
/// domain-transform schedule cannot be realised.
inline NetworkPlan make_plan(const NetworkConfig& cfg) {
  using detail::cat;
  using detail::even_parity;
  using detail::flow_parity;
  cfg.validate();
  NetworkPlan plan;
  plan.config = cfg;
  const int N = cfg.spec.rows, M = cfg.spec.cols, H = cfg.spec.height, W = cfg.spec.width;
  const int b = cfg.base_channels;

  // Lidar flow: contraction.
  const std::array<int, 5> mult{1, 2, 4, 8, 8};
  const std::array<int, 5> kernel{7, 5, 5, 3, 3};
  std::array<int, 6> ch{4, 0, 0, 0, 0, 0};
  std::array<int, 6> hh{N, 0, 0, 0, 0, 0}, ww{M, 0, 0, 0, 0, 0};
  for (int l = 1; l <= 5; ++l) {
    ch[l] = b * mult[l - 1];
    const int k = kernel[l - 1];
    auto spec = detail::conv_layer("lidar.conv" + std::to_string(l), "lidar", ch[l - 1], ch[l], hh[l - 1], ww[l - 1], k,
                                   k, Stride{2, 2}, Pad::uniform((k - 1) / 2), true, even_parity(ch[l - 1]),
                                   even_parity(ch[l]));
    hh[l] = spec.out_h;
    ww[l] = spec.out_w;
    plan.add(std::move(spec));
  }
  // Expansion: predict at 1/32, then deconv + skip + upsampled flow per level.
  auto pred = [&](const std::string& name, const std::string& block, int in_ch, int h, int w, std::vector<int> par) {
    plan.add(detail::conv_layer(name, block, in_ch, 2, h, w, 3, 3, Stride{}, Pad::uniform(1), false, std::move(par),
                                flow_parity()));
    plan.sites.push_back(SiteSpec{name, block, h, w});
  };
  pred("lidar.pred5", "lidar", ch[5], hh[5], ww[5], even_parity(ch[5]));
  int feat_ch = ch[5];
  std::vector<int> feat_par = even_parity(ch[5]);
  for (int l = 4; l >= 1; --l) {
    const int dch = std::max(1, ch[l] / 2);
    auto up = detail::up_layer("lidar.deconv" + std::to_string(l), "lidar", feat_ch, dch, hh[l + 1], ww[l + 1], feat_par);
    if (up.out_h != hh[l] || up.out_w != ww[l]) throw GeometryError(up.name + ": does not match skip resolution");
    plan.add(std::move(up));
    feat_ch = ch[l] + dch + 2;
    feat_par = cat(cat(even_parity(ch[l]), even_parity(dch)), flow_parity());
    pred("lidar.pred" + std::to_string(l), "lidar", feat_ch, hh[l], ww[l], feat_par);
  }
  plan.lidar_out_h = hh[1];
  plan.lidar_out_w = ww[1];

  // Domain transform, sub-block A.
  if (H % 8 != 0 || W % 8 != 0) throw GeometryError("image dims must be divisible by 8");
  plan.dt_heights = width_schedule(hh[1], H / 8, cfg.dt_stages);
  plan.dt_widths = width_schedule(ww[1], W / 8, cfg.dt_stages);
  int in_ch = 6, in_h = hh[1], in_w = ww[1];
  std::vector<int> in_par = cat(even_parity(4), flow_parity());
  const int kn_h = cfg.narrow_kernel[0], kn_w = cfg.narrow_kernel[1];
  for (int s = 0; s < cfg.dt_stages; ++s) {
    const int th = plan.dt_heights[s], tw = plan.dt_widths[s];
    const std::string stage = "up.a" + std::to_string(s + 1);
    const int ph = th - in_h + cfg.narrow_layers * (kn_h - 1);
    const int pw = tw - in_w + cfg.narrow_layers * (kn_w - 1);
    if (ph < 0 || pw < 0) {
      throw GeometryError(stage + ": narrow branch cannot shrink " + std::to_string(in_h) + "x" + std::to_string(in_w) +
                          " to " + std::to_string(th) + "x" + std::to_string(tw) + " without cropping");
    }
    int h = in_h, w = in_w, c = in_ch;
    std::vector<int> par = in_par;
    for (int j = 0; j < cfg.narrow_layers; ++j) {
      const auto [pt, pb] = detail::spread_pad(ph, cfg.narrow_layers, j);
      const auto [pl, pr] = detail::spread_pad(pw, cfg.narrow_layers, j);
      auto l = detail::conv_layer(stage + ".narrow" + std::to_string(j + 1), "up", c, b, h, w, kn_h, kn_w, Stride{},
                                  Pad{pt, pb, pl, pr}, true, par, even_parity(b));
      h = l.out_h;
      w = l.out_w;
      c = b;
      par = even_parity(b);
      plan.add(std::move(l));
    }
    // The wide kernel grows when the stage shrinks by more than kernel - 1.
    const int kwh = std::max(cfg.wide_kernel_height, 1 - (th - in_h));
    const int kww = std::max(cfg.wide_kernel_width, 1 - (tw - in_w));
    const int wph = th - in_h + kwh - 1, wpw = tw - in_w + kww - 1;
    auto wide = detail::conv_layer(stage + ".wide", "up", in_ch, b, in_h, in_w, kwh, kww, Stride{},
                                   Pad{wph / 2, wph - wph / 2, wpw / 2, wpw - wpw / 2}, true, in_par, even_parity(b));
    if (h != th || w != tw || wide.out_h != th || wide.out_w != tw) throw GeometryError(stage + ": schedule mismatch");
    plan.add(std::move(wide));
    in_ch = 2 * b;
    in_h = th;
    in_w = tw;
    in_par = even_parity(in_ch);
  }
  plan.a_out_h = in_h;
  plan.a_out_w = in_w;
  plan.a_out_ch = in_ch;

  // Sub-block B: deconv to base channels, then predict; the prediction is
  // concatenated onto the features fed to the next stage.
  for (int s = 0; s < cfg.dt_upscale_stages; ++s) {
    const std::string stage = "up.b" + std::to_string(s + 1);
    auto up = detail::up_layer(stage + ".deconv", "up", in_ch, b, in_h, in_w, in_par);
    in_h = up.out_h;
    in_w = up.out_w;
    plan.add(std::move(up));
    pred(stage + ".pred", "up", b, in_h, in_w, even_parity(b));
    in_ch = b + 2;
    in_par = cat(even_parity(b), flow_parity());
  }
  plan.up_out_h = in_h;
  plan.up_out_w = in_w;
  if (in_h != H / 2 || in_w != W / 2) throw GeometryError("sub-block B does not reach (H/2, W/2)");

  // Refinement: no weight sharing across iterations.
  for (int i = 0; i < cfg.refine_iters; ++i) {
    const std::string it = "end.r" + std::to_string(i + 1);
    int c = in_ch;
    std::vector<int> par = in_par;
    for (int j = 0; j < cfg.refine_convs_per_iter; ++j) {
      plan.add(detail::conv_layer(it + ".conv" + std::to_string(j + 1), "end", c, b, in_h, in_w, 3, 3, Stride{},
                                  Pad::uniform(1), true, par, even_parity(b)));
      c = b;
      par = even_parity(b);
    }
    pred(it + ".pred", "end", b, in_h, in_w, even_parity(b));
  }
  plan.final_h = 2 * in_h;
  plan.final_w = 2 * in_w;
  return plan;
}

/// Named weight/bias tensors in plan order: layer k owns entries 2k and 2k+1.
template <typename T>
struct NetworkParams {
  std::vector<std::string> names;
  std::vector<Tensor<T>> values;

  [[nodiscard]] std::size_t size() const { return values.size(); }
  [[nodiscard]] std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& v : values) n += v.size();
    return n;
  }
  [[nodiscard]] std::size_t find(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return i;
    throw ConfigError("no parameter named " + name);
  }
  Tensor<T>& operator[](const std::string& name) { return values[find(name)]; }
  const Tensor<T>& operator[](const std::string& name) const { return values[find(name)]; }

  friend bool operator==(const NetworkParams&, const NetworkParams&) = default;
};

/// Zero-filled parameters for `plan`.
template <typename T>
NetworkParams<T> zero_params(const NetworkPlan& plan) {
  NetworkParams<T> p;
  for (const auto& l : plan.layers) {
    p.names.push_back(l.name + ".weight");
    p.values.emplace_back(l.weight_shape());
    p.names.push_back(l.name + ".bias");
    p.values.emplace_back(l.bias_shape());
  }
  return p;
}

/// He-initialised weights drawn in plan order from one seeded stream; biases zero.
template <typename T>
NetworkParams<T> init_params(const NetworkPlan& plan, std::uint64_t seed) {
  auto p = zero_params<T>(plan);
  std::mt19937_64 rng(seed);
  for (std::size_t k = 0; k < plan.layers.size(); ++k) p.values[2 * k] = he_init<T>(plan.layers[k].weight_shape(), rng);
  return p;
}

/// Both lidar frames as network input tensors with their validity.
template <typename T>
struct NetworkInput {
  Tensor<T> xt, xt1;
  Mask valid_t, valid_t1;
};

/// The network reads the lidar grid in image orientation: network column j
/// holds grid column M-1-j, because the stored grid starts at the rightmost
/// ray while image columns run left to right. Convolutions cannot learn a
/// reflection, so the reversal happens here, at the boundary.
inline int network_column(int grid_col, int cols) { return cols - 1 - grid_col; }

/// Lidar-grid flow (or mask) reordered into network column order. Values
/// are image-pixel displacements and are not negated. An involution.
inline FlowField to_network_columns(const FlowField& f) {
  FlowField out = f;
  for (int y = 0; y < f.height; ++y) {
    for (int x = 0; x < f.width; ++x) {
      const auto src = f.index(y, network_column(x, f.width));
      const auto dst = f.index(y, x);
      out.u[dst] = f.u[src];
      out.v[dst] = f.v[src];
      if (f.has_mask()) out.valid[dst] = f.valid[src];
    }
  }
  return out;
}

/// Range and reflectivity of valid cells under the configured affine map, in
/// network column order; invalid cells hold 0.
template <typename T>
Tensor<T> normalized_input(const RangeImage& ri, const NetworkConfig& cfg) {
  Tensor<T> t(Shape4{1, 2, ri.rows, ri.cols});
  for (int r = 0; r < ri.rows; ++r) {
    for (int c = 0; c < ri.cols; ++c) {
      const auto i = ri.index(r, c);
      if (!ri.valid[i]) continue;
      const int j = network_column(c, ri.cols);
      t(0, 0, r, j) = static_cast<T>(ri.range[i] * cfg.input_scale[0] + cfg.input_shift[0]);
      t(0, 1, r, j) = static_cast<T>(ri.reflectivity[i] * cfg.input_scale[1] + cfg.input_shift[1]);
    }
  }
  return t;
}

inline Mask network_mask(const RangeImage& ri) {
  Mask m(1, ri.rows, ri.cols, false);
  for (int r = 0; r < ri.rows; ++r)
    for (int c = 0; c < ri.cols; ++c) m.set(0, r, network_column(c, ri.cols), ri.is_valid(r, c));
  return m;
}

template <typename T>
NetworkInput<T> make_input(const NetworkConfig& cfg, const RangeImage& xt, const RangeImage& xt1) {
  if (xt.rows != cfg.spec.rows || xt.cols != cfg.spec.cols || xt1.rows != cfg.spec.rows ||
      xt1.cols != cfg.spec.cols) {
    throw ShapeError("range images must be " + std::to_string(cfg.spec.rows) + "x" + std::to_string(cfg.spec.cols));
  }
  return NetworkInput<T>{normalized_input<T>(xt, cfg), normalized_input<T>(xt1, cfg), network_mask(xt),
                         network_mask(xt1)};
}

template <typename T>
struct LidarOutputs {
  Var<T> y_lidar;
  std::vector<Var<T>> preds;  // 1/32 ... 1/2
};

template <typename T>
struct UpOutputs {
  Var<T> y_up;
  Var<T> a_features;
  Var<T> carry;
  std::vector<Var<T>> preds;  // (H/4, W/4), (H/2, W/2)
};

template <typename T>
struct RefineOutputs {
  Var<T> y_end;
  std::vector<Var<T>> preds;
};

template <typename T>
struct ForwardOutputs {
  std::vector<Var<T>> lidar_preds;
  std::vector<Var<T>> up_preds;
  std::vector<Var<T>> refine_preds;
  Var<T> a_features;
  Var<T> final;

  /// All 12 predictions in site order.
  [[nodiscard]] std::vector<Var<T>> sites() const {
    std::vector<Var<T>> s = lidar_preds;
    s.insert(s.end(), up_preds.begin(), up_preds.end());
    s.insert(s.end(), refine_preds.begin(), refine_preds.end());
    return s;
  }
};

/// Parameters recorded as graph leaves, index-aligned with NetworkParams.
template <typename T>
using BoundParams = std::vector<Var<T>>;

template <typename T>
BoundParams<T> bind(Graph<T>& g, const NetworkParams<T>& p) {
  BoundParams<T> out;
  out.reserve(p.size());
  for (const auto& v : p.values) out.push_back(g.parameter(v));
  return out;
}

/// Runs the forward pass of the three blocks against a fixed plan.
template <typename T>
class Forward {
 public:
  Forward(const NetworkPlan& plan, const BoundParams<T>& params) : plan_(plan), params_(params) {
    if (params.size() != 2 * plan.layers.size()) throw ShapeError("parameter count does not match the layer plan");
  }

  Var<T> apply(const std::string& name, Var<T> x) const {
    const std::size_t k = plan_.layer_index(name);
    const LayerSpec& l = plan_.layers[k];
    Var<T> w = params_[2 * k], b = params_[2 * k + 1];
    Var<T> y = l.kind == LayerKind::conv ? conv2d(x, w, b, l.stride, l.pad) : deconv2d(x, w, b, l.stride, l.pad);
    if (l.activation) y = leaky_relu(y, static_cast<T>(plan_.config.leaky_slope));
    const Shape4 s = y.shape();
    if (s.c != l.out_ch || s.h != l.out_h || s.w != l.out_w) {
      throw ShapeError(name + ": produced " + to_string(s) + ", plan expects " + std::to_string(l.out_ch) + "x" +
                       std::to_string(l.out_h) + "x" + std::to_string(l.out_w));
    }
    return y;
  }

  LidarOutputs<T> lidar(Var<T> xt, Var<T> xt1) const {
    std::array<Var<T>, 6> conv;
    conv[0] = concat_channels(xt, xt1);
    for (int l = 1; l <= 5; ++l) conv[l] = apply("lidar.conv" + std::to_string(l), conv[l - 1]);
    LidarOutputs<T> out;
    Var<T> feat = conv[5];
    Var<T> pred = apply("lidar.pred5", feat);
    out.preds.push_back(pred);
    for (int l = 4; l >= 1; --l) {
      Var<T> up = apply("lidar.deconv" + std::to_string(l), feat);
      feat = concat_channels(concat_channels(conv[l], up), bilinear_upsample2x(pred));
      pred = apply("lidar.pred" + std::to_string(l), feat);
      out.preds.push_back(pred);
    }
    out.y_lidar = pred;
    return out;
  }

  UpOutputs<T> up(Var<T> xt_half, Var<T> xt1_half, Var<T> y_lidar) const {
    Var<T> x = concat_channels(concat_channels(xt_half, xt1_half), y_lidar);
    const auto& cfg = plan_.config;
    for (int s = 1; s <= cfg.dt_stages; ++s) {
      const std::string stage = "up.a" + std::to_string(s);
      Var<T> narrow = x;
      for (int j = 1; j <= cfg.narrow_layers; ++j) narrow = apply(stage + ".narrow" + std::to_string(j), narrow);
      x = concat_channels(narrow, apply(stage + ".wide", x));
    }
    UpOutputs<T> out;
    out.a_features = x;
    for (int s = 1; s <= cfg.dt_upscale_stages; ++s) {
      const std::string stage = "up.b" + std::to_string(s);
      Var<T> feat = apply(stage + ".deconv", x);
      Var<T> pred = apply(stage + ".pred", feat);
      out.preds.push_back(pred);
      out.carry = feat;
      out.y_up = pred;
      x = concat_channels(feat, pred);
    }
    return out;
  }

  RefineOutputs<T> refine(Var<T> y_up, Var<T> carry) const {
    RefineOutputs<T> out;
    Var<T> feat = carry, pred = y_up;
    const auto& cfg = plan_.config;
    for (int i = 1; i <= cfg.refine_iters; ++i) {
      const std::string it = "end.r" + std::to_string(i);
      Var<T> x = concat_channels(feat, pred);
      for (int j = 1; j <= cfg.refine_convs_per_iter; ++j) x = apply(it + ".conv" + std::to_string(j), x);
      feat = x;
      pred = apply(it + ".pred", feat);
      out.preds.push_back(pred);
    }
    out.y_end = pred;
    return out;
  }

  ForwardOutputs<T> full(const NetworkInput<T>& in) const {
    Graph<T>& g = *params_.front().graph;
    Var<T> xt = g.input(in.xt), xt1 = g.input(in.xt1);
    auto lid = lidar(xt, xt1);
    auto half_t = avg_pool2x(xt, &in.valid_t);
    auto half_t1 = avg_pool2x(xt1, &in.valid_t1);
    auto upo = up(half_t.value, half_t1.value, lid.y_lidar);
    auto ref = refine(upo.y_up, upo.carry);
    ForwardOutputs<T> out;
    out.lidar_preds = std::move(lid.preds);
    out.up_preds = std::move(upo.preds);
    out.refine_preds = std::move(ref.preds);
    out.a_features = upo.a_features;
    out.final = bilinear_upsample2x(ref.y_end);
    return out;
  }

 private:
  const NetworkPlan& plan_;
  const BoundParams<T>& params_;
};

/// Convenience: bind `params` into `g` and run the full forward pass.
template <typename T>
ForwardOutputs<T> full_forward(Graph<T>& g, const NetworkPlan& plan, const NetworkParams<T>& params,
                               const NetworkInput<T>& in, BoundParams<T>* bound_out = nullptr) {
  BoundParams<T> bound = bind(g, params);
  auto out = Forward<T>(plan, bound).full(in);
  if (bound_out) *bound_out = std::move(bound);
  return out;
}

/// Inference: the final full-resolution flow for one frame pair. Parameters
/// enter the graph as constants, so no gradient state is kept.
template <typename T>
FlowField predict_flow(const NetworkPlan& plan, const NetworkParams<T>& params, const RangeImage& xt,
                       const RangeImage& xt1) {
  Graph<T> g;
  BoundParams<T> bound;
  bound.reserve(params.size());
  for (const auto& v : params.values) bound.push_back(g.input(v));
  const auto out = Forward<T>(plan, bound).full(make_input<T>(plan.config, xt, xt1));
  return from_tensor(out.final.value());
}

}  // namespace lidarflow
