#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>

#include "lidarflow/autodiff.hpp"
#include "lidarflow/error.hpp"
#include "lidarflow/tensor.hpp"

namespace lidarflow {

struct Stride {
  int y = 1;
  int x = 1;
};

/// Per-side zero padding. Asymmetric values are allowed.
struct Pad {
  int top = 0;
  int bottom = 0;
  int left = 0;
  int right = 0;

  static Pad uniform(int p) { return Pad{p, p, p, p}; }
  friend bool operator==(const Pad&, const Pad&) = default;
};

inline constexpr double kDefaultLeakySlope = 0.1;

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

/// Sliding-window geometry of a convolution over an (in_h, in_w) image.
struct ConvGeometry {
  int in_h = 0, in_w = 0;
  int kh = 0, kw = 0;
  int sy = 1, sx = 1;
  int pad_top = 0, pad_left = 0;
  int out_h = 0, out_w = 0;

  [[nodiscard]] int patch() const { return kh * kw; }
  [[nodiscard]] std::size_t out_plane() const { return static_cast<std::size_t>(out_h) * out_w; }
};

inline int conv_out_size(int in, int k, int stride, int p0, int p1) {
  const int span = in + p0 + p1 - k;
  return span < 0 ? 0 : span / stride + 1;
}

inline void check_stride_pad(const Stride& s, const Pad& p, const char* op) {
  if (s.y < 1 || s.x < 1) throw GeometryError(std::string(op) + ": stride must be >= 1");
  if (p.top < 0 || p.bottom < 0 || p.left < 0 || p.right < 0) {
    throw GeometryError(std::string(op) + ": padding must be non-negative");
  }
}

inline ConvGeometry conv_geometry(int in_h, int in_w, int kh, int kw, Stride s, Pad p, const char* op) {
  check_stride_pad(s, p, op);
  ConvGeometry g{in_h, in_w, kh, kw, s.y, s.x, p.top, p.left, 0, 0};
  g.out_h = conv_out_size(in_h, kh, s.y, p.top, p.bottom);
  g.out_w = conv_out_size(in_w, kw, s.x, p.left, p.right);
  if (g.out_h < 1) {
    throw GeometryError(std::string(op) + ": non-positive output height (in " + std::to_string(in_h) + ", kernel " +
                        std::to_string(kh) + ", pad " + std::to_string(p.top) + "+" + std::to_string(p.bottom) + ")");
  }
  if (g.out_w < 1) {
    throw GeometryError(std::string(op) + ": non-positive output width (in " + std::to_string(in_w) + ", kernel " +
                        std::to_string(kw) + ", pad " + std::to_string(p.left) + "+" + std::to_string(p.right) + ")");
  }
  return g;
}

/// Unfold a (channels, in_h, in_w) image into a (channels*kh*kw, out_h*out_w)
/// matrix of zero-padded windows.
template <typename T>
void im2col(const T* img, int channels, const ConvGeometry& g, T* cols) {
  const std::size_t plane = g.out_plane();
  for (int c = 0; c < channels; ++c) {
    const T* src = img + static_cast<std::size_t>(c) * g.in_h * g.in_w;
    for (int ky = 0; ky < g.kh; ++ky) {
      for (int kx = 0; kx < g.kw; ++kx) {
        T* row = cols + (static_cast<std::size_t>(c) * g.patch() + ky * g.kw + kx) * plane;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.sy - g.pad_top + ky;
          T* dst = row + static_cast<std::size_t>(oy) * g.out_w;
          if (iy < 0 || iy >= g.in_h) {
            std::fill(dst, dst + g.out_w, T{0});
            continue;
          }
          const T* line = src + static_cast<std::size_t>(iy) * g.in_w;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * g.sx - g.pad_left + kx;
            dst[ox] = (ix >= 0 && ix < g.in_w) ? line[ix] : T{0};
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatter-add window columns back into the image.
template <typename T>
void col2im(const T* cols, int channels, const ConvGeometry& g, T* img) {
  const std::size_t plane = g.out_plane();
  for (int c = 0; c < channels; ++c) {
    T* dst = img + static_cast<std::size_t>(c) * g.in_h * g.in_w;
    for (int ky = 0; ky < g.kh; ++ky) {
      for (int kx = 0; kx < g.kw; ++kx) {
        const T* row = cols + (static_cast<std::size_t>(c) * g.patch() + ky * g.kw + kx) * plane;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.sy - g.pad_top + ky;
          if (iy < 0 || iy >= g.in_h) continue;
          T* line = dst + static_cast<std::size_t>(iy) * g.in_w;
          const T* src = row + static_cast<std::size_t>(oy) * g.out_w;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * g.sx - g.pad_left + kx;
            if (ix >= 0 && ix < g.in_w) line[ix] += src[ox];
          }
        }
      }
    }
  }
}

template <typename T>
void check_bias(Var<T> bias, int channels, const char* op) {
  if (!bias.valid()) return;
  if (bias.value().size() != static_cast<std::size_t>(channels)) {
    throw ShapeError(std::string(op) + ": bias has " + std::to_string(bias.value().size()) + " entries, expected " +
                     std::to_string(channels));
  }
}

template <typename T>
void add_bias(Tensor<T>& out, const Tensor<T>& bias) {
  const auto& s = out.shape();
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      T* p = out.raw() + out.index(n, c, 0, 0);
      const T b = bias[c];
      for (std::size_t i = 0; i < s.plane(); ++i) p[i] += b;
    }
  }
}

template <typename T>
void accumulate_bias_grad(const Tensor<T>& gy, Tensor<T>& gb) {
  const auto& s = gy.shape();
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const T* p = gy.raw() + gy.index(n, c, 0, 0);
      T acc{0};
      for (std::size_t i = 0; i < s.plane(); ++i) acc += p[i];
      gb[c] += acc;
    }
  }
}

template <typename T>
Var<T> record_with_bias(Graph<T>& g, Tensor<T> out, Var<T> x, Var<T> w, Var<T> b, typename Graph<T>::BackwardFn fn,
                        const char* op) {
  if (b.valid()) return g.record(std::move(out), {x, w, b}, std::move(fn), op);
  return g.record(std::move(out), {x, w}, std::move(fn), op);
}

/// Shared dense/sparse 2x2 mean pooling; `counts` receives the number of
/// contributing cells per output cell.
template <typename T>
std::pair<Tensor<T>, Mask> pool2x(const Tensor<T>& x, const Mask* valid, std::vector<int>& counts) {
  const auto& s = x.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0) {
    throw GeometryError("avg_pool2x: " + std::string(s.h % 2 != 0 ? "height" : "width") + " must be even, got " +
                        to_string(s));
  }
  if (valid && !valid->matches(s)) throw ShapeError("avg_pool2x: mask does not match " + to_string(s));
  const int oh = s.h / 2;
  const int ow = s.w / 2;
  Tensor<T> out(Shape4{s.n, s.c, oh, ow});
  Mask mask(s.n, oh, ow, true);
  counts.assign(static_cast<std::size_t>(s.n) * oh * ow, 4);
  for (int n = 0; n < s.n; ++n) {
    for (int y = 0; y < oh; ++y) {
      for (int xo = 0; xo < ow; ++xo) {
        int count = 4;
        if (valid) {
          count = 0;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) count += (*valid)(n, 2 * y + dy, 2 * xo + dx) ? 1 : 0;
        }
        counts[mask.index(n, y, xo)] = count;
        mask.set(n, y, xo, count > 0);
        if (count == 0) continue;
        for (int c = 0; c < s.c; ++c) {
          T acc{0};
          for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx) {
              if (!valid || (*valid)(n, 2 * y + dy, 2 * xo + dx)) acc += x(n, c, 2 * y + dy, 2 * xo + dx);
            }
          }
          out(n, c, y, xo) = acc / static_cast<T>(count);
        }
      }
    }
  }
  return {std::move(out), std::move(mask)};
}

}  // namespace detail

/// 2-D cross-correlation. `weight` is (out_ch, in_ch, kh, kw); `bias`, when
/// valid, holds out_ch values.
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> weight, Var<T> bias, Stride stride, Pad pad) {
  Graph<T>& g = *x.graph;
  const Shape4 xs = x.shape();
  const Shape4 ws = weight.shape();
  if (ws.c != xs.c) {
    throw ShapeError("conv2d: input has " + std::to_string(xs.c) + " channels, weight expects " +
                     std::to_string(ws.c));
  }
  detail::check_bias(bias, ws.n, "conv2d");
  const auto geo = detail::conv_geometry(xs.h, xs.w, ws.h, ws.w, stride, pad, "conv2d");
  const int k = ws.c * geo.patch();
  const auto plane = static_cast<Eigen::Index>(geo.out_plane());

  Tensor<T> out(Shape4{xs.n, ws.n, geo.out_h, geo.out_w});
  std::vector<T> cols(static_cast<std::size_t>(k) * plane);
  detail::ConstMatMap<T> wm(weight.value().raw(), ws.n, k);
  for (int n = 0; n < xs.n; ++n) {
    detail::im2col(x.value().raw() + x.value().index(n, 0, 0, 0), xs.c, geo, cols.data());
    detail::MatMap<T> y(out.raw() + out.index(n, 0, 0, 0), ws.n, plane);
    y.noalias() = wm * detail::ConstMatMap<T>(cols.data(), k, plane);
  }
  if (bias.valid()) detail::add_bias(out, bias.value());

  const std::size_t xid = x.id, wid = weight.id, bid = bias.id;
  const bool has_bias = bias.valid();
  auto backward = [=](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& gy = gr.out_grad(self);
    const Tensor<T>& xv = gr.value(xid);
    const Tensor<T>& wv = gr.value(wid);
    Tensor<T>* gx = gr.grad_sink(xid);
    Tensor<T>* gw = gr.grad_sink(wid);
    if (has_bias) {
      if (Tensor<T>* gb = gr.grad_sink(bid)) detail::accumulate_bias_grad(gy, *gb);
    }
    std::vector<T> c(static_cast<std::size_t>(k) * plane);
    detail::ConstMatMap<T> w(wv.raw(), ws.n, k);
    for (int n = 0; n < xs.n; ++n) {
      detail::ConstMatMap<T> dy(gy.raw() + gy.index(n, 0, 0, 0), ws.n, plane);
      if (gw) {
        detail::im2col(xv.raw() + xv.index(n, 0, 0, 0), xs.c, geo, c.data());
        detail::MatMap<T>(gw->raw(), ws.n, k).noalias() += dy * detail::ConstMatMap<T>(c.data(), k, plane).transpose();
      }
      if (gx) {
        detail::MatMap<T>(c.data(), k, plane).noalias() = w.transpose() * dy;
        detail::col2im(c.data(), xs.c, geo, gx->raw() + gx->index(n, 0, 0, 0));
      }
    }
  };
  return detail::record_with_bias(g, std::move(out), x, weight, bias, std::move(backward), "conv2d");
}

/// Transposed convolution: the adjoint of conv2d with the same weight.
/// `weight` is (in_ch, out_ch, kh, kw); `pad` crops the full output, so each
/// axis has size (in - 1) * stride + kernel - pad_total.
template <typename T>
Var<T> deconv2d(Var<T> x, Var<T> weight, Var<T> bias, Stride stride, Pad pad) {
  Graph<T>& g = *x.graph;
  const Shape4 xs = x.shape();
  const Shape4 ws = weight.shape();
  if (ws.n != xs.c) {
    throw ShapeError("deconv2d: input has " + std::to_string(xs.c) + " channels, weight expects " +
                     std::to_string(ws.n));
  }
  detail::check_bias(bias, ws.c, "deconv2d");
  detail::check_stride_pad(stride, pad, "deconv2d");
  const int out_h = (xs.h - 1) * stride.y + ws.h - pad.top - pad.bottom;
  const int out_w = (xs.w - 1) * stride.x + ws.w - pad.left - pad.right;
  if (out_h < 1) throw GeometryError("deconv2d: non-positive output height " + std::to_string(out_h));
  if (out_w < 1) throw GeometryError("deconv2d: non-positive output width " + std::to_string(out_w));
  const detail::ConvGeometry geo{out_h, out_w, ws.h, ws.w, stride.y, stride.x, pad.top, pad.left, xs.h, xs.w};
  const int k = ws.c * geo.patch();
  const auto plane = static_cast<Eigen::Index>(geo.out_plane());

  Tensor<T> out(Shape4{xs.n, ws.c, out_h, out_w});
  std::vector<T> cols(static_cast<std::size_t>(k) * plane);
  detail::ConstMatMap<T> wm(weight.value().raw(), ws.n, k);
  for (int n = 0; n < xs.n; ++n) {
    detail::ConstMatMap<T> xn(x.value().raw() + x.value().index(n, 0, 0, 0), xs.c, plane);
    detail::MatMap<T>(cols.data(), k, plane).noalias() = wm.transpose() * xn;
    detail::col2im(cols.data(), ws.c, geo, out.raw() + out.index(n, 0, 0, 0));
  }
  if (bias.valid()) detail::add_bias(out, bias.value());

  const std::size_t xid = x.id, wid = weight.id, bid = bias.id;
  const bool has_bias = bias.valid();
  auto backward = [=](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& gy = gr.out_grad(self);
    const Tensor<T>& xv = gr.value(xid);
    const Tensor<T>& wv = gr.value(wid);
    Tensor<T>* gx = gr.grad_sink(xid);
    Tensor<T>* gw = gr.grad_sink(wid);
    if (has_bias) {
      if (Tensor<T>* gb = gr.grad_sink(bid)) detail::accumulate_bias_grad(gy, *gb);
    }
    std::vector<T> c(static_cast<std::size_t>(k) * plane);
    detail::ConstMatMap<T> w(wv.raw(), ws.n, k);
    for (int n = 0; n < xs.n; ++n) {
      detail::im2col(gy.raw() + gy.index(n, 0, 0, 0), ws.c, geo, c.data());
      detail::ConstMatMap<T> dc(c.data(), k, plane);
      if (gx) detail::MatMap<T>(gx->raw() + gx->index(n, 0, 0, 0), xs.c, plane).noalias() += w * dc;
      if (gw) {
        detail::ConstMatMap<T> xn(xv.raw() + xv.index(n, 0, 0, 0), xs.c, plane);
        detail::MatMap<T>(gw->raw(), ws.n, k).noalias() += xn * dc.transpose();
      }
    }
  };
  return detail::record_with_bias(g, std::move(out), x, weight, bias, std::move(backward), "deconv2d");
}

/// x for x >= 0, slope * x otherwise. The derivative at 0 is taken as 1.
template <typename T>
Var<T> leaky_relu(Var<T> x, T slope = static_cast<T>(kDefaultLeakySlope)) {
  if (!(slope > T{0} && slope < T{1})) throw ConfigError("leaky_relu: slope must lie in (0, 1)");
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] >= T{0} ? xv[i] : slope * xv[i];
  const std::size_t xid = x.id;
  return x.graph->record(
      std::move(out), {x},
      [xid, slope](Graph<T>& gr, std::size_t self) {
        const Tensor<T>& gy = gr.out_grad(self);
        const Tensor<T>& in = gr.value(xid);
        Tensor<T>* gx = gr.grad_sink(xid);
        for (std::size_t i = 0; i < in.size(); ++i) (*gx)[i] += in[i] >= T{0} ? gy[i] : slope * gy[i];
      },
      "leaky_relu");
}

/// Stack `a` then `b` along the channel axis.
template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
  const Shape4 as = a.shape();
  const Shape4 bs = b.shape();
  if (as.n != bs.n || as.h != bs.h || as.w != bs.w) {
    throw ShapeError("concat_channels: " + to_string(as) + " and " + to_string(bs) + " disagree outside channels");
  }
  Tensor<T> out(Shape4{as.n, as.c + bs.c, as.h, as.w});
  const std::size_t na = static_cast<std::size_t>(as.c) * as.plane();
  const std::size_t nb = static_cast<std::size_t>(bs.c) * bs.plane();
  for (int n = 0; n < as.n; ++n) {
    T* dst = out.raw() + static_cast<std::size_t>(n) * (na + nb);
    std::copy_n(a.value().raw() + n * na, na, dst);
    std::copy_n(b.value().raw() + n * nb, nb, dst + na);
  }
  const std::size_t aid = a.id, bid = b.id;
  const int batch = as.n;
  return a.graph->record(
      std::move(out), {a, b},
      [=](Graph<T>& gr, std::size_t self) {
        const Tensor<T>& gy = gr.out_grad(self);
        Tensor<T>* ga = gr.grad_sink(aid);
        Tensor<T>* gb = gr.grad_sink(bid);
        for (int n = 0; n < batch; ++n) {
          const T* src = gy.raw() + static_cast<std::size_t>(n) * (na + nb);
          if (ga) {
            T* d = ga->raw() + n * na;
            for (std::size_t i = 0; i < na; ++i) d[i] += src[i];
          }
          if (gb) {
            T* d = gb->raw() + n * nb;
            for (std::size_t i = 0; i < nb; ++i) d[i] += src[na + i];
          }
        }
      },
      "concat_channels");
}

namespace detail {

/// Source index pair and weight of the upper neighbour for one output
/// coordinate of a 2x upsampling (align-corners-false, edge clamped).
struct Tap {
  int lo = 0;
  int hi = 0;
  double frac = 0.0;
};

inline Tap upsample_tap(int out_index, int in_size) {
  double src = (out_index + 0.5) / 2.0 - 0.5;
  if (src < 0.0) src = 0.0;
  int lo = static_cast<int>(std::floor(src));
  if (lo > in_size - 1) lo = in_size - 1;
  const int hi = lo + 1 < in_size ? lo + 1 : in_size - 1;
  const double frac = hi == lo ? 0.0 : src - lo;
  return Tap{lo, hi, frac};
}

}  // namespace detail

/// Bilinear 2x upsampling, sampling input coordinate (i + 0.5) / 2 - 0.5.
template <typename T>
Var<T> bilinear_upsample2x(Var<T> x) {
  const Shape4 s = x.shape();
  if (s.h < 1 || s.w < 1) throw GeometryError("bilinear_upsample2x: empty spatial extent");
  const int oh = 2 * s.h;
  const int ow = 2 * s.w;
  std::vector<detail::Tap> ty(oh), tx(ow);
  for (int i = 0; i < oh; ++i) ty[i] = detail::upsample_tap(i, s.h);
  for (int i = 0; i < ow; ++i) tx[i] = detail::upsample_tap(i, s.w);

  const Tensor<T>& xv = x.value();
  Tensor<T> out(Shape4{s.n, s.c, oh, ow});
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      for (int i = 0; i < oh; ++i) {
        const auto fy = static_cast<T>(ty[i].frac);
        for (int j = 0; j < ow; ++j) {
          const auto fx = static_cast<T>(tx[j].frac);
          const T top = (T{1} - fx) * xv(n, c, ty[i].lo, tx[j].lo) + fx * xv(n, c, ty[i].lo, tx[j].hi);
          const T bot = (T{1} - fx) * xv(n, c, ty[i].hi, tx[j].lo) + fx * xv(n, c, ty[i].hi, tx[j].hi);
          out(n, c, i, j) = (T{1} - fy) * top + fy * bot;
        }
      }
    }
  }
  const std::size_t xid = x.id;
  return x.graph->record(
      std::move(out), {x},
      [=](Graph<T>& gr, std::size_t self) {
        const Tensor<T>& gy = gr.out_grad(self);
        Tensor<T>& gx = *gr.grad_sink(xid);
        for (int n = 0; n < s.n; ++n) {
          for (int c = 0; c < s.c; ++c) {
            for (int i = 0; i < oh; ++i) {
              const auto fy = static_cast<T>(ty[i].frac);
              for (int j = 0; j < ow; ++j) {
                const auto fx = static_cast<T>(tx[j].frac);
                const T gv = gy(n, c, i, j);
                gx(n, c, ty[i].lo, tx[j].lo) += (T{1} - fy) * (T{1} - fx) * gv;
                gx(n, c, ty[i].lo, tx[j].hi) += (T{1} - fy) * fx * gv;
                gx(n, c, ty[i].hi, tx[j].lo) += fy * (T{1} - fx) * gv;
                gx(n, c, ty[i].hi, tx[j].hi) += fy * fx * gv;
              }
            }
          }
        }
      },
      "bilinear_upsample2x");
}

template <typename T>
struct Pooled {
  Var<T> value;
  Mask mask;
};

/// 2x2 mean pooling. With a validity mask only valid cells are averaged; an
/// output cell is valid iff at least one of its inputs is, and holds 0 otherwise.
template <typename T>
std::pair<Tensor<T>, Mask> avg_pool2x(const Tensor<T>& x, const Mask* valid = nullptr) {
  std::vector<int> counts;
  return detail::pool2x(x, valid, counts);
}

template <typename T>
Pooled<T> avg_pool2x(Var<T> x, const Mask* valid = nullptr) {
  std::vector<int> counts;
  auto [out, mask] = detail::pool2x(x.value(), valid, counts);
  const Shape4 s = x.shape();
  const std::size_t xid = x.id;
  const bool sparse = valid != nullptr;
  Mask in_mask = sparse ? *valid : Mask();
  Var<T> v = x.graph->record(
      std::move(out), {x},
      [=, counts = std::move(counts), in_mask = std::move(in_mask)](Graph<T>& gr, std::size_t self) {
        const Tensor<T>& gy = gr.out_grad(self);
        Tensor<T>& gx = *gr.grad_sink(xid);
        const int oh = s.h / 2, ow = s.w / 2;
        for (int n = 0; n < s.n; ++n) {
          for (int y = 0; y < oh; ++y) {
            for (int xo = 0; xo < ow; ++xo) {
              const int count = counts[(static_cast<std::size_t>(n) * oh + y) * ow + xo];
              if (count == 0) continue;
              for (int c = 0; c < s.c; ++c) {
                const T share = gy(n, c, y, xo) / static_cast<T>(count);
                for (int dy = 0; dy < 2; ++dy) {
                  for (int dx = 0; dx < 2; ++dx) {
                    if (!sparse || in_mask(n, 2 * y + dy, 2 * xo + dx)) gx(n, c, 2 * y + dy, 2 * xo + dx) += share;
                  }
                }
              }
            }
          }
        }
      },
      "avg_pool2x");
  return Pooled<T>{v, std::move(mask)};
}

/// Mean over valid pixels of the Euclidean norm of (pred - gt); both tensors
/// carry (u, v) in channels 0 and 1. Differentiable w.r.t. `pred` only.
template <typename T>
Var<T> masked_epe_loss(Var<T> pred, const Tensor<T>& gt, const Mask& valid) {
  const Shape4 s = pred.shape();
  if (s.c != 2) throw ShapeError("masked_epe_loss: prediction must have 2 channels, got " + to_string(s));
  if (gt.shape() != s) throw ShapeError("masked_epe_loss: gt " + to_string(gt.shape()) + " vs pred " + to_string(s));
  if (!valid.matches(s)) throw ShapeError("masked_epe_loss: mask does not match " + to_string(s));
  const std::size_t count = valid.count();
  if (count == 0) throw EmptyMaskError("masked_epe_loss: no valid pixels");

  const Tensor<T>& pv = pred.value();
  T total{0};
  for (int n = 0; n < s.n; ++n) {
    for (int y = 0; y < s.h; ++y) {
      for (int x = 0; x < s.w; ++x) {
        if (!valid(n, y, x)) continue;
        const T du = pv(n, 0, y, x) - gt(n, 0, y, x);
        const T dv = pv(n, 1, y, x) - gt(n, 1, y, x);
        total += std::sqrt(du * du + dv * dv);
      }
    }
  }
  Tensor<T> out(Shape4{1, 1, 1, 1}, total / static_cast<T>(count));
  const std::size_t pid = pred.id;
  return pred.graph->record(
      std::move(out), {pred},
      [=](Graph<T>& gr, std::size_t self) {
        const T scale = gr.out_grad(self)[0] / static_cast<T>(count);
        const Tensor<T>& p = gr.value(pid);
        Tensor<T>& gp = *gr.grad_sink(pid);
        for (int n = 0; n < s.n; ++n) {
          for (int y = 0; y < s.h; ++y) {
            for (int x = 0; x < s.w; ++x) {
              if (!valid(n, y, x)) continue;
              const T du = p(n, 0, y, x) - gt(n, 0, y, x);
              const T dv = p(n, 1, y, x) - gt(n, 1, y, x);
              const T norm = std::sqrt(du * du + dv * dv);
              if (norm == T{0}) continue;  // subgradient 0 at the kink
              gp(n, 0, y, x) += scale * du / norm;
              gp(n, 1, y, x) += scale * dv / norm;
            }
          }
        }
      },
      "masked_epe_loss");
}

template <typename T>
Var<T> sum(Var<T> x) {
  T acc{0};
  for (T v : x.value().data()) acc += v;
  const std::size_t xid = x.id;
  return x.graph->record(
      Tensor<T>(Shape4{1, 1, 1, 1}, acc), {x},
      [xid](Graph<T>& gr, std::size_t self) {
        const T g = gr.out_grad(self)[0];
        for (T& v : gr.grad_sink(xid)->data()) v += g;
      },
      "sum");
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  if (a.shape() != b.shape()) throw ShapeError("add: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  Tensor<T> out(a.value());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  const std::size_t aid = a.id, bid = b.id;
  return a.graph->record(
      std::move(out), {a, b},
      [aid, bid](Graph<T>& gr, std::size_t self) {
        const Tensor<T>& gy = gr.out_grad(self);
        for (std::size_t id : {aid, bid}) {
          if (Tensor<T>* gx = gr.grad_sink(id)) {
            for (std::size_t i = 0; i < gy.size(); ++i) (*gx)[i] += gy[i];
          }
        }
      },
      "add");
}

template <typename T>
Var<T> scale(Var<T> x, T factor) {
  Tensor<T> out(x.value());
  for (T& v : out.data()) v *= factor;
  const std::size_t xid = x.id;
  return x.graph->record(
      std::move(out), {x},
      [xid, factor](Graph<T>& gr, std::size_t self) {
        const Tensor<T>& gy = gr.out_grad(self);
        Tensor<T>& gx = *gr.grad_sink(xid);
        for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += factor * gy[i];
      },
      "scale");
}

}  // namespace lidarflow
