#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "lidarflow/error.hpp"
#include "lidarflow/tensor.hpp"

namespace lidarflow {

/// Dense H x W field of (u, v) pixel displacements, u rightward and v
/// downward. An empty `valid` vector means every pixel is valid.
struct FlowField {
  int height = 0;
  int width = 0;
  std::vector<float> u;
  std::vector<float> v;
  std::vector<std::uint8_t> valid;

  FlowField() = default;
  FlowField(int h, int w, bool with_mask = false)
      : height(h), width(w), u(static_cast<std::size_t>(h) * w, 0.0f), v(static_cast<std::size_t>(h) * w, 0.0f) {
    if (h < 0 || w < 0) throw ShapeError("negative flow field dimensions");
    if (with_mask) valid.assign(u.size(), 1);
  }

  [[nodiscard]] std::size_t size() const { return u.size(); }
  [[nodiscard]] std::size_t index(int y, int x) const { return static_cast<std::size_t>(y) * width + x; }
  [[nodiscard]] bool has_mask() const { return !valid.empty(); }
  [[nodiscard]] bool is_valid(std::size_t i) const { return valid.empty() || valid[i] != 0; }
  [[nodiscard]] bool is_valid(int y, int x) const { return is_valid(index(y, x)); }
  [[nodiscard]] bool same_dims(const FlowField& o) const { return height == o.height && width == o.width; }

  /// Materialise an all-valid mask so individual pixels can be invalidated.
  void ensure_mask() {
    if (valid.empty()) valid.assign(u.size(), 1);
  }
  [[nodiscard]] std::size_t valid_count() const {
    if (valid.empty()) return u.size();
    std::size_t n = 0;
    for (auto b : valid) n += b != 0;
    return n;
  }

  friend bool operator==(const FlowField&, const FlowField&) = default;
};

/// Sparse flow on the lidar grid; same layout as a dense field, with a mask.
using SparseLidarFlow = FlowField;

/// Horizontal mirror: column x moves to width-1-x and u changes sign.
inline FlowField mirror_columns(const FlowField& f) {
  FlowField out = f;
  for (int y = 0; y < f.height; ++y) {
    for (int x = 0; x < f.width; ++x) {
      const auto src = f.index(y, f.width - 1 - x);
      const auto dst = f.index(y, x);
      out.u[dst] = -f.u[src];
      out.v[dst] = f.v[src];
      if (f.has_mask()) out.valid[dst] = f.valid[src];
    }
  }
  return out;
}

template <typename T>
Tensor<T> to_tensor(const FlowField& f) {
  Tensor<T> t(Shape4{1, 2, f.height, f.width});
  for (std::size_t i = 0; i < f.size(); ++i) {
    t[i] = static_cast<T>(f.u[i]);
    t[f.size() + i] = static_cast<T>(f.v[i]);
  }
  return t;
}

inline Mask validity_mask(const FlowField& f) {
  Mask m(1, f.height, f.width, true);
  if (f.has_mask()) m.bits = f.valid;
  return m;
}

/// Field from batch entry `n` of a (batch, 2, H, W) tensor.
template <typename T>
FlowField from_tensor(const Tensor<T>& t, int n = 0) {
  if (t.shape().c != 2) throw ShapeError("from_tensor: flow tensor must have 2 channels, got " + to_string(t.shape()));
  FlowField f(t.shape().h, t.shape().w);
  for (int y = 0; y < f.height; ++y) {
    for (int x = 0; x < f.width; ++x) {
      f.u[f.index(y, x)] = static_cast<float>(t(n, 0, y, x));
      f.v[f.index(y, x)] = static_cast<float>(t(n, 1, y, x));
    }
  }
  return f;
}

}  // namespace lidarflow
