#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lidarflow/error.hpp"

namespace lidarflow {

/// Dimensions of a dense (batch, channels, height, width) array.
struct Shape4 {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  [[nodiscard]] std::size_t size() const {
    return static_cast<std::size_t>(n) * static_cast<std::size_t>(c) * static_cast<std::size_t>(h) *
           static_cast<std::size_t>(w);
  }
  [[nodiscard]] std::size_t plane() const { return static_cast<std::size_t>(h) * static_cast<std::size_t>(w); }

  friend bool operator==(const Shape4&, const Shape4&) = default;
};

inline std::string to_string(const Shape4& s) {
  return std::to_string(s.n) + "x" + std::to_string(s.c) + "x" + std::to_string(s.h) + "x" + std::to_string(s.w);
}

/// Dense row-major 4-D array. Immutable in spirit: operations produce new
/// tensors, only optimizers write in place.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape4 shape, T fill = T{0}) : shape_(shape), data_(shape.size(), fill) { check_dims(); }

  Tensor(Shape4 shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    check_dims();
    if (data_.size() != shape_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                       to_string(shape_));
    }
  }

  [[nodiscard]] const Shape4& shape() const { return shape_; }
  [[nodiscard]] std::size_t size() const { return data_.size(); }
  [[nodiscard]] bool empty() const { return data_.empty(); }

  [[nodiscard]] std::span<T> data() { return data_; }
  [[nodiscard]] std::span<const T> data() const { return data_; }
  [[nodiscard]] T* raw() { return data_.data(); }
  [[nodiscard]] const T* raw() const { return data_.data(); }

  [[nodiscard]] std::size_t index(int n, int c, int y, int x) const {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + y) * shape_.w + x;
  }
  T& operator()(int n, int c, int y, int x) { return data_[index(n, c, y, x)]; }
  const T& operator()(int n, int c, int y, int x) const { return data_[index(n, c, y, x)]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  [[nodiscard]] bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  /// Element-type conversion, e.g. a 64-bit reference copy of a 32-bit tensor.
  template <typename U>
  [[nodiscard]] Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  void check_dims() const {
    if (shape_.n < 0 || shape_.c < 0 || shape_.h < 0 || shape_.w < 0) {
      throw ShapeError("negative tensor dimension in " + to_string(shape_));
    }
  }

  Shape4 shape_{};
  std::vector<T> data_;
};

/// Per-pixel validity over (batch, height, width); shared by all channels.
struct Mask {
  int n = 0;
  int h = 0;
  int w = 0;
  std::vector<std::uint8_t> bits;

  Mask() = default;
  Mask(int batch, int height, int width, bool value = true)
      : n(batch), h(height), w(width),
        bits(static_cast<std::size_t>(batch) * height * width, value ? std::uint8_t{1} : std::uint8_t{0}) {}

  [[nodiscard]] std::size_t size() const { return bits.size(); }
  [[nodiscard]] std::size_t index(int b, int y, int x) const {
    return (static_cast<std::size_t>(b) * h + y) * w + x;
  }
  [[nodiscard]] bool operator()(int b, int y, int x) const { return bits[index(b, y, x)] != 0; }
  void set(int b, int y, int x, bool v) { bits[index(b, y, x)] = v ? 1 : 0; }
  [[nodiscard]] std::size_t count() const {
    return static_cast<std::size_t>(std::count_if(bits.begin(), bits.end(), [](std::uint8_t b) { return b != 0; }));
  }
  [[nodiscard]] bool matches(const Shape4& s) const { return n == s.n && h == s.h && w == s.w; }

  friend bool operator==(const Mask&, const Mask&) = default;
};

template <typename T>
T dot(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("dot: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  T acc{0};
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

}  // namespace lidarflow
