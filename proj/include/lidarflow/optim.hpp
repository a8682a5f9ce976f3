#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "lidarflow/error.hpp"
#include "lidarflow/tensor.hpp"

namespace lidarflow {

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moment accumulators of one parameter tensor.
template <typename T>
struct AdamState {
  Tensor<T> m;
  Tensor<T> v;
  std::int64_t t = 0;

  AdamState() = default;
  explicit AdamState(const Shape4& shape) : m(shape), v(shape) {}
};

/// One bias-corrected Adam update of `param` in place.
template <typename T>
void adam_step(Tensor<T>& param, const Tensor<T>& grad, AdamState<T>& state, const AdamHyper& h) {
  if (grad.shape() != param.shape()) {
    throw ShapeError("adam_step: grad " + to_string(grad.shape()) + " vs param " + to_string(param.shape()));
  }
  if (state.m.shape() != param.shape() || state.v.shape() != param.shape()) {
    throw ShapeError("adam_step: optimizer state does not match param " + to_string(param.shape()));
  }
  if (!(h.lr > 0.0)) throw ConfigError("adam_step: learning rate must be positive");
  state.t += 1;
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.t));
  const auto b1 = static_cast<T>(h.beta1);
  const auto b2 = static_cast<T>(h.beta2);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const T g = grad[i];
    state.m[i] = b1 * state.m[i] + (T{1} - b1) * g;
    state.v[i] = b2 * state.v[i] + (T{1} - b2) * g * g;
    const double m_hat = static_cast<double>(state.m[i]) / c1;
    const double v_hat = static_cast<double>(state.v[i]) / c2;
    param[i] = static_cast<T>(static_cast<double>(param[i]) - h.lr * m_hat / (std::sqrt(v_hat) + h.eps));
  }
}

/// Fan-in of a weight tensor laid out as (a, fan_channels, kh, kw).
inline int fan_in(const Shape4& shape) { return shape.c * shape.h * shape.w; }

/// He initialisation: zero-mean Gaussian with variance 2 / fan_in, where
/// fan_in = shape.c * kh * kw.
template <typename T>
Tensor<T> he_init(const Shape4& shape, std::mt19937_64& rng) {
  const int fan = fan_in(shape);
  if (fan <= 0) throw ConfigError("he_init: zero fan-in for shape " + to_string(shape));
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan));
  Tensor<T> out(shape);
  for (T& v : out.data()) v = static_cast<T>(dist(rng));
  return out;
}

}  // namespace lidarflow
