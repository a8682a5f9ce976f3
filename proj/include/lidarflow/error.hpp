#pragma once

#include <stdexcept>
#include <string>

namespace lidarflow {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or field dimensions do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A convolution, pooling or scheduling geometry cannot be realised.
class GeometryError : public Error {
 public:
  using Error::Error;
};

/// Malformed, truncated or unsupported file content.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// A value cannot be represented in the target encoding.
class EncodeError : public Error {
 public:
  using Error::Error;
};

/// A masked reduction was asked to average over zero pixels.
class EmptyMaskError : public Error {
 public:
  using Error::Error;
};

/// backward() was called twice on the same graph without zero_grad().
class ReentrancyError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf produced by an operation or a loss term.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace lidarflow
