#pragma once

#include <stdexcept>
#include <string>

namespace sttr {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible (channel counts, inner dimensions, broadcast).
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Spatial size violates a divisibility or minimum-size contract.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// An index (layer, head, query token, axis) is out of range.
class IndexError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace sttr
