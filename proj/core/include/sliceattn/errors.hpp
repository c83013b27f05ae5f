#pragma once

#include <stdexcept>
#include <string>

namespace sliceattn {

// Shape or geometry violations (mismatched extents, invalid axes, bad kernels).
class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Gradient-tape misuse: backward without a tape, second backward, non-scalar loss.
class TapeError : public std::runtime_error {
 public:
  explicit TapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Domain violations on values: out-of-range labels, bad window bounds, empty splits.
class ValueError : public std::runtime_error {
 public:
  explicit ValueError(const std::string& msg) : std::runtime_error(msg) {}
};

// A metric that is mathematically undefined for the given inputs.
class MetricError : public std::runtime_error {
 public:
  explicit MetricError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values where finite math was expected (divergence, debug checks).
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace sliceattn
