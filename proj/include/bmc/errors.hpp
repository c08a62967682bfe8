// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace bmc {

// Base of every error raised by the library. Callers that only care about
// "something in bmc failed" catch this.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Cache would have to hold more than max_context rows.
class CapacityExceeded : public Error {
 public:
  using Error::Error;
};

// Tensor shapes or model dimensions do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A closed form needs r | N (or T | N) and did not get it.
class DivisibilityError : public Error {
 public:
  using Error::Error;
};

// Index or length outside the allowed range.
class BoundsError : public Error {
 public:
  using Error::Error;
};

// Speculative rows do not fit in the staged region.
class PlacementError : public Error {
 public:
  using Error::Error;
};

// Acceptance result refers to rows that were never staged.
class ConsistencyError : public Error {
 public:
  using Error::Error;
};

class CalibrationError : public Error {
 public:
  using Error::Error;
};

// Non-finite logits during decoding.
class NumericFailure : public Error {
 public:
  NumericFailure(std::size_t iteration, const std::string& what)
      : Error(what + " (iteration " + std::to_string(iteration) + ")"),
        iteration_(iteration) {}

  std::size_t iteration() const noexcept { return iteration_; }

 private:
  std::size_t iteration_;
};

}  // namespace bmc
