#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace poi {

// Error taxonomy. The CLI maps ConfigError to exit code 1 and everything
// else derived from Error to exit code 2.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DimensionError : Error {
  using Error::Error;
};
struct ParameterError : Error {
  using Error::Error;
};
struct ContractError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};
struct LookupError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, std::size_t b) { return a * b; });
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline void check_finite(std::span<const double> values, const char* where) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value produced by ") + where);
    }
  }
}

/// Dense row-major tensor of doubles. `grad` is allocated iff
/// `requires_grad` is set and always matches `data` in length.
struct Tensor {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;

  Tensor() = default;

  Tensor(Shape s, std::vector<double> values, bool needs_grad = false)
      : shape(std::move(s)), data(std::move(values)), requires_grad(needs_grad) {
    for (std::size_t d : shape) {
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + to_string(shape));
    }
    if (numel(shape) != data.size()) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + to_string(shape));
    }
    if (requires_grad) grad.assign(data.size(), 0.0);
  }

  static Tensor zeros(Shape s, bool needs_grad = false) {
    const std::size_t n = numel(s);
    return Tensor(std::move(s), std::vector<double>(n, 0.0), needs_grad);
  }

  static Tensor scalar(double v, bool needs_grad = false) { return Tensor({1}, {v}, needs_grad); }

  std::size_t size() const { return data.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
  std::size_t rank() const { return shape.size(); }

  void zero_grad() {
    if (requires_grad) grad.assign(data.size(), 0.0);
  }
};

}  // namespace poi
