#pragma once

#include <random>
#include <vector>

#include "poi/poi.hpp"

namespace poi::test {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0,
                            bool needs_grad = true) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(numel(shape));
  for (double& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v), needs_grad);
}

/// Random points on the probability simplex, one row per sample.
inline std::vector<double> random_simplex(std::size_t rows, std::size_t C, std::mt19937_64& rng) {
  std::exponential_distribution<double> e(1.0);
  std::vector<double> out(rows * C);
  for (std::size_t i = 0; i < rows; ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) s += out[i * C + c] = e(rng);
    for (std::size_t c = 0; c < C; ++c) out[i * C + c] /= s;
  }
  return out;
}

/// Scalar probe: sum of the op output weighted by fixed random coefficients,
/// so every output element contributes a distinct gradient.
inline Var probe(Var y, const std::vector<double>& coeffs) {
  Tape& t = *y.tape;
  Var c = t.constant(y.shape(), std::vector<double>(coeffs.begin(), coeffs.begin() + y.size()));
  return sum(mul(y, c));
}

inline std::vector<double> probe_coeffs(std::size_t n, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> c(n);
  for (double& x : c) x = u(rng);
  return c;
}

inline RunConfig tiny_config() { return RunConfig::from_profile("tiny"); }

}  // namespace poi::test
