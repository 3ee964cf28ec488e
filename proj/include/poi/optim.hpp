#pragma once

#include <array>
#include <cmath>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "poi/tape.hpp"

namespace poi {

/// v <- momentum * v + grad + weight_decay * theta; theta <- theta - lr * v
inline void sgd_momentum_step(std::span<double> theta, std::span<const double> grad, std::span<double> velocity,
                              double lr, double momentum, double weight_decay) {
  if (theta.size() != grad.size() || theta.size() != velocity.size()) {
    throw DimensionError("sgd_momentum_step: parameter, gradient and velocity sizes differ");
  }
  for (std::size_t k = 0; k < theta.size(); ++k) {
    velocity[k] = momentum * velocity[k] + grad[k] + weight_decay * theta[k];
    theta[k] -= lr * velocity[k];
  }
}

/// Which sub-network a parameter belongs to. Inference must never touch Pin.
enum class ParamGroup { Shared, Pin, Trn };

inline const char* to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::Shared: return "shared";
    case ParamGroup::Pin: return "pin";
    case ParamGroup::Trn: return "trn";
  }
  return "?";
}

struct Param {
  std::string name;
  ParamGroup group = ParamGroup::Shared;
  Tensor value;
  std::vector<double> velocity;
};

/// Ordered, named parameter collection. Copying makes an independent
/// snapshot; read counters are per instance.
class ParamStore {
 public:
  using Handle = std::size_t;

  Handle add(std::string name, ParamGroup group, Tensor value) {
    value.requires_grad = true;
    value.grad.assign(value.data.size(), 0.0);
    Param p{std::move(name), group, std::move(value), {}};
    p.velocity.assign(p.value.data.size(), 0.0);
    params_.push_back(std::move(p));
    return params_.size() - 1;
  }

  /// Glorot-uniform weight in +-sqrt(6 / (fan_in + fan_out)).
  Handle add_glorot(std::string name, ParamGroup group, Shape shape, std::size_t fan_in, std::size_t fan_out,
                    std::mt19937_64& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> data(numel(shape));
    for (double& v : data) v = dist(rng);
    return add(std::move(name), group, Tensor(std::move(shape), std::move(data)));
  }

  Handle add_zeros(std::string name, ParamGroup group, Shape shape) {
    return add(std::move(name), group, Tensor::zeros(std::move(shape)));
  }

  /// Records parameter `h` on `tape` and counts the read. Gradients from a
  /// later backward() land in this store even through a const reference.
  Var use(Tape& tape, Handle h) const {
    ++reads_[static_cast<std::size_t>(params_[h].group)];
    return tape.leaf(const_cast<Tensor&>(params_[h].value));
  }

  std::size_t reads(ParamGroup g) const { return reads_[static_cast<std::size_t>(g)]; }
  void reset_reads() const { reads_ = {0, 0, 0}; }

  void zero_grad() {
    for (Param& p : params_) p.value.zero_grad();
  }

  void sgd_step(double lr, double momentum, double weight_decay) {
    for (Param& p : params_) sgd_momentum_step(p.value.data, p.value.grad, p.velocity, lr, momentum, weight_decay);
  }

  std::size_t size() const { return params_.size(); }
  Param& operator[](Handle h) { return params_[h]; }
  const Param& operator[](Handle h) const { return params_[h]; }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::size_t count(ParamGroup g) const {
    std::size_t n = 0;
    for (const Param& p : params_)
      if (p.group == g) n += p.value.data.size();
    return n;
  }

 private:
  std::vector<Param> params_;
  mutable std::array<std::size_t, 3> reads_{0, 0, 0};
};

}  // namespace poi
