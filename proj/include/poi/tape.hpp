#pragma once

#include <cassert>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "poi/tensor.hpp"

namespace poi {

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  bool valid() const { return tape != nullptr; }
  const Shape& shape() const;
  std::span<const double> value() const;
  std::span<const double> grad() const;
  std::size_t dim(std::size_t i) const { return shape().at(i); }
  std::size_t size() const { return value().size(); }
  double item() const;
};

/// Values of stop-gradient nodes captured on one tape and replayed on later
/// tapes. Finite differences run with a replaying memo see detached
/// quantities as the constants the analytic gradient assumes.
class StopGradientMemo {
 public:
  const std::vector<double>& next(std::span<const double> current) {
    if (!replay_) return values_.emplace_back(current.begin(), current.end());
    if (cursor_ >= values_.size() || values_[cursor_].size() != current.size())
      throw ContractError("stop-gradient replay does not match the captured graph");
    return values_[cursor_++];
  }
  /// Switches to replay and rewinds; call once per replayed tape.
  void rewind() {
    replay_ = true;
    cursor_ = 0;
  }
  std::size_t size() const { return values_.size(); }

 private:
  std::vector<std::vector<double>> values_;
  std::size_t cursor_ = 0;
  bool replay_ = false;
};

/// Linear record of forward operations. Ids are assigned in creation order,
/// so every node's inputs precede it and reverse iteration is a valid
/// topological order for the backward sweep.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool needs_grad = false;
    Tensor* leaf = nullptr;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  /// Records a leaf mirroring `t`. When `t.requires_grad`, backward()
  /// accumulates into `t.grad`; `t` must outlive the backward call.
  Var leaf(Tensor& t) {
    Node n;
    n.shape = t.shape;
    n.value = t.data;
    n.needs_grad = t.requires_grad;
    n.leaf = t.requires_grad ? &t : nullptr;
    return push(std::move(n));
  }

  Var constant(Shape shape, std::vector<double> value) {
    if (numel(shape) != value.size()) throw DimensionError("constant: data does not match shape " + to_string(shape));
    Node n;
    n.shape = std::move(shape);
    n.value = std::move(value);
    return push(std::move(n));
  }

  Var constant(const Tensor& t) { return constant(t.shape, t.data); }

  /// Constant copy of `v` cut from the graph (through the memo when set).
  Var stop_gradient(Var v) {
    const auto& src = nodes_[v.id].value;
    Shape shape = nodes_[v.id].shape;
    if (memo_) return constant(std::move(shape), memo_->next(src));
    return constant(std::move(shape), std::vector<double>(src.begin(), src.end()));
  }

  void set_memo(StopGradientMemo* memo) { memo_ = memo; }

  /// Records an operation output. `inputs` decide whether a gradient is
  /// needed; the backward rule is dropped when none of them needs one.
  Var record(const char* op, Shape shape, std::vector<double> value, std::initializer_list<Var> inputs,
             BackwardFn backward) {
    return record(op, std::move(shape), std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                  std::move(backward));
  }

  Var record(const char* op, Shape shape, std::vector<double> value, std::span<const Var> inputs,
             BackwardFn backward) {
    check_finite(value, op);
    Node n;
    n.shape = std::move(shape);
    n.value = std::move(value);
    for (const Var& v : inputs) {
      assert(v.tape == this);
      if (nodes_[v.id].needs_grad) n.needs_grad = true;
    }
    if (n.needs_grad) n.backward = std::move(backward);
    return push(std::move(n));
  }

  /// Reverse sweep from a scalar `loss`. Intermediate gradients are reset on
  /// every call; leaf tensors accumulate, so repeated calls add up.
  void backward(Var loss) {
    if (loss.tape != this) throw ContractError("backward: loss belongs to a different tape");
    Node& root = nodes_[loss.id];
    if (root.value.size() != 1) throw ContractError("backward: loss must be a scalar, got " + to_string(root.shape));
    for (std::size_t i = 0; i <= loss.id; ++i) {
      Node& n = nodes_[i];
      if (n.needs_grad) n.grad.assign(n.value.size(), 0.0);
    }
    if (!root.needs_grad) return;
    root.grad[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad) continue;
      if (n.backward) n.backward(*this, i);
      if (n.leaf) {
        auto& dst = n.leaf->grad;
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += n.grad[k];
      }
    }
  }

  Node& node(std::size_t id) { return nodes_[id]; }
  const Node& node(std::size_t id) const { return nodes_[id]; }
  Node& node(Var v) { return nodes_[v.id]; }
  const Node& node(Var v) const { return nodes_[v.id]; }

  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }

  std::vector<double>& grad_of(Var v) { return nodes_[v.id].grad; }
  const std::vector<double>& value_of(Var v) const { return nodes_[v.id].value; }

  std::size_t size() const { return nodes_.size(); }

  void clear() { nodes_.clear(); }

 private:
  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  StopGradientMemo* memo_ = nullptr;
};

inline const Shape& Var::shape() const { return tape->node(id).shape; }
inline std::span<const double> Var::value() const { return tape->node(id).value; }
inline std::span<const double> Var::grad() const { return tape->node(id).grad; }
inline double Var::item() const {
  const auto& v = tape->node(id).value;
  if (v.size() != 1) throw ContractError("item: not a scalar " + to_string(tape->node(id).shape));
  return v[0];
}

}  // namespace poi
