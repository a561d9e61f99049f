#pragma once

#include "wdlab/param_set.hpp"
#include "wdlab/tensor.hpp"

#include <functional>
#include <vector>

namespace wdlab {

/// Handle to a value recorded on a Tape.
struct Var {
  Index id = -1;
};

/// Append-only record of a forward computation. Node ids are topologically
/// ordered by construction (inputs always precede outputs), so the backward
/// sweep is a single reverse pass that visits each node exactly once.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, Index self)>;

  /// Record a constant input.
  Var leaf(Tensor value);

  /// Record a leaf bound to a ParamSet gradient slot: backward() accumulates
  /// this node's gradient into params.grad(index).
  Var param(ParamSet& params, std::size_t index);

  /// Record an op result. `backward` pulls grad(self) and pushes into the
  /// inputs' gradient arrays.
  Var record(Tensor value, std::vector<Index> inputs, BackwardFn backward);

  const Tensor& value(Var v) const { return node(v).value; }
  const Tensor& grad(Var v) const { return node(v).grad; }
  Tensor& grad_mut(Var v) { return node(v).grad; }

  Index size() const { return static_cast<Index>(nodes_.size()); }
  void clear() { nodes_.clear(); }

  /// Reverse-mode sweep from a scalar node. Node gradients are reset first,
  /// so repeated calls on one tape yield the gradient of each requested root
  /// alone; bound parameter slots accumulate across calls (callers zero them
  /// explicitly via ParamSet::zero_grads).
  void backward(Var loss);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<Index> inputs;
    BackwardFn backward;
    ParamSet* bound = nullptr;
    std::size_t bound_index = 0;
  };

  Node& node(Var v) {
    if (v.id < 0 || v.id >= size()) throw std::out_of_range("Tape: bad node id");
    return nodes_[static_cast<std::size_t>(v.id)];
  }
  const Node& node(Var v) const {
    if (v.id < 0 || v.id >= size()) throw std::out_of_range("Tape: bad node id");
    return nodes_[static_cast<std::size_t>(v.id)];
  }

  std::vector<Node> nodes_;
};

// Recorded operations. Each returns the output node; backward rules
// accumulate (+=) into input gradients so fan-out sums naturally.

/// [m x k] * [k x n] -> [m x n]. Backward: da += g b^T, db += a^T g.
Var matmul(Tape& t, Var a, Var b);

/// Elementwise sum of same-shape tensors.
Var add(Tape& t, Var a, Var b);

/// [b x n] + [n], the bias broadcast.
Var add_row_broadcast(Tape& t, Var x, Var row);

/// Elementwise max(0, x). Gradient passes where x > 0.
Var relu(Tape& t, Var x);

/// Per-feature batch standardization followed by affine scale/shift.
/// Training-mode statistics only; batch size must be >= 2.
Var batch_norm(Tape& t, Var x, Var gamma, Var beta, double eps);

/// Sum of all entries -> scalar.
Var sum(Tape& t, Var x);

/// x * c elementwise.
Var scale(Tape& t, Var x, double c);

/// x^2 elementwise.
Var square(Tape& t, Var x);

struct CrossEntropyParts {
  Var loss;      // loss_pos + loss_neg, the minimized mean cross-entropy
  Var loss_pos;  // -(1/b) sum_i logits[i, label_i]
  Var loss_neg;  // (1/b) sum_i log sum_j exp(logits[i, j])
};

/// Mean softmax cross-entropy split into the correct-class term and the
/// log-partition term. Both parts are separate differentiable roots so their
/// gradients can be extracted independently; loss_neg never reads labels.
CrossEntropyParts cross_entropy_split(Tape& t, Var logits,
                                      const std::vector<int>& labels);

}  // namespace wdlab
