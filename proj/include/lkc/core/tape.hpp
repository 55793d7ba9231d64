#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "lkc/core/ops.hpp"

namespace lkc {

/// Reverse-mode recorder for the fixed op set in ops.hpp.
///
/// Every op appends a node holding its value and (when any input needs a
/// gradient) a closure that pushes the node's gradient to its inputs.
/// backward() replays the closures in reverse recording order, so gradient
/// accumulation order is fixed for a given forward pass.
template <Real T>
class Tape {
 public:
  struct Var {
    std::size_t id = 0;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor<T> value);
  /// Leaf whose gradient is tracked but which is not a named parameter.
  Var input(Tensor<T> value);
  Var param(std::string name, Tensor<T> value);

  const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
  /// Gradient after backward(); a zero tensor when the node was not reached.
  Tensor<T> grad(Var v) const;
  bool requires_grad(Var v) const { return nodes_.at(v.id).needs_grad; }

  Var conv2d(Var x, Var kernel, const ConvSpec& spec);
  Var conv2d(Var x, Var kernel, Var bias, const ConvSpec& spec);
  /// Normalizes with batch statistics; they are reported through stats_out so
  /// the caller can fold them into running statistics.
  Var batchnorm_train(Var x, Var gamma, Var beta, double eps, BatchStats<T>* stats_out = nullptr);
  Var batchnorm_eval(Var x, Var gamma, Var beta, const Tensor<T>& mean, const Tensor<T>& var, double eps);
  Var adaptive_avg_pool(Var x, std::size_t grid_h, std::size_t grid_w);
  Var reshape(Var x, Shape shape);
  /// [N, ...] -> [N, rest].
  Var flatten(Var x);
  Var linear(Var x, Var weight, Var bias);
  Var relu(Var x);
  Var dropout(Var x, double p, Rng& rng, bool active);
  Var add(Var a, Var b);
  /// Scalar mean smooth-L1 against a constant target.
  Var smooth_l1(Var pred, const Tensor<T>& target, double beta);
  /// Scalar sum(weights * x).
  Var weighted_sum(Var x, const Tensor<T>& weights);

  void backward(Var loss);

  /// Gradients of all named parameters, in registration order. Throws
  /// Error("non_finite") naming the first parameter with a non-finite entry.
  std::vector<std::pair<std::string, Tensor<T>>> param_grads() const;

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool needs_grad = false;
    std::function<void(const Tensor<T>&)> backward;
  };

  Var push(Tensor<T> value, bool needs_grad);
  bool any_needs_grad(std::initializer_list<Var> vars) const;
  void accumulate(Var v, const Tensor<T>& g);

  std::vector<Node> nodes_;
  std::vector<std::pair<std::string, std::size_t>> params_;
};

}  // namespace lkc
