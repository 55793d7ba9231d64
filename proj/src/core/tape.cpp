#include "lkc/core/tape.hpp"

#include <string>

namespace lkc {

template <Real T>
typename Tape<T>::Var Tape<T>::push(Tensor<T> value, bool needs_grad) {
  Node node;
  node.value = std::move(value);
  node.needs_grad = needs_grad;
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

template <Real T>
bool Tape<T>::any_needs_grad(std::initializer_list<Var> vars) const {
  for (Var v : vars)
    if (nodes_.at(v.id).needs_grad) return true;
  return false;
}

template <Real T>
void Tape<T>::accumulate(Var v, const Tensor<T>& g) {
  Node& node = nodes_[v.id];
  if (!node.needs_grad) return;
  if (node.grad.empty()) {
    node.grad = g;
    return;
  }
  for (std::size_t i = 0; i < g.size(); ++i) node.grad[i] += g[i];
}

template <Real T>
typename Tape<T>::Var Tape<T>::constant(Tensor<T> value) {
  return push(std::move(value), false);
}

template <Real T>
typename Tape<T>::Var Tape<T>::input(Tensor<T> value) {
  return push(std::move(value), true);
}

template <Real T>
typename Tape<T>::Var Tape<T>::param(std::string name, Tensor<T> value) {
  Var v = push(std::move(value), true);
  params_.emplace_back(std::move(name), v.id);
  return v;
}

template <Real T>
Tensor<T> Tape<T>::grad(Var v) const {
  const Node& node = nodes_.at(v.id);
  if (node.grad.empty()) return Tensor<T>(node.value.shape());
  return node.grad;
}

template <Real T>
typename Tape<T>::Var Tape<T>::conv2d(Var x, Var kernel, const ConvSpec& spec) {
  Var out = push(lkc::conv2d(value(x), value(kernel), spec), any_needs_grad({x, kernel}));
  if (nodes_[out.id].needs_grad)
    nodes_[out.id].backward = [this, x, kernel, spec](const Tensor<T>& g) {
      ConvGrads<T> grads = conv2d_backward(value(x), value(kernel), g, spec, false);
      accumulate(x, grads.input);
      accumulate(kernel, grads.kernel);
    };
  return out;
}

template <Real T>
typename Tape<T>::Var Tape<T>::conv2d(Var x, Var kernel, Var bias, const ConvSpec& spec) {
  Var out = push(lkc::conv2d(value(x), value(kernel), value(bias), spec), any_needs_grad({x, kernel, bias}));
  if (nodes_[out.id].needs_grad)
    nodes_[out.id].backward = [this, x, kernel, bias, spec](const Tensor<T>& g) {
      ConvGrads<T> grads = conv2d_backward(value(x), value(kernel), g, spec, true);
      accumulate(x, grads.input);
      accumulate(kernel, grads.kernel);
      accumulate(bias, grads.bias);
    };
  return out;
}

template <Real T>
typename Tape<T>::Var Tape<T>::batchnorm_train(Var x, Var gamma, Var beta, double eps,
                                               BatchStats<T>* stats_out) {
  BatchStats<T> stats = batch_statistics(value(x));
  Var out = push(batchnorm_apply(value(x), stats.mean, stats.var, value(gamma), value(beta), eps),
                 any_needs_grad({x, gamma, beta}));
  if (stats_out) *stats_out = stats;
  if (nodes_[out.id].needs_grad)
    nodes_[out.id].backward = [this, x, gamma, beta, eps, stats = std::move(stats)](const Tensor<T>& g) {
      AffineGrads<T> grads = batchnorm_backward_batch(value(x), g, stats, value(gamma), eps);
      accumulate(x, grads.input);
      accumulate(gamma, grads.weight);
      accumulate(beta, grads.bias);
    };
  return out;
}

template <Real T>
typename Tape<T>::Var Tape<T>::batchnorm_eval(Var x, Var gamma, Var beta, const Tensor<T>& mean,
                                              const Tensor<T>& var, double eps) {
  Var out = push(batchnorm_apply(value(x), mean, var, value(gamma), value(beta), eps),
                 any_needs_grad({x, gamma, beta}));
  if (nodes_[out.id].needs_grad)
    nodes_[out.id].backward = [this, x, gamma, beta, mean, var, eps](const Tensor<T>& g) {
      AffineGrads<T> grads = batchnorm_backward_fixed(value(x), g, mean, var, value(gamma), eps);
      accumulate(x, grads.input);
      accumulate(gamma, grads.weight);
      accumulate(beta, grads.bias);
    };
  return out;
}

template <Real T>
typename Tape<T>::Var Tape<T>::adaptive_avg_pool(Var x, std::size_t grid_h, std::size_t grid_w) {
  Var out = push(lkc::adaptive_avg_pool(value(x), grid_h, grid_w), any_needs_grad({x}));
  if (nodes_[out.id].needs_grad)
    nodes_[out.id].backward = [this, x](const Tensor<T>& g) {
      accumulate(x, adaptive_avg_pool_backward(value(x).shape(), g));
    };
  return out;
}

template <Real T>
typename Tape<T>::Var Tape<T>::reshape(Var x, Shape shape) {
  Var out = push(value(x).reshaped(std::move(shape)), any_needs_grad({x}));
  if (nodes_[out.id].needs_grad)
    nodes_[out.id].backward = [this, x](const Tensor<T>& g) { accumulate(x, g.reshaped(value(x).shape())); };
  return out;
}

template <Real T>
typename Tape<T>::Var Tape<T>::flatten(Var x) {
  const Tensor<T>& v = value(x);
  require(v.rank() >= 1, "shape_mismatch", "flatten needs a batch axis");
  return reshape(x, {v.dim(0), v.size() / v.dim(0)});
}

template <Real T>
typename Tape<T>::Var Tape<T>::linear(Var x, Var weight, Var bias) {
  Var out = push(lkc::linear(value(x), LinearParams<T>{value(weight), value(bias)}),
                 any_needs_grad({x, weight, bias}));
  if (nodes_[out.id].needs_grad)
    nodes_[out.id].backward = [this, x, weight, bias](const Tensor<T>& g) {
      AffineGrads<T> grads = linear_backward(value(x), LinearParams<T>{value(weight), value(bias)}, g);
      accumulate(x, grads.input);
      accumulate(weight, grads.weight);
      accumulate(bias, grads.bias);
    };
  return out;
}

template <Real T>
typename Tape<T>::Var Tape<T>::relu(Var x) {
  Var out = push(lkc::relu(value(x)), any_needs_grad({x}));
  if (nodes_[out.id].needs_grad)
    nodes_[out.id].backward = [this, x](const Tensor<T>& g) { accumulate(x, relu_backward(value(x), g)); };
  return out;
}

template <Real T>
typename Tape<T>::Var Tape<T>::dropout(Var x, double p, Rng& rng, bool active) {
  DropoutResult<T> r = lkc::dropout(value(x), p, rng, active);
  Var out = push(std::move(r.output), any_needs_grad({x}));
  if (nodes_[out.id].needs_grad)
    nodes_[out.id].backward = [this, x, mask = std::move(r.mask)](const Tensor<T>& g) {
      Tensor<T> gx = g;
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] *= mask[i];
      accumulate(x, gx);
    };
  return out;
}

template <Real T>
typename Tape<T>::Var Tape<T>::add(Var a, Var b) {
  const Tensor<T>& va = value(a);
  const Tensor<T>& vb = value(b);
  require(va.shape() == vb.shape(), "shape_mismatch",
          "add: " + shape_string(va.shape()) + " vs " + shape_string(vb.shape()));
  Tensor<T> sum = va;
  for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += vb[i];
  Var out = push(std::move(sum), any_needs_grad({a, b}));
  if (nodes_[out.id].needs_grad)
    nodes_[out.id].backward = [this, a, b](const Tensor<T>& g) {
      accumulate(a, g);
      accumulate(b, g);
    };
  return out;
}

template <Real T>
typename Tape<T>::Var Tape<T>::smooth_l1(Var pred, const Tensor<T>& target, double beta) {
  const T loss = lkc::smooth_l1(value(pred), target, beta);
  Var out = push(Tensor<T>({1}, loss), any_needs_grad({pred}));
  if (nodes_[out.id].needs_grad)
    nodes_[out.id].backward = [this, pred, target, beta](const Tensor<T>& g) {
      Tensor<T> gp = smooth_l1_grad(value(pred), target, beta);
      for (T& v : gp.values()) v *= g[0];
      accumulate(pred, gp);
    };
  return out;
}

template <Real T>
typename Tape<T>::Var Tape<T>::weighted_sum(Var x, const Tensor<T>& weights) {
  const Tensor<T>& v = value(x);
  require(v.size() == weights.size(), "shape_mismatch", "weighted_sum: size mismatch");
  double acc = 0;
  for (std::size_t i = 0; i < v.size(); ++i) acc += static_cast<double>(v[i]) * weights[i];
  Var out = push(Tensor<T>({1}, static_cast<T>(acc)), any_needs_grad({x}));
  if (nodes_[out.id].needs_grad)
    nodes_[out.id].backward = [this, x, weights](const Tensor<T>& g) {
      Tensor<T> gx = weights.reshaped(value(x).shape());
      for (T& w : gx.values()) w *= g[0];
      accumulate(x, gx);
    };
  return out;
}

template <Real T>
void Tape<T>::backward(Var loss) {
  require(value(loss).size() == 1, "invalid_argument", "backward() needs a scalar loss");
  for (Node& node : nodes_) node.grad = Tensor<T>();
  accumulate(loss, Tensor<T>(value(loss).shape(), T{1}));
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (node.grad.empty() || !node.backward) continue;
    node.backward(node.grad);
  }
}

template <Real T>
std::vector<std::pair<std::string, Tensor<T>>> Tape<T>::param_grads() const {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  out.reserve(params_.size());
  for (const auto& [name, id] : params_) {
    Tensor<T> g = grad(Var{id});
    require(g.all_finite(), "non_finite", "non-finite gradient for parameter '" + name + "'");
    out.emplace_back(name, std::move(g));
  }
  return out;
}

template class Tape<float>;
template class Tape<double>;

}  // namespace lkc
