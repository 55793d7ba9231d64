#include "lkc/core/adam.hpp"

#include <cmath>

namespace lkc {

template <Real T>
void adam_step(TensorMap<T>& params, const NamedGrads<T>& grads, AdamState<T>& state) {
  const AdamConfig& c = state.config;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double correct1 = 1.0 - std::pow(c.beta1, t);
  const double correct2 = 1.0 - std::pow(c.beta2, t);

  for (const auto& [name, g] : grads) {
    Tensor<T>& p = params.at(name);
    require(p.shape() == g.shape(), "shape_mismatch", "adam: gradient shape mismatch for '" + name + "'");
    auto [mit, m_new] = state.first_moment.try_emplace(name, p.shape());
    auto [vit, v_new] = state.second_moment.try_emplace(name, p.shape());
    Tensor<T>& m = mit->second;
    Tensor<T>& v = vit->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      const double mi = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
      const double vi = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double update = c.lr * (mi / correct1) / (std::sqrt(vi / correct2) + c.eps);
      p[i] = static_cast<T>(p[i] - update);
    }
  }
}

template void adam_step(TensorMap<float>&, const NamedGrads<float>&, AdamState<float>&);
template void adam_step(TensorMap<double>&, const NamedGrads<double>&, AdamState<double>&);

}  // namespace lkc
