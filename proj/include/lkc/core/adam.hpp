#pragma once

#include <cstddef>
#include <map>
#include <string>

#include "lkc/core/tensor_map.hpp"

namespace lkc {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <Real T>
struct AdamState {
  AdamConfig config;
  std::size_t step = 0;
  std::map<std::string, Tensor<T>> first_moment;
  std::map<std::string, Tensor<T>> second_moment;
};

/// One bias-corrected Adam update of every parameter that has a gradient.
/// Moment buffers are created lazily (zero) on first use.
template <Real T>
void adam_step(TensorMap<T>& params, const NamedGrads<T>& grads, AdamState<T>& state);

}  // namespace lkc
