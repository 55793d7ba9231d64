#pragma once

#include <functional>
#include <string>

#include "lkc/core/tensor_map.hpp"

namespace lkc {

template <Real T>
using LossFn = std::function<T(const TensorMap<T>&)>;

/// Central differences (f(p + h) - f(p - h)) / 2h for every coordinate of every
/// trainable tensor. Cost is two loss evaluations per coordinate, so keep the
/// parameter count small; meaningful only in 64-bit.
template <Real T>
NamedGrads<T> finite_diff_grad(const LossFn<T>& loss, const TensorMap<T>& params, T h = T(1e-5));

struct GradCheckReport {
  double max_rel_error = 0;   // max over coordinates of |a - n| / max(|a|, |n|, floor)
  double max_abs_error = 0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  std::size_t coordinates = 0;
};

/// Relative-error floor below which differences are measured absolutely.
inline constexpr double kGradCheckFloor = 1e-6;

template <Real T>
GradCheckReport compare_gradients(const NamedGrads<T>& analytic, const NamedGrads<T>& numeric,
                                  double floor = kGradCheckFloor);

}  // namespace lkc
