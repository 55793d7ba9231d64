#include "lkc/core/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace lkc {

template <Real T>
NamedGrads<T> finite_diff_grad(const LossFn<T>& loss, const TensorMap<T>& params, T h) {
  require(h > T{0}, "invalid_argument", "finite difference step must be positive");
  TensorMap<T> probe = params;
  NamedGrads<T> out;
  for (auto& entry : probe.entries()) {
    if (!entry.trainable) continue;
    Tensor<T> g(entry.tensor.shape());
    for (std::size_t i = 0; i < entry.tensor.size(); ++i) {
      const T saved = entry.tensor[i];
      entry.tensor[i] = saved + h;
      const T up = loss(probe);
      entry.tensor[i] = saved - h;
      const T down = loss(probe);
      entry.tensor[i] = saved;
      g[i] = (up - down) / (T{2} * h);
    }
    out.emplace_back(entry.name, std::move(g));
  }
  return out;
}

template <Real T>
GradCheckReport compare_gradients(const NamedGrads<T>& analytic, const NamedGrads<T>& numeric, double floor) {
  GradCheckReport report;
  for (const auto& [name, num] : numeric) {
    auto it = std::find_if(analytic.begin(), analytic.end(), [&](const auto& p) { return p.first == name; });
    require(it != analytic.end(), "missing_tensor", "no analytic gradient for '" + name + "'");
    const Tensor<T>& ana = it->second;
    require(ana.shape() == num.shape(), "shape_mismatch", "gradient shape mismatch for '" + name + "'");
    for (std::size_t i = 0; i < num.size(); ++i) {
      const double a = ana[i], n = num[i];
      const double abs_err = std::abs(a - n);
      const double rel = abs_err / std::max({std::abs(a), std::abs(n), floor});
      report.max_abs_error = std::max(report.max_abs_error, abs_err);
      if (rel > report.max_rel_error || report.coordinates == 0) {
        report.max_rel_error = rel;
        report.worst_parameter = name;
        report.worst_index = i;
      }
      ++report.coordinates;
    }
  }
  return report;
}

template NamedGrads<float> finite_diff_grad(const LossFn<float>&, const TensorMap<float>&, float);
template NamedGrads<double> finite_diff_grad(const LossFn<double>&, const TensorMap<double>&, double);
template GradCheckReport compare_gradients(const NamedGrads<float>&, const NamedGrads<float>&, double);
template GradCheckReport compare_gradients(const NamedGrads<double>&, const NamedGrads<double>&, double);

}  // namespace lkc
