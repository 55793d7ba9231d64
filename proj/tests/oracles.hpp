#pragma once

#include <cmath>
#include <type_traits>
#include <cstddef>
#include <vector>

#include "lkc/core/ops.hpp"
#include "lkc/core/rng.hpp"
#include "lkc/core/tensor.hpp"

namespace lkc::test {

template <Real T>
Tensor<T> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor<T> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(scale * rng.normal());
  return t;
}

/// Nested-loop cross-correlation in double, written straight from the
/// definition: out[n,o,y,x] = b[o] + sum in[n, g*cpg + c, y*s - p + i, x*s - p + j] * k[o,c,i,j].
template <Real T>
Tensor<double> conv_reference(const Tensor<T>& in, const Tensor<T>& k, const std::type_identity_t<Tensor<T>>* bias,
                              const ConvSpec& s) {
  const std::size_t n = in.dim(0), h = in.dim(2), w = in.dim(3);
  const std::size_t ph = s.padding_h(), pw = s.padding_w();
  const std::size_t oh = (h + 2 * ph - s.kernel_h) / s.stride + 1, ow = (w + 2 * pw - s.kernel_w) / s.stride + 1;
  const std::size_t cin_g = s.in_channels / s.groups, cout_g = s.out_channels / s.groups;
  Tensor<double> out({n, s.out_channels, oh, ow});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < s.out_channels; ++o) {
      const std::size_t g = o / cout_g;
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
          double acc = bias ? static_cast<double>((*bias)[o]) : 0.0;
          for (std::size_t c = 0; c < cin_g; ++c)
            for (std::size_t i = 0; i < s.kernel_h; ++i)
              for (std::size_t j = 0; j < s.kernel_w; ++j) {
                const long iy = static_cast<long>(y * s.stride + i) - static_cast<long>(ph);
                const long ix = static_cast<long>(x * s.stride + j) - static_cast<long>(pw);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
                acc += static_cast<double>(in(b, g * cin_g + c, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix))) *
                       static_cast<double>(k(o, c, i, j));
              }
          out(b, o, y, x) = acc;
        }
    }
  return out;
}

template <Real A, Real B>
double max_diff(const Tensor<A>& a, const Tensor<B>& b) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return a.shape() == b.shape() ? worst : INFINITY;
}

/// Elementwise eval-mode batch norm.
template <Real T>
Tensor<double> bn_reference(const Tensor<T>& x, const BatchNormParams<T>& p) {
  Tensor<double> out(x.shape());
  const std::size_t c = x.dim(1), plane = x.size() / (x.dim(0) * c);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const std::size_t ch = (i / plane) % c;
    out[i] = static_cast<double>(p.gamma[ch]) * (static_cast<double>(x[i]) - static_cast<double>(p.mean[ch])) /
                 std::sqrt(static_cast<double>(p.var[ch]) + p.eps) +
             static_cast<double>(p.beta[ch]);
  }
  return out;
}

template <Real T>
BatchNormParams<T> random_bn(std::size_t channels, Rng& rng) {
  BatchNormParams<T> p = BatchNormParams<T>::identity(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    p.mean[c] = static_cast<T>(rng.normal());
    p.var[c] = static_cast<T>(rng.uniform(0.2, 2.0));
    p.gamma[c] = static_cast<T>(rng.uniform(0.5, 1.5));
    p.beta[c] = static_cast<T>(rng.normal());
  }
  return p;
}

}  // namespace lkc::test
