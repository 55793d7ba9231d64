#pragma once

#include <cstddef>
#include <utility>

#include "lkc/core/rng.hpp"
#include "lkc/core/tensor.hpp"

namespace lkc {

enum class Mode { kTrain, kEval };

/// Geometry of a 2-D (grouped) convolution over NCHW tensors.
struct ConvSpec {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  std::size_t stride = 1;
  bool same_padding = true;  // pad = kernel / 2, odd kernels only
  std::size_t pad_h = 0;     // explicit padding when same_padding is false
  std::size_t pad_w = 0;
  std::size_t groups = 1;

  static ConvSpec same(std::size_t in, std::size_t out, std::size_t kernel, std::size_t groups = 1,
                       std::size_t stride = 1);
  static ConvSpec padded(std::size_t in, std::size_t out, std::size_t kernel_h, std::size_t kernel_w,
                         std::size_t pad_h, std::size_t pad_w, std::size_t stride = 1,
                         std::size_t groups = 1);

  std::size_t padding_h() const { return same_padding ? kernel_h / 2 : pad_h; }
  std::size_t padding_w() const { return same_padding ? kernel_w / 2 : pad_w; }
  bool depthwise() const { return groups == in_channels && groups == out_channels; }
  Shape kernel_shape() const { return {out_channels, in_channels / groups, kernel_h, kernel_w}; }

  /// Output extent along one axis; throws when the kernel does not fit.
  std::size_t out_extent(std::size_t in, std::size_t kernel, std::size_t pad) const;
  std::size_t out_h(std::size_t h) const { return out_extent(h, kernel_h, padding_h()); }
  std::size_t out_w(std::size_t w) const { return out_extent(w, kernel_w, padding_w()); }

  void validate() const;
  bool operator==(const ConvSpec&) const = default;
};

/// Per-channel batch normalization state. eps and momentum follow the usual
/// framework defaults.
template <Real T>
struct BatchNormParams {
  Tensor<T> mean;   // running mean
  Tensor<T> var;    // running (biased) variance
  Tensor<T> gamma;
  Tensor<T> beta;
  double eps = 1e-5;
  double momentum = 0.1;

  static BatchNormParams identity(std::size_t channels);
  std::size_t channels() const { return gamma.size(); }
  void validate() const;
};

template <Real T>
struct BatchStats {
  Tensor<T> mean;
  Tensor<T> var;  // biased
};

template <Real T>
struct LinearParams {
  Tensor<T> weight;  // [out, in]
  Tensor<T> bias;    // [out]
};

template <Real T>
struct ConvGrads {
  Tensor<T> input;
  Tensor<T> kernel;
  Tensor<T> bias;
};

template <Real T>
struct AffineGrads {
  Tensor<T> input;
  Tensor<T> weight;  // gamma for batch norm
  Tensor<T> bias;    // beta for batch norm
};

template <Real T>
struct DropoutResult {
  Tensor<T> output;
  Tensor<T> mask;  // 0 or 1/(1-p) per element
};

// Convolution (cross-correlation, zero padding).
template <Real T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const ConvSpec& spec);
template <Real T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                 const ConvSpec& spec);
template <Real T>
ConvGrads<T> conv2d_backward(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& grad_out,
                             const ConvSpec& spec, bool with_bias);

// Batch normalization.
template <Real T>
BatchStats<T> batch_statistics(const Tensor<T>& input);
template <Real T>
Tensor<T> batchnorm_apply(const Tensor<T>& input, const Tensor<T>& mean, const Tensor<T>& var,
                          const Tensor<T>& gamma, const Tensor<T>& beta, double eps);
template <Real T>
void update_running_stats(BatchNormParams<T>& params, const BatchStats<T>& stats);
/// Eval mode uses running statistics and leaves them untouched; train mode
/// normalizes with batch statistics and folds them into the running ones.
template <Real T>
Tensor<T> batchnorm(const Tensor<T>& input, BatchNormParams<T>& params, Mode mode,
                    BatchStats<T>* batch_stats_out = nullptr);
template <Real T>
Tensor<T> batchnorm_eval(const Tensor<T>& input, const BatchNormParams<T>& params);
/// Gradient with the statistics held fixed (eval mode).
template <Real T>
AffineGrads<T> batchnorm_backward_fixed(const Tensor<T>& input, const Tensor<T>& grad_out,
                                        const Tensor<T>& mean, const Tensor<T>& var,
                                        const Tensor<T>& gamma, double eps);
/// Gradient through the batch statistics (train mode).
template <Real T>
AffineGrads<T> batchnorm_backward_batch(const Tensor<T>& input, const Tensor<T>& grad_out,
                                        const BatchStats<T>& stats, const Tensor<T>& gamma, double eps);

// Pooling.
template <Real T>
Tensor<T> adaptive_avg_pool(const Tensor<T>& input, std::size_t grid_h, std::size_t grid_w);
template <Real T>
Tensor<T> adaptive_avg_pool_backward(const Shape& input_shape, const Tensor<T>& grad_out);

// Fully connected.
template <Real T>
Tensor<T> linear(const Tensor<T>& input, const LinearParams<T>& params);
template <Real T>
AffineGrads<T> linear_backward(const Tensor<T>& input, const LinearParams<T>& params,
                               const Tensor<T>& grad_out);

template <Real T>
Tensor<T> relu(const Tensor<T>& input);
template <Real T>
Tensor<T> relu_backward(const Tensor<T>& input, const Tensor<T>& grad_out);

/// Inverted dropout. With active == false (or p == 0) the op is the identity.
template <Real T>
DropoutResult<T> dropout(const Tensor<T>& input, double p, Rng& rng, bool active);

/// Mean smooth-L1 over the batch.
template <Real T>
T smooth_l1(const Tensor<T>& pred, const Tensor<T>& target, double beta = 1.0);
template <Real T>
Tensor<T> smooth_l1_grad(const Tensor<T>& pred, const Tensor<T>& target, double beta = 1.0);

/// Normal(0, sqrt(2 / fan_in)) initialization.
template <Real T>
Tensor<T> he_normal(Shape shape, std::size_t fan_in, Rng& rng);

}  // namespace lkc
