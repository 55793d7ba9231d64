#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "lkc/core/lkc1.hpp"
#include "lkc/core/ops.hpp"

namespace lkc::reparam {

/// One bias-free convolution followed by batch norm. Kernels are square and
/// odd, padding is "same".
template <Real T>
struct BranchParams {
  Tensor<T> kernel;  // [C_out, C_in / groups, k, k]
  BatchNormParams<T> bn;
  ConvSpec spec;

  std::size_t kernel_size() const { return spec.kernel_h; }
  void validate() const;
};

/// Parallel conv+BN branches whose outputs are summed. Branch 0 holds the
/// largest kernel and sizes strictly decrease.
template <Real T>
struct ParallelBlockParams {
  std::vector<BranchParams<T>> branches;

  const ConvSpec& spec() const { return branches.front().spec; }
  void validate() const;
};

/// A single convolution with bias that replaces a whole parallel block.
template <Real T>
struct FusedConvParams {
  Tensor<T> kernel;
  Tensor<T> bias;  // [C_out]
};

/// BN(conv(x, K)) == conv(x, K') + b' with K' = (gamma / sigma) K and
/// b' = beta - mu * gamma / sigma, sigma = sqrt(running_var + eps).
template <Real T>
FusedConvParams<T> fold_bn(const BranchParams<T>& branch);

/// Centers a [.., k, k] kernel in a zero [.., target, target] kernel.
template <Real T>
Tensor<T> pad_kernel(const Tensor<T>& small, std::size_t target_k);

/// Sum of zero-padded kernels (aligned at the center) and sum of biases.
template <Real T>
FusedConvParams<T> fuse_branches(std::span<const FusedConvParams<T>> folded);

template <Real T>
Tensor<T> parallel_forward(const Tensor<T>& x, const ParallelBlockParams<T>& block, Mode mode);

template <Real T>
Tensor<T> fused_forward(const Tensor<T>& x, const FusedConvParams<T>& fused, const ConvSpec& spec);

/// fold_bn on every branch (running statistics), then fuse_branches.
template <Real T>
FusedConvParams<T> reparam_pipeline(const ParallelBlockParams<T>& pretrained);

struct EquivalenceInput {
  std::size_t batch = 2;
  std::size_t height = 16;
  std::size_t width = 16;
};

/// Max over n_trials random N(0,1) inputs of max|parallel_forward - fused_forward|
/// with both sides in eval mode.
template <Real T>
T verify_equivalence(const ParallelBlockParams<T>& block, const FusedConvParams<T>& fused, std::size_t n_trials,
                     Rng& rng, EquivalenceInput input = {});

/// Block with He-initialized kernels and randomized BN statistics, used by
/// tests and the `equiv` command.
template <Real T>
ParallelBlockParams<T> random_block(std::span<const std::size_t> kernel_sizes, std::size_t channels,
                                    std::size_t groups, Rng& rng);

// LKC1 naming: block{i}.branch{j}.kernel, block{i}.branch{j}.bn.{mean,var,weight,bias},
// block{i}.fused.kernel, block{i}.fused.bias.
std::string branch_prefix(std::size_t block, std::size_t branch);
std::string fused_prefix(std::size_t block);

template <Real T>
void store_block(TensorArchive& archive, std::size_t index, const ParallelBlockParams<T>& block);
/// Reads branches 0.. until one is missing. Channel counts are taken from the
/// kernel shapes; groups must be given since they are not recoverable for
/// every shape.
template <Real T>
ParallelBlockParams<T> load_block(const TensorArchive& archive, std::size_t index, std::size_t groups);
template <Real T>
void store_fused(TensorArchive& archive, std::size_t index, const FusedConvParams<T>& fused);
template <Real T>
FusedConvParams<T> load_fused(const TensorArchive& archive, std::size_t index);

}  // namespace lkc::reparam
