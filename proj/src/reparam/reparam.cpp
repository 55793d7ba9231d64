#include "lkc/reparam/reparam.hpp"

#include <algorithm>
#include <cmath>

namespace lkc::reparam {

template <Real T>
void BranchParams<T>::validate() const {
  spec.validate();
  require(spec.same_padding, "invalid_argument", "re-param branches must use 'same' padding");
  require(spec.kernel_h == spec.kernel_w && spec.kernel_h % 2 == 1, "invalid_argument",
          "re-param branches need square odd kernels");
  require(kernel.shape() == spec.kernel_shape(), "shape_mismatch",
          "branch kernel " + shape_string(kernel.shape()) + " does not match spec " +
              shape_string(spec.kernel_shape()));
  bn.validate();
  require(bn.channels() == spec.out_channels, "shape_mismatch",
          "branch BN has " + std::to_string(bn.channels()) + " channels, conv produces " +
              std::to_string(spec.out_channels));
}

template <Real T>
void ParallelBlockParams<T>::validate() const {
  require(branches.size() >= 2, "invalid_argument", "a parallel block needs at least two branches");
  const ConvSpec& first = branches.front().spec;
  for (std::size_t i = 0; i < branches.size(); ++i) {
    const BranchParams<T>& b = branches[i];
    b.validate();
    require(b.spec.stride == first.stride && b.spec.groups == first.groups &&
                b.spec.in_channels == first.in_channels && b.spec.out_channels == first.out_channels,
            "invalid_argument", "parallel branches must share stride, groups and channel counts");
    if (i > 0)
      require(b.kernel_size() < branches[i - 1].kernel_size(), "invalid_argument",
              "parallel branch kernel sizes must strictly decrease from branch 0");
  }
}

template <Real T>
FusedConvParams<T> fold_bn(const BranchParams<T>& branch) {
  branch.validate();
  const std::size_t out_c = branch.spec.out_channels;
  const std::size_t per_oc = branch.kernel.size() / out_c;
  FusedConvParams<T> fused{branch.kernel, Tensor<T>({out_c})};
  for (std::size_t oc = 0; oc < out_c; ++oc) {
    const double sigma = std::sqrt(static_cast<double>(branch.bn.var[oc]) + branch.bn.eps);
    const double scale = branch.bn.gamma[oc] / sigma;
    for (std::size_t i = 0; i < per_oc; ++i) {
      T& k = fused.kernel[oc * per_oc + i];
      k = static_cast<T>(scale * k);
    }
    fused.bias[oc] = static_cast<T>(branch.bn.beta[oc] - branch.bn.mean[oc] * scale);
  }
  return fused;
}

template <Real T>
Tensor<T> pad_kernel(const Tensor<T>& small, std::size_t target_k) {
  require(small.rank() == 4, "shape_mismatch", "pad_kernel expects a 4-D kernel");
  const std::size_t k = small.dim(2);
  require(small.dim(3) == k, "invalid_argument", "pad_kernel expects square kernels");
  require(k % 2 == 1 && target_k % 2 == 1, "invalid_argument",
          "pad_kernel needs odd sizes, got " + std::to_string(k) + " -> " + std::to_string(target_k));
  require(k <= target_k, "invalid_argument",
          "pad_kernel cannot shrink " + std::to_string(k) + " to " + std::to_string(target_k));
  if (k == target_k) return small;
  const std::size_t border = (target_k - k) / 2;
  const std::size_t planes = small.dim(0) * small.dim(1);
  Tensor<T> out({small.dim(0), small.dim(1), target_k, target_k});
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < k; ++y)
      for (std::size_t x = 0; x < k; ++x)
        out[(p * target_k + y + border) * target_k + x + border] = small[(p * k + y) * k + x];
  return out;
}

template <Real T>
FusedConvParams<T> fuse_branches(std::span<const FusedConvParams<T>> folded) {
  require(!folded.empty(), "invalid_argument", "fuse_branches needs at least one branch");
  std::size_t target = 0;
  for (const auto& f : folded) {
    require(f.kernel.rank() == 4, "shape_mismatch", "fused kernels must be 4-D");
    target = std::max(target, f.kernel.dim(2));
  }
  const Shape& ref = folded.front().kernel.shape();
  FusedConvParams<T> out{Tensor<T>({ref[0], ref[1], target, target}), Tensor<T>({ref[0]})};
  for (const auto& f : folded) {
    require(f.kernel.dim(0) == ref[0] && f.kernel.dim(1) == ref[1], "invalid_argument",
            "fuse_branches: branches disagree on channels/groups (" + shape_string(f.kernel.shape()) +
                " vs " + shape_string(ref) + ")");
    require(f.bias.size() == ref[0], "shape_mismatch", "fuse_branches: bias length mismatch");
    const Tensor<T> padded = pad_kernel(f.kernel, target);
    for (std::size_t i = 0; i < padded.size(); ++i) out.kernel[i] += padded[i];
    for (std::size_t i = 0; i < ref[0]; ++i) out.bias[i] += f.bias[i];
  }
  return out;
}

template <Real T>
Tensor<T> parallel_forward(const Tensor<T>& x, const ParallelBlockParams<T>& block, Mode mode) {
  block.validate();
  Tensor<T> sum;
  for (const BranchParams<T>& b : block.branches) {
    const Tensor<T> conv = conv2d(x, b.kernel, b.spec);
    Tensor<T> y;
    if (mode == Mode::kEval) {
      y = batchnorm_eval(conv, b.bn);
    } else {
      const BatchStats<T> stats = batch_statistics(conv);
      y = batchnorm_apply(conv, stats.mean, stats.var, b.bn.gamma, b.bn.beta, b.bn.eps);
    }
    if (sum.empty()) {
      sum = std::move(y);
    } else {
      for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += y[i];
    }
  }
  return sum;
}

template <Real T>
Tensor<T> fused_forward(const Tensor<T>& x, const FusedConvParams<T>& fused, const ConvSpec& spec) {
  return conv2d(x, fused.kernel, fused.bias, spec);
}

template <Real T>
FusedConvParams<T> reparam_pipeline(const ParallelBlockParams<T>& pretrained) {
  pretrained.validate();
  std::vector<FusedConvParams<T>> folded;
  folded.reserve(pretrained.branches.size());
  for (const BranchParams<T>& b : pretrained.branches) folded.push_back(fold_bn(b));
  return fuse_branches<T>(folded);
}

template <Real T>
T verify_equivalence(const ParallelBlockParams<T>& block, const FusedConvParams<T>& fused, std::size_t n_trials,
                     Rng& rng, EquivalenceInput input) {
  block.validate();
  ConvSpec spec = block.spec();
  spec.kernel_h = spec.kernel_w = fused.kernel.dim(2);
  T worst = 0;
  for (std::size_t t = 0; t < n_trials; ++t) {
    Tensor<T> x({input.batch, spec.in_channels, input.height, input.width});
    for (T& v : x.values()) v = static_cast<T>(rng.normal());
    const Tensor<T> a = parallel_forward(x, block, Mode::kEval);
    const Tensor<T> b = fused_forward(x, fused, spec);
    worst = std::max(worst, max_abs_diff(a, b));
  }
  return worst;
}

template <Real T>
ParallelBlockParams<T> random_block(std::span<const std::size_t> kernel_sizes, std::size_t channels,
                                    std::size_t groups, Rng& rng) {
  ParallelBlockParams<T> block;
  for (std::size_t k : kernel_sizes) {
    BranchParams<T> b;
    b.spec = ConvSpec::same(channels, channels, k, groups);
    b.kernel = he_normal<T>(b.spec.kernel_shape(), (channels / groups) * k * k, rng);
    b.bn = BatchNormParams<T>::identity(channels);
    for (std::size_t c = 0; c < channels; ++c) {
      b.bn.mean[c] = static_cast<T>(0.5 * rng.normal());
      b.bn.var[c] = static_cast<T>(rng.uniform(0.25, 2.0));
      b.bn.gamma[c] = static_cast<T>(rng.uniform(0.5, 1.5));
      b.bn.beta[c] = static_cast<T>(0.5 * rng.normal());
    }
    block.branches.push_back(std::move(b));
  }
  block.validate();
  return block;
}

std::string branch_prefix(std::size_t block, std::size_t branch) {
  return "block" + std::to_string(block) + ".branch" + std::to_string(branch) + ".";
}

std::string fused_prefix(std::size_t block) { return "block" + std::to_string(block) + ".fused."; }

template <Real T>
void store_block(TensorArchive& archive, std::size_t index, const ParallelBlockParams<T>& block) {
  for (std::size_t j = 0; j < block.branches.size(); ++j) {
    const std::string p = branch_prefix(index, j);
    const BranchParams<T>& b = block.branches[j];
    archive.put(p + "kernel", b.kernel);
    archive.put(p + "bn.mean", b.bn.mean);
    archive.put(p + "bn.var", b.bn.var);
    archive.put(p + "bn.weight", b.bn.gamma);
    archive.put(p + "bn.bias", b.bn.beta);
  }
}

template <Real T>
ParallelBlockParams<T> load_block(const TensorArchive& archive, std::size_t index, std::size_t groups) {
  ParallelBlockParams<T> block;
  for (std::size_t j = 0; archive.contains(branch_prefix(index, j) + "kernel"); ++j) {
    const std::string p = branch_prefix(index, j);
    BranchParams<T> b;
    b.kernel = archive.tensor<T>(p + "kernel");
    require(b.kernel.rank() == 4, "format", "branch kernel must be 4-D");
    b.spec = ConvSpec::same(b.kernel.dim(1) * groups, b.kernel.dim(0), b.kernel.dim(2), groups);
    b.bn.mean = archive.tensor<T>(p + "bn.mean");
    b.bn.var = archive.tensor<T>(p + "bn.var");
    b.bn.gamma = archive.tensor<T>(p + "bn.weight");
    b.bn.beta = archive.tensor<T>(p + "bn.bias");
    block.branches.push_back(std::move(b));
  }
  block.validate();
  return block;
}

template <Real T>
void store_fused(TensorArchive& archive, std::size_t index, const FusedConvParams<T>& fused) {
  archive.put(fused_prefix(index) + "kernel", fused.kernel);
  archive.put(fused_prefix(index) + "bias", fused.bias);
}

template <Real T>
FusedConvParams<T> load_fused(const TensorArchive& archive, std::size_t index) {
  return {archive.tensor<T>(fused_prefix(index) + "kernel"), archive.tensor<T>(fused_prefix(index) + "bias")};
}

#define LKC_INSTANTIATE_REPARAM(T)                                                                         \
  template struct BranchParams<T>;                                                                         \
  template struct ParallelBlockParams<T>;                                                                  \
  template FusedConvParams<T> fold_bn(const BranchParams<T>&);                                             \
  template Tensor<T> pad_kernel(const Tensor<T>&, std::size_t);                                            \
  template FusedConvParams<T> fuse_branches(std::span<const FusedConvParams<T>>);                          \
  template Tensor<T> parallel_forward(const Tensor<T>&, const ParallelBlockParams<T>&, Mode);              \
  template Tensor<T> fused_forward(const Tensor<T>&, const FusedConvParams<T>&, const ConvSpec&);          \
  template FusedConvParams<T> reparam_pipeline(const ParallelBlockParams<T>&);                             \
  template T verify_equivalence(const ParallelBlockParams<T>&, const FusedConvParams<T>&, std::size_t,     \
                                Rng&, EquivalenceInput);                                                   \
  template ParallelBlockParams<T> random_block(std::span<const std::size_t>, std::size_t, std::size_t,     \
                                               Rng&);                                                      \
  template void store_block(TensorArchive&, std::size_t, const ParallelBlockParams<T>&);                   \
  template ParallelBlockParams<T> load_block(const TensorArchive&, std::size_t, std::size_t);              \
  template void store_fused(TensorArchive&, std::size_t, const FusedConvParams<T>&);                       \
  template FusedConvParams<T> load_fused(const TensorArchive&, std::size_t);

LKC_INSTANTIATE_REPARAM(float)
LKC_INSTANTIATE_REPARAM(double)

}  // namespace lkc::reparam
