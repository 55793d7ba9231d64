#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "lkc/core/lkc1.hpp"
#include "lkc/core/tape.hpp"
#include "lkc/core/tensor_map.hpp"
#include "lkc/model/config.hpp"

namespace lkc::model {

/// train: batch-statistics BN, dropout on. eval: running BN, dropout off.
/// mc: running BN, dropout on.
enum class ForwardMode { kTrain, kEval, kMc };

/// Named parameters of the whole counter. BN running statistics live in the
/// same map as non-trainable entries.
///
/// Naming:
///   stem.conv.kernel, stem.bn.{weight,bias,mean,var}
///   stage{s}.down.conv.kernel, stage{s}.down.bn.*       (when present)
///   block{i}.branch{j}.kernel, block{i}.branch{j}.bn.*   (parallel mode)
///   block{i}.fused.kernel, block{i}.fused.bias           (fused mode)
///   block{i}.expand.kernel, block{i}.expand.bn.*
///   block{i}.project.kernel, block{i}.project.bias
///   head.fc1.weight, head.fc1.bias, head.fc2.weight, head.fc2.bias
/// Block indices run over all stages.
template <Real T>
struct ModelParams {
  ModelConfig config;
  TensorMap<T> tensors;

  std::size_t parameter_count() const { return tensors.trainable_values(); }
  bool operator==(const ModelParams&) const = default;
};

template <Real T>
ModelParams<T> build_model(const ModelConfig& config, Rng& rng);

/// True when a stage starts with a strided / channel-changing 3x3 conv.
bool has_transition(const ModelConfig& config, std::size_t stage);

template <Real T>
using BnStats = std::vector<std::pair<std::string, BatchStats<T>>>;

template <Real T>
struct ForwardOptions {
  ForwardMode mode = ForwardMode::kEval;
  /// Register parameters as tape parameters (gradients tracked) or constants.
  bool track_params = true;
  /// Train mode only: batch statistics per BN prefix (e.g. "stem.bn.").
  BnStats<T>* bn_stats = nullptr;
  /// When set, the batch is recorded as a gradient-tracked input and its
  /// variable is stored here.
  typename Tape<T>::Var* input_var = nullptr;
  /// When set, receives the final feature map (the head's input).
  typename Tape<T>::Var* features_var = nullptr;
};

/// Records the forward pass of a batch [N, C, H, W] and returns the [N]
/// predictions. Throws Error("input_too_small") when the final feature map
/// would be smaller than the pool grid.
template <Real T>
typename Tape<T>::Var forward(Tape<T>& tape, const ModelParams<T>& params, const Tensor<T>& batch, Rng& rng,
                              const ForwardOptions<T>& options = {});

/// Untracked forward; returns [N] predictions.
template <Real T>
Tensor<T> predict(const ModelParams<T>& params, const Tensor<T>& batch, ForwardMode mode, Rng& rng);

/// Folds batch statistics from a train-mode forward into the running ones.
template <Real T>
void apply_bn_updates(ModelParams<T>& params, const BnStats<T>& stats, double momentum = 0.1);

/// Model-wide re-parameterization: every parallel block is replaced by its
/// fused kernel + bias (running statistics are used).
template <Real T>
ModelParams<T> fuse_model(const ModelParams<T>& params);

template <Real T>
struct McPrediction {
  Tensor<T> mean;  // [N]
  Tensor<T> std;   // [N], population std over the T passes
};

template <Real T>
McPrediction<T> mc_predict(const ModelParams<T>& params, const Tensor<T>& batch, std::size_t passes, Rng& rng);

/// Smallest square input the model accepts.
std::size_t min_input_extent(const ModelConfig& config);

// Checkpoints: all tensors (stored as f32 or f64 by T) plus a `config` text
// entry holding the model config as JSON.
template <Real T>
TensorArchive to_archive(const ModelParams<T>& params);
/// Rebuilds the parameter layout from the embedded config and fills every
/// tensor from the archive; missing or mis-shaped entries are errors.
template <Real T>
ModelParams<T> from_archive(const TensorArchive& archive);

template <Real T>
void save_checkpoint(const ModelParams<T>& params, const std::filesystem::path& path);
template <Real T>
ModelParams<T> load_checkpoint(const std::filesystem::path& path);

}  // namespace lkc::model
