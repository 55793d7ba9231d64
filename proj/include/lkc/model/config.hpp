#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "json.hpp"

namespace lkc::model {

enum class BlockMode { kParallel, kFused };

std::string to_string(BlockMode mode);
BlockMode parse_block_mode(const std::string& text);

/// One stage: an optional 3x3 transition conv (when the stride is > 1 or the
/// channel count changes) followed by `blocks` large-kernel blocks.
struct StageConfig {
  std::size_t channels = 16;
  std::size_t blocks = 1;
  std::size_t large_kernel = 13;
  std::size_t small_kernel = 3;  // 0: the depthwise mixer has a single branch
  std::size_t stride = 2;
  bool operator==(const StageConfig&) const = default;
};

struct HeadConfig {
  std::size_t pool_h = 3;
  std::size_t pool_w = 3;
  std::size_t hidden = 128;
  double dropout = 0.5;
  bool operator==(const HeadConfig&) const = default;
};

struct ModelConfig {
  std::size_t input_channels = 1;
  std::size_t stem_channels = 16;  // 3x3 stride-2 stem
  std::vector<StageConfig> stages;
  std::size_t expansion = 2;  // pointwise expansion ratio inside a block
  HeadConfig head;
  BlockMode block_mode = BlockMode::kParallel;

  void validate() const;

  /// Product of all strides, stem included.
  std::size_t total_stride() const;
  /// Spatial extent of the final feature map for an input extent.
  std::size_t feature_extent(std::size_t input_extent) const;
  /// Smallest input extent whose feature map still covers the pool grid.
  std::size_t min_input(std::size_t pool_extent) const;
  std::size_t block_count() const;
  std::size_t final_channels() const;

  /// ~6.5e4-parameter desk model (96 px inputs).
  static ModelConfig desk();
  /// Mirror of the published head (9 x 9 pooling) on a larger stand-in backbone.
  static ModelConfig paper();
  /// A few hundred parameters; used for finite-difference checks.
  static ModelConfig tiny();
  static ModelConfig preset(const std::string& name);

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  bool operator==(const ModelConfig&) const = default;
};

}  // namespace lkc::model
