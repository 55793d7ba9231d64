#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "json.hpp"
#include "lkc/core/rng.hpp"
#include "lkc/data/sample.hpp"
#include "lkc/rsy/rsy.hpp"

namespace lkc::pipeline {

/// Fixed per-channel constants applied after augmentation.
struct Normalization {
  double mean = 0.45;
  double std = 0.225;
  bool operator==(const Normalization&) const = default;
};

enum class LrSchedule { kConstant, kCosine };

struct TrainConfig {
  std::size_t batch_size = 16;
  std::size_t crop = 96;
  double flip_probability = 0.5;
  bool rsy_enabled = false;
  rsy::RsyConfig rsy;
  double lr = 1e-3;
  LrSchedule schedule = LrSchedule::kCosine;
  std::size_t epochs = 12;
  std::uint64_t seed = 3035;
  double loss_beta = 1.0;
  std::size_t eval_batch = 50;
  Normalization normalization;
  /// Start the head's output bias at the mean training count.
  bool init_bias_to_mean = true;
  std::string checkpoint;  // best-val-MAE checkpoint path, empty: not written
  std::string log;         // key=value log path, empty: not written

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  static TrainConfig desk();
  /// Batch 24, crop 384, lr 1e-5, constant schedule.
  static TrainConfig paper();
  static TrainConfig preset(const std::string& name);
};

/// Keeps the centers inside [y0, y0 + h) x [x0, x0 + w) (shifted into the
/// crop) and recounts.
Sample crop(const Sample& sample, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w);
/// Mirror along the width: x -> W - x for centers.
Sample flip_horizontal(const Sample& sample);
/// Zero-pads bottom and right up to the next multiple (centers unchanged).
Sample pad_to_multiple(const Sample& sample, std::size_t multiple);
Tensor<float> normalize(const Tensor<float>& image, const Normalization& norm);

/// Number of centers with y0 <= y < y0 + h and x0 <= x < x0 + w.
std::size_t count_inside(const Sample& sample, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w);

enum class Phase { kTrain, kEval };

struct Prepared {
  Tensor<float> image;  // normalized [C, H, W]
  double count = 0;
};

/// Train: random crop (recounted), horizontal flip, optional RSY, normalize.
/// Eval: pad to `multiple`, normalize.
Prepared preprocess(const Sample& sample, const TrainConfig& config, Rng& rng, Phase phase,
                    std::size_t multiple = 1);

}  // namespace lkc::pipeline
