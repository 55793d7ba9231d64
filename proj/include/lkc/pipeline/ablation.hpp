#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <vector>

#include "lkc/model/config.hpp"
#include "lkc/pipeline/dataset.hpp"
#include "lkc/pipeline/evaluate.hpp"
#include "lkc/pipeline/preprocess.hpp"

namespace lkc::pipeline {

/// Five desk-scale variants, all evaluated on the test split:
///   plain            3x3 depthwise mixers
///   lk               single large-kernel branch
///   lk_parallel      large + small parallel branches, trained unfused
///   lk_reparam       parallel model pretrained on the pretext data, fused,
///                    then fine-tuned
///   lk_reparam_rsy   as lk_reparam with RSY during fine-tuning
struct AblationConfig {
  TrainConfig train;
  std::size_t epochs = 4;
  std::size_t pretext_epochs = 3;
  model::ModelConfig model = model::ModelConfig::desk();
  /// Different seed and object distribution from the target data.
  DatasetConfig pretext_data;

  AblationConfig();
};

struct AblationRow {
  std::string variant;
  EvalReport report;
  std::size_t params = 0;
  std::string block_mode;
  double seconds = 0;
};

struct AblationResult {
  EvalReport baseline;
  std::vector<AblationRow> rows;

  /// variant,mae,mse,params,block_mode,seconds with a leading baseline_mean row.
  std::string to_csv() const;
};

std::vector<std::string> ablation_variants();

AblationResult ablation_run(const AblationConfig& config, const Dataset& data, std::ostream* log = nullptr);

}  // namespace lkc::pipeline
