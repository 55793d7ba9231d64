#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "lkc/model/model.hpp"
#include "lkc/pipeline/preprocess.hpp"

namespace lkc::pipeline {

struct SampleResult {
  double prediction = 0;
  double target = 0;
  double abs_error = 0;
  bool operator==(const SampleResult&) const = default;
};

/// MAE = mean |p - t|; MSE is the root of the mean squared error.
struct EvalReport {
  double mae = 0;
  double mse = 0;
  std::size_t n = 0;
  std::vector<SampleResult> samples;

  static EvalReport from_predictions(const std::vector<double>& predictions, const std::vector<double>& targets);
  /// index,prediction,target,abs_error rows after a header.
  std::string to_csv() const;
  std::string summary() const;
  bool operator==(const EvalReport&) const = default;
};

/// Eval-mode predictions, batched by `batch` over consecutive samples of
/// equal shape; images are padded to the model's total stride.
std::vector<double> predict_samples(const model::ModelParams<float>& params, const std::vector<Sample>& samples,
                                    const TrainConfig& config, std::size_t batch);

EvalReport evaluate(const model::ModelParams<float>& params, const std::vector<Sample>& samples,
                    const TrainConfig& config, std::size_t batch);

/// Predicts the mean training count for every sample.
EvalReport baseline_mean(const std::vector<Sample>& train, const std::vector<Sample>& eval);

double mean_count(const std::vector<Sample>& samples);

void write_report(const EvalReport& report, const std::filesystem::path& path);

}  // namespace lkc::pipeline
