#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <vector>

#include "lkc/core/adam.hpp"
#include "lkc/model/model.hpp"
#include "lkc/pipeline/evaluate.hpp"
#include "lkc/pipeline/preprocess.hpp"

namespace lkc::pipeline {

struct EpochRecord {
  std::size_t epoch = 0;
  std::size_t steps = 0;
  double train_loss = 0;  // sample-weighted mean over the epoch
  double val_mae = 0;
  double val_mse = 0;
  double lr = 0;          // at the epoch's last step
  double seconds = 0;
};

/// One key=value record per line.
std::string format_epoch(const EpochRecord& record);

struct TrainResult {
  model::ModelParams<float> final_params;
  model::ModelParams<float> best_params;  // lowest validation MAE
  std::size_t best_epoch = 0;
  double best_val_mae = 0;
  std::vector<EpochRecord> epochs;
  std::vector<double> step_losses;
};

/// Learning rate at a global step for the configured schedule.
double scheduled_lr(const TrainConfig& config, std::size_t step, std::size_t total_steps);

/// One Adam step on a prepared batch in train mode; returns the loss before
/// the update. Throws Error("non_finite") when the loss or a gradient is not
/// finite, leaving params untouched.
double train_step(model::ModelParams<float>& params, AdamState<float>& adam, const Tensor<float>& batch,
                  const Tensor<float>& targets, double loss_beta, Rng& rng);

/// Stacks prepared images into [N, C, H, W] and counts into [N].
std::pair<Tensor<float>, Tensor<float>> stack_batch(const std::vector<Prepared>& items);

/// Adam on smooth-L1 against the scalar count. Per epoch: a shuffled pass
/// over `train` with sample i of epoch e augmented by Rng::derive(seed, e, i),
/// then validation MAE/MSE. With `init` the run fine-tunes those parameters
/// (their config wins over `model_config`). On a non-finite loss the run
/// stops with Error("diverged"); the best checkpoint written so far stays.
TrainResult train(const TrainConfig& config, const model::ModelConfig& model_config, const std::vector<Sample>& train,
                  const std::vector<Sample>& val, std::ostream* log = nullptr,
                  const model::ModelParams<float>* init = nullptr);

}  // namespace lkc::pipeline
