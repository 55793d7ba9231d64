#include "lkc/pipeline/train.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

#include "lkc/core/error.hpp"

namespace lkc::pipeline {

namespace {

constexpr std::uint64_t kShuffleStream = std::numeric_limits<std::uint64_t>::max();
constexpr std::uint64_t kDropoutStream = kShuffleStream - 1;

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng = Rng::derive(seed, epoch, kShuffleStream);
  for (std::size_t i = n; i-- > 1;) std::swap(order[i], order[rng.below(i + 1)]);
  return order;
}

class Logger {
 public:
  Logger(const std::string& path, std::ostream* extra) : extra_(extra) {
    if (!path.empty()) {
      file_.open(path);
      require(file_.good(), "io", "cannot write log " + path);
    }
  }

  void line(const std::string& text) {
    if (file_.is_open()) file_ << text << '\n' << std::flush;
    if (extra_) *extra_ << text << '\n' << std::flush;
  }

 private:
  std::ofstream file_;
  std::ostream* extra_;
};

}  // namespace

std::string format_epoch(const EpochRecord& r) {
  std::ostringstream out;
  out.precision(8);
  out << "event=epoch epoch=" << r.epoch << " steps=" << r.steps << " train_loss=" << r.train_loss
      << " val_mae=" << r.val_mae << " val_mse=" << r.val_mse << " lr=" << r.lr << " seconds=" << r.seconds;
  return out.str();
}

double scheduled_lr(const TrainConfig& config, std::size_t step, std::size_t total_steps) {
  if (config.schedule == LrSchedule::kConstant || total_steps == 0) return config.lr;
  const double t = static_cast<double>(step) / static_cast<double>(total_steps);
  return config.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

std::pair<Tensor<float>, Tensor<float>> stack_batch(const std::vector<Prepared>& items) {
  require(!items.empty(), "invalid_argument", "cannot stack an empty batch");
  const Shape& shape = items.front().image.shape();
  const std::size_t per = items.front().image.size();
  Tensor<float> x({items.size(), shape[0], shape[1], shape[2]});
  Tensor<float> t({items.size()});
  for (std::size_t i = 0; i < items.size(); ++i) {
    require(items[i].image.shape() == shape, "shape_mismatch", "batch images must share one shape");
    std::copy(items[i].image.data(), items[i].image.data() + per, x.data() + i * per);
    t[i] = static_cast<float>(items[i].count);
  }
  return {std::move(x), std::move(t)};
}

double train_step(model::ModelParams<float>& params, AdamState<float>& adam, const Tensor<float>& batch,
                  const Tensor<float>& targets, double loss_beta, Rng& rng) {
  Tape<float> tape;
  model::BnStats<float> stats;
  model::ForwardOptions<float> options;
  options.mode = model::ForwardMode::kTrain;
  options.bn_stats = &stats;
  const auto pred = model::forward(tape, params, batch, rng, options);
  const auto loss = tape.smooth_l1(pred, targets, loss_beta);
  const double value = tape.value(loss)[0];
  require(std::isfinite(value), "non_finite", "training loss is not finite");
  tape.backward(loss);
  const NamedGrads<float> grads = tape.param_grads();
  adam_step(params.tensors, grads, adam);
  model::apply_bn_updates(params, stats);
  return value;
}

TrainResult train(const TrainConfig& config, const model::ModelConfig& model_config, const std::vector<Sample>& train,
                  const std::vector<Sample>& val, std::ostream* log, const model::ModelParams<float>* init) {
  config.validate();
  require(!train.empty() && !val.empty(), "invalid_argument", "training needs non-empty train and val splits");
  Logger logger(config.log, log);

  TrainResult result;
  model::ModelParams<float> params;
  if (init) {
    params = *init;
  } else {
    Rng init_rng(config.seed);
    params = model::build_model<float>(model_config, init_rng);
    if (config.init_bias_to_mean) params.tensors.at("head.fc2.bias")[0] = static_cast<float>(mean_count(train));
  }

  AdamState<float> adam;
  adam.config.lr = config.lr;
  const std::size_t steps_per_epoch = (train.size() + config.batch_size - 1) / config.batch_size;
  const std::size_t total_steps = steps_per_epoch * config.epochs;
  {
    std::ostringstream start;
    start << "event=start params=" << params.parameter_count() << " train=" << train.size() << " val=" << val.size()
          << " epochs=" << config.epochs << " batch=" << config.batch_size << " lr=" << config.lr
          << " block_mode=" << model::to_string(params.config.block_mode) << " seed=" << config.seed;
    logger.line(start.str());
  }

  result.best_params = params;
  result.best_val_mae = std::numeric_limits<double>::infinity();
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::vector<std::size_t> order = epoch_order(train.size(), config.seed, epoch);
    double loss_sum = 0;
    EpochRecord rec;
    rec.epoch = epoch;
    for (std::size_t b = 0; b < steps_per_epoch; ++b, ++step) {
      std::vector<Prepared> items;
      for (std::size_t k = b * config.batch_size; k < std::min(order.size(), (b + 1) * config.batch_size); ++k) {
        Rng rng = Rng::derive(config.seed, epoch, order[k]);
        items.push_back(preprocess(train[order[k]], config, rng, Phase::kTrain));
      }
      const auto [x, t] = stack_batch(items);
      adam.config.lr = scheduled_lr(config, step, total_steps);
      Rng dropout_rng = Rng::derive(config.seed, kDropoutStream, step);
      double loss = 0;
      try {
        loss = train_step(params, adam, x, t, config.loss_beta, dropout_rng);
      } catch (const Error& e) {
        if (e.code() != "non_finite") throw;
        logger.line("event=diverged epoch=" + std::to_string(epoch) + " step=" + std::to_string(step));
        throw Error("diverged", std::string("training diverged at step ") + std::to_string(step) + ": " + e.what());
      }
      result.step_losses.push_back(loss);
      loss_sum += loss * static_cast<double>(items.size());
      rec.lr = adam.config.lr;
      ++rec.steps;
    }
    rec.train_loss = loss_sum / static_cast<double>(train.size());
    const EvalReport report = evaluate(params, val, config, config.eval_batch);
    rec.val_mae = report.mae;
    rec.val_mse = report.mse;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.epochs.push_back(rec);
    logger.line(format_epoch(rec));
    if (report.mae < result.best_val_mae) {
      result.best_val_mae = report.mae;
      result.best_epoch = epoch;
      result.best_params = params;
      if (!config.checkpoint.empty()) model::save_checkpoint(params, config.checkpoint);
    }
  }
  if (config.epochs == 0 && !config.checkpoint.empty()) model::save_checkpoint(params, config.checkpoint);
  result.final_params = std::move(params);
  std::ostringstream done;
  done.precision(8);
  done << "event=done best_epoch=" << result.best_epoch << " best_val_mae=" << result.best_val_mae;
  logger.line(done.str());
  return result;
}

}  // namespace lkc::pipeline
