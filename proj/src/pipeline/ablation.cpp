#include "lkc/pipeline/ablation.hpp"

#include <chrono>
#include <ostream>
#include <sstream>

#include "lkc/pipeline/train.hpp"

namespace lkc::pipeline {

namespace {

model::ModelConfig with_kernels(model::ModelConfig c, std::size_t large, std::size_t small) {
  for (model::StageConfig& s : c.stages) {
    s.large_kernel = large;
    s.small_kernel = small;
  }
  c.block_mode = model::BlockMode::kParallel;
  return c;
}

}  // namespace

AblationConfig::AblationConfig() {
  pretext_data.seed = 7;
  pretext_data.profile = ObjectProfile::kGaussian;
  pretext_data.count_max = 15;
  pretext_data.train = 1000;
  pretext_data.val = 100;
  pretext_data.test = 1;
}

std::vector<std::string> ablation_variants() {
  return {"plain", "lk", "lk_parallel", "lk_reparam", "lk_reparam_rsy"};
}

std::string AblationResult::to_csv() const {
  std::ostringstream out;
  out.precision(8);
  out << "variant,mae,mse,params,block_mode,seconds\n";
  out << "baseline_mean," << baseline.mae << ',' << baseline.mse << ",0,none,0\n";
  for (const AblationRow& r : rows)
    out << r.variant << ',' << r.report.mae << ',' << r.report.mse << ',' << r.params << ',' << r.block_mode << ','
        << r.seconds << '\n';
  return out.str();
}

AblationResult ablation_run(const AblationConfig& config, const Dataset& data, std::ostream* log) {
  AblationResult result;
  result.baseline = baseline_mean(data.train, data.test);

  const std::size_t large = config.model.stages.empty() ? 13 : config.model.stages.front().large_kernel;
  const std::size_t small = config.model.stages.empty() ? 3 : config.model.stages.front().small_kernel;

  TrainConfig tc = config.train;
  tc.epochs = config.epochs;
  tc.checkpoint.clear();
  tc.log.clear();

  auto run = [&](const std::string& name, const TrainConfig& cfg, const model::ModelConfig& mc,
                 const model::ModelParams<float>* init, double extra_seconds) {
    const auto t0 = std::chrono::steady_clock::now();
    if (log) *log << "event=variant name=" << name << '\n';
    TrainResult tr = train(cfg, mc, data.train, data.val, log, init);
    AblationRow row;
    row.variant = name;
    row.report = evaluate(tr.best_params, data.test, cfg, cfg.eval_batch);
    row.params = tr.best_params.parameter_count();
    row.block_mode = model::to_string(tr.best_params.config.block_mode);
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() + extra_seconds;
    if (log) *log << "event=variant_done name=" << name << ' ' << row.report.summary() << '\n';
    result.rows.push_back(std::move(row));
  };

  run("plain", tc, with_kernels(config.model, 3, 0), nullptr, 0);
  run("lk", tc, with_kernels(config.model, large, 0), nullptr, 0);
  run("lk_parallel", tc, with_kernels(config.model, large, small), nullptr, 0);

  // Pretext pretraining stands in for a large-scale pretrained checkpoint.
  const auto t0 = std::chrono::steady_clock::now();
  const Dataset pretext = gen_dataset(config.pretext_data);
  TrainConfig pc = tc;
  pc.epochs = config.pretext_epochs;
  pc.seed = config.pretext_data.seed;
  if (log) *log << "event=variant name=pretext\n";
  const TrainResult pretrained =
      train(pc, with_kernels(config.model, large, small), pretext.train, pretext.val, log, nullptr);
  model::ModelParams<float> fused = model::fuse_model(pretrained.best_params);
  // The pretext head was fit to a different count range; restart its output bias.
  fused.tensors.at("head.fc2.bias")[0] = static_cast<float>(mean_count(data.train));
  const double pretext_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  run("lk_reparam", tc, fused.config, &fused, pretext_seconds);
  TrainConfig rc = tc;
  rc.rsy_enabled = true;
  run("lk_reparam_rsy", rc, fused.config, &fused, pretext_seconds);
  return result;
}

}  // namespace lkc::pipeline
