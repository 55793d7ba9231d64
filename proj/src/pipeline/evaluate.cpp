#include "lkc/pipeline/evaluate.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "lkc/core/error.hpp"

namespace lkc::pipeline {

EvalReport EvalReport::from_predictions(const std::vector<double>& predictions, const std::vector<double>& targets) {
  require(predictions.size() == targets.size(), "shape_mismatch", "predictions and targets differ in length");
  require(!predictions.empty(), "invalid_argument", "cannot evaluate zero samples");
  EvalReport r;
  r.n = predictions.size();
  double abs_sum = 0, sq_sum = 0;
  for (std::size_t i = 0; i < r.n; ++i) {
    const double d = predictions[i] - targets[i];
    r.samples.push_back({predictions[i], targets[i], std::abs(d)});
    abs_sum += std::abs(d);
    sq_sum += d * d;
  }
  r.mae = abs_sum / static_cast<double>(r.n);
  r.mse = std::sqrt(sq_sum / static_cast<double>(r.n));
  return r;
}

std::string EvalReport::to_csv() const {
  std::ostringstream out;
  out.precision(10);
  out << "index,prediction,target,abs_error\n";
  for (std::size_t i = 0; i < samples.size(); ++i)
    out << i << ',' << samples[i].prediction << ',' << samples[i].target << ',' << samples[i].abs_error << '\n';
  return out.str();
}

std::string EvalReport::summary() const {
  std::ostringstream out;
  out.precision(6);
  out << "n=" << n << " mae=" << mae << " mse=" << mse;
  return out.str();
}

std::vector<double> predict_samples(const model::ModelParams<float>& params, const std::vector<Sample>& samples,
                                    const TrainConfig& config, std::size_t batch) {
  require(batch >= 1, "invalid_argument", "eval batch must be >= 1");
  const std::size_t multiple = params.config.total_stride();
  std::vector<Prepared> prepared;
  prepared.reserve(samples.size());
  Rng unused(0);
  for (const Sample& s : samples) prepared.push_back(preprocess(s, config, unused, Phase::kEval, multiple));

  std::vector<double> out;
  out.reserve(samples.size());
  std::size_t i = 0;
  while (i < prepared.size()) {
    const Shape& shape = prepared[i].image.shape();
    std::size_t j = i;
    while (j < prepared.size() && j - i < batch && prepared[j].image.shape() == shape) ++j;
    const std::size_t per = prepared[i].image.size();
    Tensor<float> x({j - i, shape[0], shape[1], shape[2]});
    for (std::size_t k = i; k < j; ++k)
      std::copy(prepared[k].image.data(), prepared[k].image.data() + per, x.data() + (k - i) * per);
    Rng rng(0);
    const Tensor<float> p = model::predict(params, x, model::ForwardMode::kEval, rng);
    for (std::size_t k = 0; k < p.size(); ++k) out.push_back(p[k]);
    i = j;
  }
  return out;
}

EvalReport evaluate(const model::ModelParams<float>& params, const std::vector<Sample>& samples,
                    const TrainConfig& config, std::size_t batch) {
  std::vector<double> targets;
  for (const Sample& s : samples) targets.push_back(static_cast<double>(s.count));
  return EvalReport::from_predictions(predict_samples(params, samples, config, batch), targets);
}

double mean_count(const std::vector<Sample>& samples) {
  require(!samples.empty(), "invalid_argument", "mean count of an empty split");
  double sum = 0;
  for (const Sample& s : samples) sum += static_cast<double>(s.count);
  return sum / static_cast<double>(samples.size());
}

EvalReport baseline_mean(const std::vector<Sample>& train, const std::vector<Sample>& eval) {
  const double m = mean_count(train);
  std::vector<double> preds(eval.size(), m), targets;
  for (const Sample& s : eval) targets.push_back(static_cast<double>(s.count));
  return EvalReport::from_predictions(preds, targets);
}

void write_report(const EvalReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  require(out.good(), "io", "cannot write " + path.string());
  out << report.to_csv();
}

}  // namespace lkc::pipeline
