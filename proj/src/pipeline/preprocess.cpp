#include "lkc/pipeline/preprocess.hpp"

#include "lkc/core/error.hpp"

namespace lkc::pipeline {

namespace {

std::string to_string(LrSchedule s) { return s == LrSchedule::kConstant ? "constant" : "cosine"; }

LrSchedule parse_schedule(const std::string& text) {
  if (text == "constant") return LrSchedule::kConstant;
  if (text == "cosine") return LrSchedule::kCosine;
  throw Error("invalid_argument", "unknown lr schedule '" + text + "' (constant|cosine)");
}

}  // namespace

void TrainConfig::validate() const {
  require(batch_size >= 1 && eval_batch >= 1, "invalid_argument", "batch sizes must be >= 1");
  require(crop >= 1, "invalid_argument", "crop must be >= 1");
  require(flip_probability >= 0 && flip_probability <= 1, "invalid_argument", "flip probability must be in [0, 1]");
  require(lr >= 0, "invalid_argument", "learning rate must be >= 0");
  require(loss_beta > 0, "invalid_argument", "loss beta must be positive");
  require(normalization.std > 0, "invalid_argument", "normalization std must be positive");
  if (rsy_enabled) rsy.validate();
}

nlohmann::json TrainConfig::to_json() const {
  return {{"batch_size", batch_size},
          {"crop", crop},
          {"flip_probability", flip_probability},
          {"rsy_enabled", rsy_enabled},
          {"rsy",
           {{"rows", rsy.rows},
            {"cols", rsy.cols},
            {"mode", rsy::to_string(rsy.mode)},
            {"min_cell_fraction", rsy.min_cell_fraction},
            {"probability", rsy.probability}}},
          {"lr", lr},
          {"schedule", to_string(schedule)},
          {"epochs", epochs},
          {"seed", seed},
          {"loss_beta", loss_beta},
          {"eval_batch", eval_batch},
          {"normalization", {{"mean", normalization.mean}, {"std", normalization.std}}},
          {"init_bias_to_mean", init_bias_to_mean},
          {"checkpoint", checkpoint},
          {"log", log}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c = j.contains("preset") ? preset(j.at("preset").get<std::string>()) : TrainConfig{};
  try {
    c.batch_size = j.value("batch_size", c.batch_size);
    c.crop = j.value("crop", c.crop);
    c.flip_probability = j.value("flip_probability", c.flip_probability);
    c.rsy_enabled = j.value("rsy_enabled", c.rsy_enabled);
    if (j.contains("rsy")) {
      const auto& r = j.at("rsy");
      c.rsy.rows = r.value("rows", c.rsy.rows);
      c.rsy.cols = r.value("cols", c.rsy.cols);
      c.rsy.mode = rsy::parse_scale_mode(r.value("mode", rsy::to_string(c.rsy.mode)));
      c.rsy.min_cell_fraction = r.value("min_cell_fraction", c.rsy.min_cell_fraction);
      c.rsy.probability = r.value("probability", c.rsy.probability);
    }
    c.lr = j.value("lr", c.lr);
    c.schedule = parse_schedule(j.value("schedule", to_string(c.schedule)));
    c.epochs = j.value("epochs", c.epochs);
    c.seed = j.value("seed", c.seed);
    c.loss_beta = j.value("loss_beta", c.loss_beta);
    c.eval_batch = j.value("eval_batch", c.eval_batch);
    if (j.contains("normalization")) {
      c.normalization.mean = j.at("normalization").value("mean", c.normalization.mean);
      c.normalization.std = j.at("normalization").value("std", c.normalization.std);
    }
    c.init_bias_to_mean = j.value("init_bias_to_mean", c.init_bias_to_mean);
    c.checkpoint = j.value("checkpoint", c.checkpoint);
    c.log = j.value("log", c.log);
  } catch (const nlohmann::json::exception& e) {
    throw Error("format", std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

TrainConfig TrainConfig::desk() { return TrainConfig{}; }

TrainConfig TrainConfig::paper() {
  TrainConfig c;
  c.batch_size = 24;
  c.crop = 384;
  c.lr = 1e-5;
  c.schedule = LrSchedule::kConstant;
  return c;
}

TrainConfig TrainConfig::preset(const std::string& name) {
  if (name == "desk") return desk();
  if (name == "paper") return paper();
  throw Error("invalid_argument", "unknown train preset '" + name + "' (desk|paper)");
}

std::size_t count_inside(const Sample& sample, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
  std::size_t n = 0;
  for (const Point& p : sample.centers)
    if (p.y >= static_cast<double>(y0) && p.y < static_cast<double>(y0 + h) && p.x >= static_cast<double>(x0) &&
        p.x < static_cast<double>(x0 + w))
      ++n;
  return n;
}

Sample crop(const Sample& sample, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
  const Tensor<float>& img = sample.image;
  require(img.rank() == 3, "shape_mismatch", "crop expects a [C, H, W] image");
  const std::size_t ch = img.dim(0), ih = img.dim(1), iw = img.dim(2);
  require(h >= 1 && w >= 1 && y0 + h <= ih && x0 + w <= iw, "invalid_argument",
          "crop " + std::to_string(h) + "x" + std::to_string(w) + " at (" + std::to_string(y0) + "," +
              std::to_string(x0) + ") exceeds image " + std::to_string(ih) + "x" + std::to_string(iw));
  if (y0 == 0 && x0 == 0 && h == ih && w == iw) return sample;
  require(sample.centers.size() == sample.count, "invalid_argument",
          "cropping needs the object centers to recount the label");
  Sample out;
  out.image = Tensor<float>({ch, h, w});
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out.image[(c * h + y) * w + x] = img[(c * ih + y0 + y) * iw + x0 + x];
  for (const Point& p : sample.centers)
    if (p.y >= static_cast<double>(y0) && p.y < static_cast<double>(y0 + h) && p.x >= static_cast<double>(x0) &&
        p.x < static_cast<double>(x0 + w))
      out.centers.push_back({p.y - static_cast<double>(y0), p.x - static_cast<double>(x0)});
  out.count = out.centers.size();
  return out;
}

Sample flip_horizontal(const Sample& sample) {
  const Tensor<float>& img = sample.image;
  require(img.rank() == 3, "shape_mismatch", "flip expects a [C, H, W] image");
  const std::size_t planes = img.dim(0) * img.dim(1), w = img.dim(2);
  Sample out = sample;
  for (std::size_t r = 0; r < planes; ++r)
    for (std::size_t x = 0; x < w; ++x) out.image[r * w + x] = img[r * w + (w - 1 - x)];
  for (Point& p : out.centers) p.x = static_cast<double>(w) - p.x;
  return out;
}

Sample pad_to_multiple(const Sample& sample, std::size_t multiple) {
  require(multiple >= 1, "invalid_argument", "pad multiple must be >= 1");
  const Tensor<float>& img = sample.image;
  const std::size_t ch = img.dim(0), h = img.dim(1), w = img.dim(2);
  const std::size_t ph = (h + multiple - 1) / multiple * multiple, pw = (w + multiple - 1) / multiple * multiple;
  if (ph == h && pw == w) return sample;
  Sample out = sample;
  out.image = Tensor<float>({ch, ph, pw});
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out.image[(c * ph + y) * pw + x] = img[(c * h + y) * w + x];
  return out;
}

Tensor<float> normalize(const Tensor<float>& image, const Normalization& norm) {
  Tensor<float> out = image;
  const auto mean = static_cast<float>(norm.mean), inv = static_cast<float>(1.0 / norm.std);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (out[i] - mean) * inv;
  return out;
}

Prepared preprocess(const Sample& sample, const TrainConfig& config, Rng& rng, Phase phase, std::size_t multiple) {
  if (phase == Phase::kEval) {
    const Sample padded = pad_to_multiple(sample, multiple);
    return {normalize(padded.image, config.normalization), static_cast<double>(sample.count)};
  }
  const std::size_t h = sample.image.dim(1), w = sample.image.dim(2);
  require(config.crop <= h && config.crop <= w, "invalid_argument",
          "crop " + std::to_string(config.crop) + " is larger than the image " + std::to_string(h) + "x" +
              std::to_string(w));
  const std::size_t y0 = rng.below(h - config.crop + 1);
  const std::size_t x0 = rng.below(w - config.crop + 1);
  Sample s = crop(sample, y0, x0, config.crop, config.crop);
  if (rng.bernoulli(config.flip_probability)) s = flip_horizontal(s);
  if (config.rsy_enabled && rng.bernoulli(config.rsy.probability)) s = rsy::rsy_apply(s, config.rsy, rng).first;
  return {normalize(s.image, config.normalization), static_cast<double>(s.count)};
}

}  // namespace lkc::pipeline
