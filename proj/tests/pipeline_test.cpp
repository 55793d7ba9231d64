#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>
#include <sstream>

#include "lkc/core/error.hpp"
#include "lkc/pipeline/ablation.hpp"
#include "lkc/pipeline/dataset.hpp"
#include "lkc/pipeline/evaluate.hpp"
#include "lkc/pipeline/train.hpp"

using namespace lkc;
using namespace lkc::pipeline;

namespace {

DatasetConfig small_data(std::size_t train, std::size_t val, std::size_t test) {
  DatasetConfig c;
  c.train = train;
  c.val = val;
  c.test = test;
  return c;
}

std::size_t brute_force_count(const std::vector<Point>& centers, double y0, double x0, double h, double w) {
  std::size_t n = 0;
  for (const Point& p : centers) n += (p.y >= y0 && p.y < y0 + h && p.x >= x0 && p.x < x0 + w) ? 1 : 0;
  return n;
}

TrainConfig quick_train(std::size_t epochs) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 8;
  return c;
}

}  // namespace

TEST(Dataset, EmptyCountGivesBackgroundOnly) {
  DatasetConfig c = small_data(5, 1, 1);
  c.count_min = c.count_max = 0;
  const Dataset d = gen_dataset(c);
  for (const Sample& s : d.train) {
    EXPECT_EQ(s.count, 0u);
    EXPECT_TRUE(s.centers.empty());
    const double mean = std::accumulate(s.image.data(), s.image.data() + s.image.size(), 0.0) / s.image.size();
    EXPECT_NEAR(mean, c.background, 0.01);
  }
}

TEST(Dataset, DeterministicAndConsistent) {
  const DatasetConfig c = small_data(20, 5, 5);
  const Dataset a = gen_dataset(c), b = gen_dataset(c);
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    EXPECT_EQ(a.train[i].image, b.train[i].image);
    EXPECT_EQ(a.train[i].centers, b.train[i].centers);
  }
  for (const Sample& s : a.train) {
    EXPECT_EQ(s.count, s.centers.size());
    EXPECT_LE(s.count, c.count_max);
    for (const Point& p : s.centers) {
      EXPECT_GE(p.y, c.radius_min);
      EXPECT_LE(p.y, c.height - c.radius_min);
      EXPECT_GE(p.x, c.radius_min);
      EXPECT_LE(p.x, c.width - c.radius_min);
    }
    for (float v : s.image.vector()) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
  DatasetConfig other = c;
  other.seed += 1;
  EXPECT_NE(gen_dataset(other).train[0].image, a.train[0].image);
}

TEST(Dataset, DefaultMeanCountNearMidpoint) {
  const DatasetConfig c;
  std::vector<Sample> train;
  for (std::size_t i = 0; i < c.train; ++i) {
    Rng rng = Rng::derive(c.seed, 0, i);
    train.push_back(generate_sample(c, rng));
  }
  EXPECT_NEAR(mean_count(train), (c.count_min + c.count_max) / 2.0, 0.5);
}

TEST(Dataset, SaveLoadRoundTrip) {
  DatasetConfig c = small_data(6, 3, 2);
  c.profile = ObjectProfile::kGaussian;
  c.channels = 3;
  const Dataset d = gen_dataset(c);
  const auto dir = std::filesystem::temp_directory_path() / "lkc_dataset_roundtrip";
  std::filesystem::remove_all(dir);
  save_dataset(d, dir);
  const Dataset back = load_dataset(dir);
  EXPECT_EQ(back.config, c);
  for (const char* split : {"train", "val", "test"}) {
    ASSERT_EQ(back.split(split).size(), d.split(split).size());
    for (std::size_t i = 0; i < d.split(split).size(); ++i) {
      EXPECT_EQ(back.split(split)[i].image, d.split(split)[i].image);
      EXPECT_EQ(back.split(split)[i].count, d.split(split)[i].count);
      EXPECT_EQ(back.split(split)[i].centers, d.split(split)[i].centers);
    }
  }
  std::filesystem::remove_all(dir);
  EXPECT_THROW(load_dataset(dir), Error);
}

TEST(Dataset, ConfigJsonAndValidation) {
  DatasetConfig c = DatasetConfig::paper();
  c.noise = 0.05;
  EXPECT_EQ(DatasetConfig::from_json(c.to_json()), c);
  EXPECT_EQ(DatasetConfig::from_json({{"preset", "paper"}}), DatasetConfig::paper());
  EXPECT_THROW(DatasetConfig::from_json({{"count_min", 5}, {"count_max", 2}}), Error);
  EXPECT_THROW(DatasetConfig::from_json({{"radius_min", 0}}), Error);
  EXPECT_THROW(DatasetConfig::from_json({{"height", "tall"}}), Error);
}

TEST(Preprocess, FullCropKeepsLabel) {
  const Dataset d = gen_dataset(small_data(3, 1, 1));
  for (const Sample& s : d.train) {
    const Sample c = crop(s, 0, 0, 96, 96);
    EXPECT_EQ(c.count, s.count);
    EXPECT_EQ(c.image, s.image);
  }
}

TEST(Preprocess, CropRecountMatchesBruteForce) {
  const Dataset d = gen_dataset(small_data(10, 1, 1));
  Rng rng(1);
  for (const Sample& s : d.train)
    for (int t = 0; t < 10; ++t) {
      const std::size_t h = 1 + rng.below(96), w = 1 + rng.below(96);
      const std::size_t y0 = rng.below(96 - h + 1), x0 = rng.below(96 - w + 1);
      const Sample c = crop(s, y0, x0, h, w);
      EXPECT_EQ(c.count, brute_force_count(s.centers, y0, x0, h, w));
      EXPECT_EQ(c.count, count_inside(s, y0, x0, h, w));
      EXPECT_EQ(c.image.shape(), (Shape{1, h, w}));
      EXPECT_EQ(c.image(0, h - 1, w - 1), s.image(0, y0 + h - 1, x0 + w - 1));
    }
  EXPECT_THROW(crop(d.train[0], 10, 0, 90, 10), Error);
  Sample no_centers = d.train[0];
  no_centers.centers.clear();
  no_centers.count = 3;
  EXPECT_THROW(crop(no_centers, 0, 0, 10, 10), Error);
}

TEST(Preprocess, FlipIsAnInvolution) {
  const Dataset d = gen_dataset(small_data(3, 1, 1));
  for (const Sample& s : d.train) {
    const Sample once = flip_horizontal(s);
    EXPECT_EQ(once.count, s.count);
    EXPECT_EQ(once.image(0, 5, 0), s.image(0, 5, 95));
    const Sample twice = flip_horizontal(once);
    EXPECT_EQ(twice.image, s.image);
    ASSERT_EQ(twice.centers.size(), s.centers.size());
    for (std::size_t i = 0; i < s.centers.size(); ++i) {
      EXPECT_EQ(twice.centers[i].y, s.centers[i].y);
      EXPECT_NEAR(twice.centers[i].x, s.centers[i].x, 1e-12);
    }
  }
}

TEST(Preprocess, PadAndNormalize) {
  Sample s;
  s.image = Tensor<float>({1, 5, 3}, 0.9f);
  const Sample p = pad_to_multiple(s, 4);
  EXPECT_EQ(p.image.shape(), (Shape{1, 8, 4}));
  EXPECT_EQ(p.image(0, 4, 2), 0.9f);
  EXPECT_EQ(p.image(0, 5, 0), 0.0f);
  EXPECT_EQ(p.image(0, 0, 3), 0.0f);
  const Tensor<float> n = normalize(s.image, {0.45, 0.225});
  EXPECT_NEAR(n[0], (0.9 - 0.45) / 0.225, 1e-6);
}

TEST(Preprocess, TrainPhaseLabelMatchesItsCropWindow) {
  DatasetConfig dc = small_data(6, 1, 1);
  dc.height = dc.width = 24;
  dc.radius_max = 3;
  dc.noise = 0.05;
  const Dataset d = gen_dataset(dc);
  TrainConfig tc;
  tc.crop = 16;
  tc.flip_probability = 0;
  for (const Sample& s : d.train)
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      Rng rng(seed);
      const Prepared p = preprocess(s, tc, rng, Phase::kTrain);
      ASSERT_EQ(p.image.shape(), (Shape{1, 16, 16}));
      // Locate the window by exhaustive search; noise makes it unique.
      std::size_t matches = 0, label = 0;
      for (std::size_t y0 = 0; y0 + 16 <= 24; ++y0)
        for (std::size_t x0 = 0; x0 + 16 <= 24; ++x0)
          if (normalize(crop(s, y0, x0, 16, 16).image, tc.normalization) == p.image) {
            ++matches;
            label = brute_force_count(s.centers, y0, x0, 16, 16);
          }
      ASSERT_EQ(matches, 1u);
      EXPECT_EQ(p.count, static_cast<double>(label));
    }
  tc.crop = 25;
  Rng rng(0);
  EXPECT_THROW(preprocess(d.train[0], tc, rng, Phase::kTrain), Error);
}

TEST(Preprocess, RsyAndFlipKeepTheCropLabel) {
  const Dataset d = gen_dataset(small_data(8, 1, 1));
  TrainConfig tc;
  tc.crop = 96;
  tc.flip_probability = 1;
  tc.rsy_enabled = true;
  tc.rsy.probability = 1;
  for (const Sample& s : d.train) {
    Rng rng(3);
    const Prepared p = preprocess(s, tc, rng, Phase::kTrain);
    EXPECT_EQ(p.count, static_cast<double>(s.count));
    EXPECT_EQ(p.image.shape(), s.image.shape());
  }
  Rng rng(0);
  const Prepared e = preprocess(d.train[0], tc, rng, Phase::kEval, 32);
  EXPECT_EQ(e.image.shape(), (Shape{1, 96, 96}));
  Sample odd = d.train[0];
  odd.image = Tensor<float>({1, 50, 70}, 0.5f);
  EXPECT_EQ(preprocess(odd, tc, rng, Phase::kEval, 16).image.shape(), (Shape{1, 64, 80}));
}

TEST(EvalReport, ClosedFormsAndInvariants) {
  const EvalReport r = EvalReport::from_predictions({10, 20}, {12, 16});
  EXPECT_DOUBLE_EQ(r.mae, 3.0);
  EXPECT_NEAR(r.mse, std::sqrt(10.0), 1e-12);
  const EvalReport zero = EvalReport::from_predictions({1, 2, 3}, {1, 2, 3});
  EXPECT_EQ(zero.mae, 0.0);
  EXPECT_EQ(zero.mse, 0.0);

  Rng rng(4);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> p(1 + rng.below(20)), y(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = 30 * rng.uniform(), y[i] = static_cast<double>(rng.below(31));
    const EvalReport rep = EvalReport::from_predictions(p, y);
    EXPECT_LE(rep.mae, rep.mse + 1e-12);
    // Recompute from the per-sample CSV rows.
    std::istringstream csv(rep.to_csv());
    std::string line;
    std::getline(csv, line);
    EXPECT_EQ(line, "index,prediction,target,abs_error");
    double abs_sum = 0, sq_sum = 0;
    std::size_t rows = 0;
    while (std::getline(csv, line)) {
      std::istringstream fields(line);
      std::string idx, pred, target, err;
      std::getline(fields, idx, ',');
      std::getline(fields, pred, ',');
      std::getline(fields, target, ',');
      std::getline(fields, err, ',');
      const double d = std::stod(pred) - std::stod(target);
      abs_sum += std::abs(d);
      sq_sum += d * d;
      ++rows;
    }
    ASSERT_EQ(rows, p.size());
    EXPECT_NEAR(rep.mae, abs_sum / rows, 1e-6);
    EXPECT_NEAR(rep.mse, std::sqrt(sq_sum / rows), 1e-6);
  }
  EXPECT_THROW(EvalReport::from_predictions({1}, {1, 2}), Error);
}

TEST(Evaluate, BaselineIsMeanAbsoluteDeviation) {
  const Dataset d = gen_dataset(small_data(40, 25, 1));
  double train_mean = 0;
  for (const Sample& s : d.train) train_mean += static_cast<double>(s.count);
  train_mean /= d.train.size();
  double mad = 0;
  for (const Sample& s : d.val) mad += std::abs(static_cast<double>(s.count) - train_mean);
  mad /= d.val.size();
  EXPECT_NEAR(baseline_mean(d.train, d.val).mae, mad, 1e-12);
}

TEST(Evaluate, IndependentOfBatchingAndDeterministic) {
  const Dataset d = gen_dataset(small_data(1, 11, 1));
  Rng rng(5);
  const auto params = model::build_model<float>(model::ModelConfig::desk(), rng);
  const TrainConfig tc;
  const EvalReport a = evaluate(params, d.val, tc, 1);
  const EvalReport b = evaluate(params, d.val, tc, 4);
  const EvalReport c = evaluate(params, d.val, tc, 50);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a, c);
  EXPECT_EQ(evaluate(params, d.val, tc, 4), b);
}

TEST(Train, ScheduledLearningRate) {
  TrainConfig c;
  c.lr = 0.01;
  EXPECT_DOUBLE_EQ(scheduled_lr(c, 0, 100), 0.01);
  EXPECT_NEAR(scheduled_lr(c, 50, 100), 0.005, 1e-15);
  c.schedule = LrSchedule::kConstant;
  EXPECT_DOUBLE_EQ(scheduled_lr(c, 99, 100), 0.01);
  EXPECT_EQ(TrainConfig::from_json(TrainConfig::paper().to_json()).batch_size, 24u);
  EXPECT_THROW(TrainConfig::from_json({{"batch_size", 0}}), Error);
}

TEST(Train, ZeroLearningRateLeavesParameters) {
  const Dataset d = gen_dataset(small_data(16, 4, 1));
  TrainConfig c = quick_train(1);
  c.lr = 0;
  Rng rng(c.seed);
  auto init = model::build_model<float>(model::ModelConfig::desk(), rng);
  const TrainResult r = train(c, init.config, d.train, d.val, nullptr, &init);
  for (const auto& e : init.tensors.entries()) {
    if (!e.trainable) continue;
    EXPECT_EQ(r.final_params.tensors.at(e.name), e.tensor) << e.name;
  }
}

TEST(Train, ReproducibleLossesLogsAndReports) {
  const Dataset d = gen_dataset(small_data(24, 6, 6));
  const TrainConfig c = quick_train(2);
  std::ostringstream log_a, log_b;
  const TrainResult a = train(c, model::ModelConfig::desk(), d.train, d.val, &log_a);
  const TrainResult b = train(c, model::ModelConfig::desk(), d.train, d.val, &log_b);
  EXPECT_EQ(a.step_losses, b.step_losses);
  EXPECT_EQ(a.final_params, b.final_params);
  EXPECT_EQ(evaluate(a.best_params, d.test, c, 5), evaluate(b.best_params, d.test, c, 5));
  auto strip_seconds = [](std::string text) {
    std::string out;
    std::istringstream in(text);
    for (std::string line; std::getline(in, line);) out += line.substr(0, line.find(" seconds=")) + "\n";
    return out;
  };
  EXPECT_EQ(strip_seconds(log_a.str()), strip_seconds(log_b.str()));
  EXPECT_NE(log_a.str().find("event=epoch epoch=2"), std::string::npos);
  EXPECT_EQ(a.epochs.size(), 2u);
  EXPECT_EQ(a.step_losses.size(), 6u);
}

TEST(Train, StepsReduceLossOnFixedBatch) {
  const Dataset d = gen_dataset(small_data(8, 1, 1));
  Rng rng(6);
  auto params = model::build_model<float>(model::ModelConfig::desk(), rng);
  TrainConfig tc;
  std::vector<Prepared> items;
  for (const Sample& s : d.train) items.push_back(preprocess(s, tc, rng, Phase::kEval));
  const auto [x, t] = stack_batch(items);
  AdamState<float> adam;
  std::vector<double> losses;
  for (int step = 0; step < 40; ++step) {
    Rng drop(step);
    losses.push_back(train_step(params, adam, x, t, 1.0, drop));
  }
  EXPECT_LT(losses.back(), 0.5 * losses.front());
}

TEST(Train, DivergenceIsReported) {
  const Dataset d = gen_dataset(small_data(16, 2, 1));
  TrainConfig c = quick_train(1);
  c.lr = 1e30;
  try {
    train(c, model::ModelConfig::desk(), d.train, d.val, nullptr);
    FAIL() << "expected divergence";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "diverged");
  }
}

TEST(Ablation, RunsAllVariants) {
  const Dataset d = gen_dataset(small_data(16, 4, 4));
  AblationConfig c;
  c.epochs = 1;
  c.pretext_epochs = 1;
  c.train.batch_size = 8;
  c.pretext_data.train = 16;
  c.pretext_data.val = 4;
  const AblationResult r = ablation_run(c, d);
  ASSERT_EQ(r.rows.size(), 5u);
  EXPECT_EQ(ablation_variants(), (std::vector<std::string>{"plain", "lk", "lk_parallel", "lk_reparam", "lk_reparam_rsy"}));
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(r.rows[i].variant, ablation_variants()[i]);
    EXPECT_TRUE(std::isfinite(r.rows[i].report.mae));
    EXPECT_EQ(r.rows[i].report.n, 4u);
  }
  EXPECT_EQ(r.rows[3].block_mode, "fused");
  const std::string csv = r.to_csv();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "variant,mae,mse,params,block_mode,seconds");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 7);
}
