#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "lkc/core/error.hpp"
#include "lkc/model/erf.hpp"
#include "lkc/model/gradcheck_suite.hpp"
#include "lkc/model/model.hpp"
#include "oracles.hpp"

using namespace lkc;
using namespace lkc::model;
using test::random_tensor;

namespace {

/// Parameter count from the architecture description alone.
std::size_t expected_parameters(const ModelConfig& c, bool fused) {
  std::size_t n = 9 * c.input_channels * c.stem_channels + 2 * c.stem_channels;
  std::size_t prev = c.stem_channels;
  for (const StageConfig& s : c.stages) {
    if (s.stride > 1 || s.channels != prev) n += 9 * prev * s.channels + 2 * s.channels;
    const std::size_t ch = s.channels, e = c.expansion * ch;
    for (std::size_t b = 0; b < s.blocks; ++b) {
      if (fused) {
        n += s.large_kernel * s.large_kernel * ch + ch;
      } else {
        n += s.large_kernel * s.large_kernel * ch + 2 * ch;
        if (s.small_kernel) n += s.small_kernel * s.small_kernel * ch + 2 * ch;
      }
      n += ch * e + 2 * e + e * ch + ch;
    }
    prev = ch;
  }
  const std::size_t pooled = prev * c.head.pool_h * c.head.pool_w;
  return n + pooled * c.head.hidden + c.head.hidden + c.head.hidden + 1;
}

/// Non-trivial running statistics and affine terms, as after training.
template <Real T>
void randomize_bn(ModelParams<T>& params, Rng& rng) {
  for (auto& e : params.tensors.entries()) {
    const bool mean = e.name.ends_with("bn.mean"), var = e.name.ends_with("bn.var");
    const bool weight = e.name.ends_with("bn.weight"), bias = e.name.ends_with("bn.bias");
    for (std::size_t i = 0; i < e.tensor.size(); ++i) {
      if (mean || bias) e.tensor[i] = static_cast<T>(0.3 * rng.normal());
      if (var) e.tensor[i] = static_cast<T>(rng.uniform(0.5, 2.0));
      if (weight) e.tensor[i] = static_cast<T>(rng.uniform(0.5, 1.5));
    }
  }
}

/// Receptive-field half-width from kernel sizes and strides.
std::size_t nominal_radius(const ModelConfig& c) {
  std::size_t r = 1, jump = 2, prev = c.stem_channels;
  for (const StageConfig& s : c.stages) {
    if (s.stride > 1 || s.channels != prev) {
      r += jump;
      jump *= s.stride;
    }
    r += s.blocks * (s.large_kernel / 2) * jump;
    prev = s.channels;
  }
  return r;
}

}  // namespace

TEST(BuildModel, DeterministicGivenSeed) {
  Rng a(1), b(1), c(2);
  const auto pa = build_model<float>(ModelConfig::desk(), a);
  const auto pb = build_model<float>(ModelConfig::desk(), b);
  const auto pc = build_model<float>(ModelConfig::desk(), c);
  EXPECT_EQ(pa, pb);
  EXPECT_FALSE(pa == pc);
}

TEST(BuildModel, ParameterCountsMatchArchitecture) {
  for (const char* name : {"desk", "tiny", "paper"}) {
    const ModelConfig config = ModelConfig::preset(name);
    Rng rng(3);
    const auto params = build_model<float>(config, rng);
    EXPECT_EQ(params.parameter_count(), expected_parameters(config, false)) << name;
    EXPECT_EQ(fuse_model(params).parameter_count(), expected_parameters(config, true)) << name;
  }
  Rng rng(4);
  EXPECT_LT(build_model<float>(ModelConfig::desk(), rng).parameter_count(), 2000000u);
  EXPECT_LE(build_model<double>(ModelConfig::tiny(), rng).parameter_count(), 500u);

  ModelConfig head_only;
  head_only.input_channels = 1;
  head_only.stem_channels = 4;
  head_only.head = {1, 1, 8, 0.5};
  Rng r2(5);
  // stem 3x3 kernel + BN pair, then fc1 4->8 and fc2 8->1.
  EXPECT_EQ(build_model<float>(head_only, r2).parameter_count(), 9u * 4 + 8 + (4 * 8 + 8) + (8 + 1));
}

TEST(BuildModel, RejectsInvalidConfigs) {
  ModelConfig c = ModelConfig::desk();
  c.stages[0].large_kernel = 12;
  EXPECT_THROW(c.validate(), Error);
  c = ModelConfig::desk();
  c.stages[0].small_kernel = 13;
  EXPECT_THROW(c.validate(), Error);
  c = ModelConfig::desk();
  c.head.dropout = 1.0;
  EXPECT_THROW(c.validate(), Error);
  EXPECT_EQ(ModelConfig::from_json(ModelConfig::desk().to_json()), ModelConfig::desk());
  EXPECT_EQ(ModelConfig::from_json({{"preset", "tiny"}}), ModelConfig::tiny());
}

TEST(Forward, ZeroHeadPredictsFinalBias) {
  Rng rng(6);
  auto params = build_model<float>(ModelConfig::desk(), rng);
  params.tensors.at("head.fc1.weight").fill(0);
  params.tensors.at("head.fc2.weight").fill(0);
  params.tensors.at("head.fc2.bias")[0] = 7.25f;
  const Tensor<float> x = random_tensor<float>({3, 1, 96, 96}, rng);
  for (ForwardMode mode : {ForwardMode::kEval, ForwardMode::kMc, ForwardMode::kTrain})
    EXPECT_EQ(predict(params, x, mode, rng).vector(), std::vector<float>(3, 7.25f));
}

TEST(Forward, AdaptivePoolingAbsorbsResolution) {
  Rng rng(7);
  const auto params = build_model<float>(ModelConfig::desk(), rng);
  for (std::size_t size : {96, 128, 100}) {
    const Tensor<float> y = predict(params, random_tensor<float>({2, 1, size, size}, rng), ForwardMode::kEval, rng);
    ASSERT_EQ(y.shape(), (Shape{2}));
    EXPECT_TRUE(y.all_finite());
  }
}

TEST(Forward, RejectsTooSmallInputWithMinimum) {
  Rng rng(8);
  const auto params = build_model<float>(ModelConfig::desk(), rng);
  const std::size_t min = min_input_extent(ModelConfig::desk());
  EXPECT_NO_THROW(predict(params, Tensor<float>({1, 1, min, min}), ForwardMode::kEval, rng));
  try {
    predict(params, Tensor<float>({1, 1, min - 1, min - 1}), ForwardMode::kEval, rng);
    FAIL() << "expected input_too_small";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "input_too_small");
    EXPECT_NE(std::string(e.what()).find(std::to_string(min)), std::string::npos);
  }
}

TEST(Forward, EvalDeterministicAndPermutationEquivariant) {
  Rng rng(9);
  auto params = build_model<float>(ModelConfig::desk(), rng);
  randomize_bn(params, rng);
  const Tensor<float> x = random_tensor<float>({4, 1, 96, 96}, rng);
  Rng r1(1), r2(2);
  const Tensor<float> y = predict(params, x, ForwardMode::kEval, r1);
  EXPECT_EQ(predict(params, x, ForwardMode::kEval, r2), y);

  const std::size_t perm[] = {2, 0, 3, 1};
  const std::size_t per = x.size() / 4;
  Tensor<float> xp(x.shape());
  for (std::size_t i = 0; i < 4; ++i) std::copy(x.data() + perm[i] * per, x.data() + (perm[i] + 1) * per, xp.data() + i * per);
  const Tensor<float> yp = predict(params, xp, ForwardMode::kEval, r1);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(yp[i], y[perm[i]]);
}

TEST(Forward, McDropoutVaries) {
  Rng rng(10);
  auto params = build_model<float>(ModelConfig::desk(), rng);
  const Tensor<float> x = random_tensor<float>({2, 1, 96, 96}, rng);
  const McPrediction<float> mc = mc_predict(params, x, 20, rng);
  ASSERT_EQ(mc.std.shape(), (Shape{2}));
  EXPECT_GT(mc.std[0], 0.0f);
  EXPECT_GT(mc.std[1], 0.0f);
  Rng again(10);
  const McPrediction<float> one = mc_predict(params, x, 1, again);
  EXPECT_EQ(one.std.vector(), std::vector<float>(2, 0.0f));
  EXPECT_THROW(mc_predict(params, x, 0, rng), Error);
}

TEST(Forward, TrainModeBnStatisticsUpdateRunningStats) {
  Rng rng(11);
  auto params = build_model<double>(ModelConfig::tiny(), rng);
  const Tensor<double> x = random_tensor<double>({3, 1, 8, 8}, rng);
  Tape<double> tape;
  BnStats<double> stats;
  ForwardOptions<double> o;
  o.mode = ForwardMode::kTrain;
  o.bn_stats = &stats;
  forward(tape, params, x, rng, o);
  const Tensor<double> before = params.tensors.at("stem.bn.mean");
  apply_bn_updates(params, stats, 0.1);

  const ConvSpec stem = ConvSpec::same(1, params.config.stem_channels, 3, 1, 2);
  const Tensor<double> conv = test::conv_reference(x, params.tensors.at("stem.conv.kernel"), nullptr, stem);
  const std::size_t c = conv.dim(1), plane = conv.dim(2) * conv.dim(3);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum = 0;
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t i = 0; i < plane; ++i) sum += conv[(n * c + ch) * plane + i];
    EXPECT_NEAR(params.tensors.at("stem.bn.mean")[ch], 0.9 * before[ch] + 0.1 * sum / (3 * plane), 1e-12);
  }
}

TEST(Gradients, SuitePassesIn64And32Bit) {
  for (const auto& c : run_gradcheck_suite<double>(1e-4)) EXPECT_TRUE(c.passed) << c.name << " " << c.report.max_rel_error;
  for (const auto& c : run_gradcheck_suite<float>(1e-3, 1e-5, 1, 1e-3))
    EXPECT_TRUE(c.passed) << c.name << " " << c.report.max_rel_error;
}

TEST(FuseModel, PreservesEvalPredictions) {
  Rng rng(12);
  auto params = build_model<float>(ModelConfig::desk(), rng);
  randomize_bn(params, rng);
  const auto fused = fuse_model(params);
  EXPECT_EQ(fused.config.block_mode, BlockMode::kFused);
  EXPECT_TRUE(fused.tensors.contains("block0.fused.kernel"));
  EXPECT_FALSE(fused.tensors.contains("block0.branch0.kernel"));
  double worst = 0;
  for (int b = 0; b < 10; ++b) {
    const Tensor<float> x = random_tensor<float>({10, 1, 96, 96}, rng);
    worst = std::max<double>(worst, max_abs_diff(predict(params, x, ForwardMode::kEval, rng),
                                                 predict(fused, x, ForwardMode::kEval, rng)));
  }
  EXPECT_LE(worst, 1e-3);
  EXPECT_EQ(fuse_model(fused), fused);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Rng rng(13);
  auto params = build_model<float>(ModelConfig::desk(), rng);
  randomize_bn(params, rng);
  const auto dir = std::filesystem::temp_directory_path();
  for (const auto& p : {params, fuse_model(params)}) {
    const auto path = dir / "lkc_model_roundtrip.lkc1";
    save_checkpoint(p, path);
    const auto back = load_checkpoint<float>(path);
    EXPECT_EQ(back, p);
    EXPECT_EQ(encode_lkc1(to_archive(back)), encode_lkc1(to_archive(p)));
    std::filesystem::remove(path);
  }
  Rng r2(14);
  const auto tiny = build_model<double>(ModelConfig::tiny(), r2);
  EXPECT_EQ(from_archive<double>(decode_lkc1(encode_lkc1(to_archive(tiny)))), tiny);
}

TEST(Checkpoint, RejectsInconsistentArchives) {
  Rng rng(15);
  const auto params = build_model<float>(ModelConfig::tiny(), rng);
  TensorArchive extra = to_archive(params);
  extra.put("stray", Tensor<float>({1}));
  EXPECT_THROW(from_archive<float>(extra), Error);
  TensorArchive bad;
  for (const auto& name : to_archive(params).names()) {
    const auto& v = to_archive(params).at(name);
    if (name == "head.fc2.bias")
      bad.put(name, Tensor<float>({2}));
    else if (const auto* t = std::get_if<Tensor<float>>(&v))
      bad.put(name, *t);
    else
      bad.put_text(name, std::get<std::string>(v));
  }
  EXPECT_THROW(from_archive<float>(bad), Error);
  EXPECT_THROW(from_archive<float>(TensorArchive{}), Error);
}

TEST(Erf, NoMassOutsideNominalWindow) {
  Rng rng(16);
  auto params = build_model<float>(ModelConfig::desk(), rng);
  randomize_bn(params, rng);
  const std::size_t r = nominal_radius(params.config);
  for (ErfProbe probe : {ErfProbe::kFeature, ErfProbe::kOutput}) {
    const ErfReport report = measure_erf(params, 96, probe, 2, rng);
    EXPECT_EQ(report.mass_outside, 0.0);
    EXPECT_GT(report.total_mass, 0.0);
    long y_lo = 1 << 20, y_hi = -1, x_lo = 1 << 20, x_hi = -1;
    for (std::size_t y = 0; y < 96; ++y)
      for (std::size_t x = 0; x < 96; ++x) {
        const double v = report.heatmap(y, x);
        ASSERT_GE(v, 0.0);
        if (v == 0) continue;
        EXPECT_TRUE(report.nominal.contains(static_cast<long>(y), static_cast<long>(x)));
        y_lo = std::min<long>(y_lo, y), y_hi = std::max<long>(y_hi, y);
        x_lo = std::min<long>(x_lo, x), x_hi = std::max<long>(x_hi, x);
      }
    if (probe == ErfProbe::kFeature) {
      EXPECT_EQ(report.nominal_radius, static_cast<double>(r));
      EXPECT_LE(static_cast<std::size_t>(y_hi - y_lo), 2 * r);
      EXPECT_LE(static_cast<std::size_t>(x_hi - x_lo), 2 * r);
      EXPECT_LE(report.r95, report.nominal_radius);
    }
  }
  const auto fused = fuse_model(params);
  EXPECT_EQ(measure_erf(fused, 96, ErfProbe::kFeature, 2, rng).mass_outside, 0.0);
}

TEST(Erf, SingleThreeByThreeIsLocal) {
  Rng rng(17);
  const auto stack = random_stack<double>({3}, 2, rng);
  const ErfReport report = measure_stack_erf(stack, 15, 3, rng);
  for (std::size_t y = 0; y < 15; ++y)
    for (std::size_t x = 0; x < 15; ++x) {
      const bool near = std::abs(static_cast<long>(y) - 7) <= 1 && std::abs(static_cast<long>(x) - 7) <= 1;
      if (near) continue;
      EXPECT_EQ(report.heatmap(y, x), 0.0) << y << "," << x;
    }
  EXPECT_GT(report.heatmap(7, 7), 0.0);
  EXPECT_EQ(report.mass_outside, 0.0);
}

TEST(Erf, DeltaStackHasPointSupport) {
  Rng rng(18);
  const ErfReport report = measure_stack_erf(delta_stack<double>(5, 3, 2), 17, 2, rng);
  std::size_t nonzero = 0;
  for (std::size_t i = 0; i < report.heatmap.size(); ++i) nonzero += report.heatmap[i] != 0;
  EXPECT_EQ(nonzero, 1u);
  EXPECT_EQ(report.r95, 0.0);
  EXPECT_EQ(report.depth, 5u);
  EXPECT_EQ(report.nominal_radius, 5.0);
}

TEST(Erf, StackComparisonReportsBoth) {
  Rng rng(19);
  const StackComparison cmp = compare_stack_erf(4, 3, 2, 25, 4, rng);
  EXPECT_EQ(cmp.stacked.nominal_radius, 4.0);
  EXPECT_EQ(cmp.single.nominal_radius, 4.0);
  EXPECT_EQ(cmp.stacked.depth, 4u);
  EXPECT_EQ(cmp.single.depth, 1u);
  EXPECT_LE(cmp.stacked.r95, 4.0);
  EXPECT_LE(cmp.single.r95, 4.0);
  const std::string csv = stack_comparison_csv(cmp, 3);
  EXPECT_NE(csv.find("stacked"), std::string::npos);
  EXPECT_NE(csv.find("single"), std::string::npos);
  const ErfReport& s = cmp.stacked;
  ASSERT_FALSE(s.profile.empty());
  EXPECT_NEAR(s.profile.back().cumulative, 1.0, 1e-12);
  for (std::size_t i = 1; i < s.profile.size(); ++i) EXPECT_GE(s.profile[i].cumulative, s.profile[i - 1].cumulative);
}
