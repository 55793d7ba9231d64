#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "lkc/core/adam.hpp"
#include "lkc/core/error.hpp"
#include "lkc/core/gradcheck.hpp"
#include "lkc/core/image_io.hpp"
#include "lkc/core/lkc1.hpp"
#include "lkc/core/tape.hpp"
#include "oracles.hpp"

using namespace lkc;
using test::random_tensor;

TEST(Rng, SeedZeroReferenceStream) {
  Rng rng(0);
  EXPECT_EQ(rng.next_u64(), 0xE220A8397B1DCDAFULL);
  EXPECT_EQ(rng.next_u64(), 0x6E789E6AA1B965F4ULL);
  EXPECT_EQ(rng.next_u64(), 0x06C45D188009454FULL);
  EXPECT_DOUBLE_EQ(Rng(0).uniform(), 0.8833108082136426);
}

TEST(Rng, IdenticalSeedsIdenticalStreams) {
  Rng a(42), b(42);
  for (int i = 0; i < 1000; ++i) ASSERT_EQ(a.next_u64(), b.next_u64());
  Rng c = Rng::derive(1, 2, 3), d = Rng::derive(1, 2, 3), e = Rng::derive(1, 2, 4);
  EXPECT_EQ(c.next_u64(), d.next_u64());
  EXPECT_NE(Rng::derive(1, 2, 3).next_u64(), e.next_u64());
}

TEST(Conv2d, AllOnesSamePadding) {
  const ConvSpec spec = ConvSpec::same(1, 1, 3);
  const Tensor<float> out = conv2d(Tensor<float>({1, 1, 3, 3}, 1.0f), Tensor<float>({1, 1, 3, 3}, 1.0f), spec);
  EXPECT_EQ(out.vector(), (std::vector<float>{4, 6, 4, 6, 9, 6, 4, 6, 4}));
}

TEST(Conv2d, DeltaKernelIsExactIdentity) {
  Rng rng(3);
  for (std::size_t groups : {std::size_t{1}, std::size_t{3}}) {
    const ConvSpec spec = ConvSpec::same(3, 3, 3, groups);
    Tensor<float> k(spec.kernel_shape());
    for (std::size_t o = 0; o < 3; ++o) k(o, groups == 1 ? o : 0, 1, 1) = 1.0f;
    const Tensor<float> x = random_tensor<float>({2, 3, 7, 5}, rng);
    EXPECT_EQ(conv2d(x, k, spec), x);
  }
}

TEST(Conv2d, DepthwiseThirteenMatchesNestedLoop) {
  Rng rng(5);
  const ConvSpec spec = ConvSpec::same(4, 4, 13, 4);
  const Tensor<float> x = random_tensor<float>({2, 4, 9, 9}, rng);
  const Tensor<float> k = random_tensor<float>(spec.kernel_shape(), rng);
  EXPECT_LE(test::max_diff(conv2d(x, k, spec), test::conv_reference(x, k, nullptr, spec)), 1e-5);
}

struct ConvCase {
  std::size_t cin, cout, k, stride, pad, groups, h, w;
  bool same;
};

class ConvOracleGrid : public ::testing::TestWithParam<ConvCase> {};

TEST_P(ConvOracleGrid, ForwardAndBackwardMatchReference) {
  const ConvCase c = GetParam();
  const ConvSpec spec = c.same ? ConvSpec::same(c.cin, c.cout, c.k, c.groups, c.stride)
                               : ConvSpec::padded(c.cin, c.cout, c.k, c.k, c.pad, c.pad, c.stride, c.groups);
  Rng rng(c.k * 131 + c.stride * 17 + c.groups);
  const Tensor<float> x = random_tensor<float>({2, c.cin, c.h, c.w}, rng);
  // Unit-variance outputs: the bound is absolute.
  const Tensor<float> k =
      random_tensor<float>(spec.kernel_shape(), rng, 1.0 / std::sqrt(static_cast<double>(c.cin / c.groups * c.k * c.k)));
  const Tensor<float> b = random_tensor<float>({c.cout}, rng);
  const Tensor<float> out = conv2d(x, k, b, spec);
  EXPECT_LE(test::max_diff(out, test::conv_reference(x, k, &b, spec)), 1e-5);

  // Backward: the input gradient of <out, g> is conv's adjoint; check it via
  // <conv(x), g> = <x, dx> and <conv(x), g> linearity in k (dk).
  const Tensor<double> x64 = x.cast<double>(), k64 = k.cast<double>();
  const Tensor<double> g = random_tensor<double>(out.shape(), rng);
  const ConvGrads<double> grads = conv2d_backward(x64, k64, g, spec, true);
  const Tensor<double> y = test::conv_reference(x64, k64, nullptr, spec);
  double lhs = 0, via_dx = 0, via_dk = 0, bias_ref = 0, bias_got = 0;
  for (std::size_t i = 0; i < y.size(); ++i) lhs += y[i] * g[i];
  for (std::size_t i = 0; i < x64.size(); ++i) via_dx += x64[i] * grads.input[i];
  for (std::size_t i = 0; i < k64.size(); ++i) via_dk += k64[i] * grads.kernel[i];
  for (std::size_t i = 0; i < g.size(); ++i) bias_ref += g[i];
  for (std::size_t i = 0; i < grads.bias.size(); ++i) bias_got += grads.bias[i];
  EXPECT_NEAR(via_dx, lhs, 1e-9 * (1 + std::abs(lhs)));
  EXPECT_NEAR(via_dk, lhs, 1e-9 * (1 + std::abs(lhs)));
  EXPECT_NEAR(bias_got, bias_ref, 1e-9 * (1 + std::abs(bias_ref)));
}

INSTANTIATE_TEST_SUITE_P(
    StridePadGroupsKernels, ConvOracleGrid,
    ::testing::Values(ConvCase{3, 5, 3, 1, 0, 1, 8, 7, true}, ConvCase{3, 5, 3, 2, 0, 1, 9, 8, true},
                      ConvCase{4, 6, 1, 1, 0, 2, 5, 5, true}, ConvCase{4, 4, 5, 1, 0, 4, 11, 9, true},
                      ConvCase{4, 4, 5, 2, 0, 4, 11, 9, true}, ConvCase{6, 4, 3, 3, 0, 2, 10, 10, true},
                      ConvCase{2, 3, 3, 1, 0, 1, 6, 6, false}, ConvCase{2, 3, 4, 2, 2, 1, 7, 6, false},
                      ConvCase{4, 4, 3, 1, 3, 4, 5, 5, false}, ConvCase{3, 3, 13, 1, 0, 3, 16, 14, true},
                      ConvCase{2, 2, 13, 2, 0, 1, 15, 15, true}, ConvCase{2, 2, 31, 1, 0, 2, 20, 18, true},
                      ConvCase{1, 2, 31, 3, 0, 1, 33, 31, true}, ConvCase{4, 4, 31, 1, 0, 4, 9, 9, true}));

TEST(Conv2d, Linearity) {
  Rng rng(9);
  const ConvSpec spec = ConvSpec::same(3, 3, 7, 3, 2);
  const Tensor<float> k = random_tensor<float>(spec.kernel_shape(), rng);
  const Tensor<float> x = random_tensor<float>({2, 3, 12, 12}, rng), y = random_tensor<float>({2, 3, 12, 12}, rng);
  const float a = 0.7f, b = -1.3f;
  Tensor<float> mix(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) mix[i] = a * x[i] + b * y[i];
  const Tensor<float> lhs = conv2d(mix, k, spec), cx = conv2d(x, k, spec), cy = conv2d(y, k, spec);
  Tensor<float> rhs(lhs.shape());
  for (std::size_t i = 0; i < rhs.size(); ++i) rhs[i] = a * cx[i] + b * cy[i];
  EXPECT_LE(max_abs_diff(lhs, rhs), 1e-5f);
}

TEST(Conv2d, RejectsBadGeometry) {
  EXPECT_THROW(ConvSpec::same(3, 4, 3, 2).validate(), Error);
  EXPECT_THROW(ConvSpec::same(2, 2, 4).validate(), Error);
  const ConvSpec spec = ConvSpec::same(2, 2, 3);
  EXPECT_THROW(conv2d(Tensor<float>({1, 3, 5, 5}), Tensor<float>(spec.kernel_shape()), spec), Error);
}

TEST(BatchNorm, EvalExamples) {
  BatchNormParams<double> p = BatchNormParams<double>::identity(1);
  p.var[0] = 1 - p.eps;
  Rng rng(1);
  const Tensor<double> x = random_tensor<double>({2, 1, 3, 3}, rng);
  EXPECT_LE(max_abs_diff(batchnorm_eval(x, p), x), 1e-15);
  p.mean[0] = 3;
  p.gamma[0] = 2;
  p.beta[0] = 1;
  EXPECT_NEAR(batchnorm_eval(Tensor<double>({1, 1, 1, 1}, 3.0), p)[0], 1.0, 1e-12);
}

TEST(BatchNorm, EvalMatchesOracleAndKeepsRunningStats) {
  Rng rng(2);
  BatchNormParams<float> p = test::random_bn<float>(4, rng);
  const BatchNormParams<float> before = p;
  const Tensor<float> x = random_tensor<float>({3, 4, 5, 6}, rng);
  const Tensor<float> a = batchnorm(x, p, Mode::kEval);
  const Tensor<float> b = batchnorm(x, p, Mode::kEval);
  EXPECT_EQ(a, b);
  EXPECT_EQ(p.mean, before.mean);
  EXPECT_EQ(p.var, before.var);
  EXPECT_LE(test::max_diff(a, test::bn_reference(x, p)), 1e-6);
}

TEST(BatchNorm, TrainUsesBiasedBatchStatsAndUpdatesRunning) {
  Rng rng(4);
  BatchNormParams<double> p = test::random_bn<double>(2, rng);
  const BatchNormParams<double> before = p;
  const Tensor<double> x = random_tensor<double>({3, 2, 4, 4}, rng);
  const Tensor<double> y = batchnorm(x, p, Mode::kTrain);
  for (std::size_t c = 0; c < 2; ++c) {
    double sum = 0, sq = 0;
    std::size_t n = 0;
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t i = 0; i < 16; ++i) {
        const double v = x[(b * 2 + c) * 16 + i];
        sum += v;
        sq += v * v;
        ++n;
      }
    const double mean = sum / n, var = sq / n - mean * mean;
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t i = 0; i < 16; ++i) {
        const std::size_t at = (b * 2 + c) * 16 + i;
        EXPECT_NEAR(y[at], before.gamma[c] * (x[at] - mean) / std::sqrt(var + p.eps) + before.beta[c], 1e-10);
      }
    EXPECT_NEAR(p.mean[c], 0.9 * before.mean[c] + 0.1 * mean, 1e-12);
    EXPECT_NEAR(p.var[c], 0.9 * before.var[c] + 0.1 * var, 1e-12);
  }
  EXPECT_THROW(batchnorm(Tensor<double>({1, 3, 2, 2}), p, Mode::kEval), Error);
}

TEST(AdaptiveAvgPool, Examples) {
  Tensor<float> x({1, 1, 4, 4});
  std::iota(x.data(), x.data() + 16, 1.0f);
  EXPECT_EQ(adaptive_avg_pool(x, 2, 2).vector(), (std::vector<float>{3.5f, 5.5f, 11.5f, 13.5f}));
  EXPECT_EQ(adaptive_avg_pool(x, 4, 4), x);
  EXPECT_FLOAT_EQ(adaptive_avg_pool(x, 1, 1)[0], 8.5f);
  EXPECT_THROW(adaptive_avg_pool(x, 5, 1), Error);
}

TEST(AdaptiveAvgPool, UnevenCellsMatchRegionOracle) {
  Rng rng(6);
  const Tensor<double> x = random_tensor<double>({2, 3, 7, 5}, rng);
  const Tensor<double> out = adaptive_avg_pool(x, 3, 2);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 2; ++j) {
          double sum = 0;
          std::size_t count = 0;
          for (std::size_t y = i * 7 / 3; y < (i + 1) * 7 / 3; ++y)
            for (std::size_t xx = j * 5 / 2; xx < (j + 1) * 5 / 2; ++xx, ++count) sum += x(n, c, y, xx);
          EXPECT_NEAR(out(n, c, i, j), sum / count, 1e-12);
        }
}

TEST(AdaptiveAvgPool, PreservesGlobalMeanWhenDivisible) {
  Rng rng(7);
  const Tensor<double> x = random_tensor<double>({1, 2, 6, 9}, rng);
  const Tensor<double> out = adaptive_avg_pool(x, 3, 3);
  const double in_mean = std::accumulate(x.data(), x.data() + x.size(), 0.0) / x.size();
  const double out_mean = std::accumulate(out.data(), out.data() + out.size(), 0.0) / out.size();
  EXPECT_NEAR(in_mean, out_mean, 1e-12);
}

TEST(Linear, Examples) {
  Rng rng(8);
  const Tensor<float> x = random_tensor<float>({3, 4}, rng);
  LinearParams<float> id{Tensor<float>({4, 4}), Tensor<float>({4})};
  for (std::size_t i = 0; i < 4; ++i) id.weight(i, i) = 1;
  EXPECT_EQ(linear(x, id), x);
  LinearParams<float> constant{Tensor<float>({2, 4}), Tensor<float>({2}, 2.5f)};
  EXPECT_EQ(linear(x, constant).vector(), std::vector<float>(6, 2.5f));
  LinearParams<float> p{random_tensor<float>({5, 4}, rng), random_tensor<float>({5}, rng)};
  const Tensor<float> y = linear(x, p);
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t o = 0; o < 5; ++o) {
      double dot = p.bias[o];
      for (std::size_t i = 0; i < 4; ++i) dot += static_cast<double>(p.weight(o, i)) * x(n, i);
      EXPECT_NEAR(y(n, o), dot, 1e-6);
    }
  EXPECT_THROW(linear(Tensor<float>({3, 3}), p), Error);
}

TEST(ReluDropout, Examples) {
  EXPECT_EQ(relu(Tensor<float>({3}, {-1, 0, 2})).vector(), (std::vector<float>{0, 0, 2}));
  Rng rng(10);
  const Tensor<float> x = random_tensor<float>({50}, rng);
  EXPECT_EQ(dropout(x, 0.0, rng, true).output, x);
  EXPECT_EQ(dropout(x, 0.5, rng, false).output, x);
}

TEST(ReluDropout, SurvivorFractionAndScaling) {
  Rng rng(11);
  const Tensor<float> x({1000000}, 1.0f);
  const DropoutResult<float> r = dropout(x, 0.5, rng, true);
  std::size_t survivors = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    ASSERT_TRUE(r.output[i] == 0.0f || r.output[i] == 2.0f);
    survivors += r.output[i] != 0.0f;
  }
  EXPECT_NEAR(static_cast<double>(survivors) / x.size(), 0.5, 0.002);
}

TEST(SmoothL1, ValuesAndContinuityAtBeta) {
  auto loss = [](double d, double beta) {
    return smooth_l1(Tensor<double>({1}, d), Tensor<double>({1}, 0.0), beta);
  };
  EXPECT_EQ(loss(0, 1), 0.0);
  EXPECT_DOUBLE_EQ(loss(0.5, 1), 0.125);
  EXPECT_DOUBLE_EQ(loss(2, 1), 1.5);
  EXPECT_DOUBLE_EQ(smooth_l1(Tensor<double>({2}, {0.5, 2}), Tensor<double>({2}), 1.0), (0.125 + 1.5) / 2);
  for (double beta : {0.5, 1.0, 2.0}) {
    const double e = 1e-7;
    EXPECT_NEAR(loss(beta - e, beta), loss(beta + e, beta), 1e-6);
    const double left = (loss(beta, beta) - loss(beta - e, beta)) / e;
    const double right = (loss(beta + e, beta) - loss(beta, beta)) / e;
    EXPECT_NEAR(left, 1.0, 1e-5);
    EXPECT_NEAR(right, 1.0, 1e-5);
  }
}

TEST(Tape, IndependentParameterHasZeroGradient) {
  Tape<double> tape;
  Rng rng(12);
  const auto x = tape.param("x", random_tensor<double>({3}, rng));
  tape.param("unused", random_tensor<double>({2}, rng));
  tape.backward(tape.smooth_l1(x, Tensor<double>({3}), 1.0));
  for (const auto& [name, g] : tape.param_grads()) {
    if (name != "unused") continue;
    for (std::size_t i = 0; i < g.size(); ++i) EXPECT_EQ(g[i], 0.0);
  }
}

TEST(Tape, LinearSmoothL1QuadraticClosedForm) {
  Rng rng(13);
  const Tensor<double> x = random_tensor<double>({4, 3}, rng, 0.1);
  const Tensor<double> w = random_tensor<double>({1, 3}, rng, 0.1);
  const Tensor<double> target = random_tensor<double>({4}, rng, 0.1);
  const double beta = 2.0;
  Tape<double> tape;
  const auto xv = tape.constant(x);
  const auto wv = tape.param("w", w);
  const auto bv = tape.param("b", Tensor<double>({1}));
  const auto pred = tape.reshape(tape.linear(xv, wv, bv), {4});
  tape.backward(tape.smooth_l1(pred, target, beta));
  const Tensor<double> gw = tape.param_grads().front().second;
  for (std::size_t j = 0; j < 3; ++j) {
    double expected = 0;
    for (std::size_t n = 0; n < 4; ++n) {
      double p = 0;
      for (std::size_t i = 0; i < 3; ++i) p += w(0, i) * x(n, i);
      ASSERT_LT(std::abs(p - target[n]), beta);
      expected += (p - target[n]) / beta * x(n, j) / 4;
    }
    EXPECT_NEAR(gw[j], expected, 1e-14);
  }
}

TEST(Tape, ConvBackwardMatchesFiniteDifferences) {
  Rng rng(14);
  const ConvSpec spec = ConvSpec::same(2, 2, 5, 2);
  TensorMap<double> params;
  params.set("x", random_tensor<double>({1, 2, 6, 6}, rng));
  params.set("k", random_tensor<double>(spec.kernel_shape(), rng));
  const Tensor<double> weights = random_tensor<double>({1, 2, 6, 6}, rng);
  const LossFn<double> loss = [&](const TensorMap<double>& p) {
    Tape<double> t;
    return t.value(t.weighted_sum(t.conv2d(t.param("x", p.at("x")), t.param("k", p.at("k")), spec), weights))[0];
  };
  Tape<double> t;
  t.backward(t.weighted_sum(t.conv2d(t.param("x", params.at("x")), t.param("k", params.at("k")), spec), weights));
  const GradCheckReport r = compare_gradients(t.param_grads(), finite_diff_grad(loss, params));
  EXPECT_LE(r.max_rel_error, 1e-4) << r.worst_parameter << "[" << r.worst_index << "]";
}

TEST(Adam, ZeroGradientLeavesParameters) {
  TensorMap<double> params;
  params.set("w", Tensor<double>({3}, {1, -2, 3}));
  const TensorMap<double> before = params;
  AdamState<double> state;
  adam_step(params, {{"w", Tensor<double>({3})}}, state);
  EXPECT_EQ(params, before);
}

TEST(Adam, FirstStepMovesByLr) {
  TensorMap<double> params;
  params.set("w", Tensor<double>({2}, {1, 1}));
  AdamState<double> state;
  state.config.lr = 0.01;
  adam_step(params, {{"w", Tensor<double>({2}, {3, -0.5})}}, state);
  EXPECT_NEAR(params.at("w")[0], 1 - 0.01, 1e-8);
  EXPECT_NEAR(params.at("w")[1], 1 + 0.01, 1e-8);
}

TEST(Adam, QuadraticConverges) {
  TensorMap<double> params;
  params.set("theta", Tensor<double>({1}, 1.0));
  AdamState<double> state;
  state.config.lr = 0.1;
  for (int i = 0; i < 100; ++i) adam_step(params, {{"theta", Tensor<double>({1}, 2 * params.at("theta")[0])}}, state);
  EXPECT_LT(std::abs(params.at("theta")[0]), 0.1);
}

TEST(Lkc1, RoundTripIsBitExact) {
  Rng rng(15);
  TensorArchive archive;
  Tensor<float> f = random_tensor<float>({2, 3, 4}, rng);
  f[0] = -0.0f;
  f[1] = std::numeric_limits<float>::denorm_min();
  archive.put("a.f32", f);
  archive.put("b.f64", random_tensor<double>({5}, rng));
  archive.put_text("config", "{\"k\": 1}");
  const std::string bytes = encode_lkc1(archive);
  EXPECT_EQ(bytes.substr(0, 4), "LKC1");
  const TensorArchive back = decode_lkc1(bytes);
  EXPECT_EQ(back, archive);
  EXPECT_EQ(encode_lkc1(back), bytes);
  EXPECT_TRUE(std::signbit(back.tensor<float>("a.f32")[0]));

  const auto path = std::filesystem::temp_directory_path() / "lkc_core_roundtrip.lkc1";
  save_tensors(archive, path);
  EXPECT_EQ(load_tensors(path), archive);
  std::filesystem::remove(path);
}

TEST(Lkc1, RejectsCorruptInput) {
  TensorArchive archive;
  archive.put("x", Tensor<float>({4}, 1.0f));
  std::string bytes = encode_lkc1(archive);
  EXPECT_THROW(decode_lkc1("LKC2" + bytes.substr(4)), Error);
  EXPECT_THROW(decode_lkc1(bytes.substr(0, bytes.size() - 1)), Error);
  EXPECT_THROW(load_tensors("/nonexistent/file.lkc1"), Error);
}

TEST(ImageIo, PnmRoundTrip) {
  Tensor<float> gray({1, 2, 3}, {0, 1, 0.5f, 0.25f, 1, 0});
  Tensor<float> back = decode_pnm(encode_pnm(gray));
  EXPECT_LE(max_abs_diff(back, gray), 0.5f / 255 + 1e-6f);
  Tensor<float> rgb({3, 2, 2});
  for (std::size_t i = 0; i < rgb.size(); ++i) rgb[i] = static_cast<float>(i) / 255;
  EXPECT_EQ(decode_pnm(encode_pnm(rgb)), rgb);
  EXPECT_THROW(decode_pnm("P3\n1 1\n255\n0 0 0\n"), Error);
}
