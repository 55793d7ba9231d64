#include "lkc/model/gradcheck_suite.hpp"

#include "lkc/core/tape.hpp"
#include "lkc/model/model.hpp"

namespace lkc::model {

namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
  return t;
}

template <Real T>
TensorMap<T> cast_map(const TensorMap<double>& m) {
  TensorMap<T> out;
  for (const auto& e : m.entries()) out.set(e.name, e.tensor.template cast<T>(), e.trainable);
  return out;
}

template <Real T>
std::vector<typename Tape<T>::Var> register_all(Tape<T>& tape, const TensorMap<T>& params) {
  std::vector<typename Tape<T>::Var> vars;
  for (const auto& e : params.entries())
    vars.push_back(e.trainable ? tape.param(e.name, e.tensor) : tape.constant(e.tensor));
  return vars;
}

/// `graph(tape, vars)` returns the scalar loss and must work for both tape
/// precisions.
template <Real T, class Graph>
GradCheckCase check(const std::string& name, const TensorMap<double>& params, Graph graph, double tolerance,
                    double h, double floor) {
  const LossFn<double> loss = [&](const TensorMap<double>& p) {
    Tape<double> tape;
    return tape.value(graph(tape, register_all(tape, p)))[0];
  };
  const TensorMap<T> p = cast_map<T>(params);
  Tape<T> tape;
  tape.backward(graph(tape, register_all(tape, p)));
  NamedGrads<double> analytic;
  for (auto& [n, g] : tape.param_grads()) analytic.emplace_back(n, g.template cast<double>());
  GradCheckCase c;
  c.name = name;
  c.parameters = params.trainable_values();
  c.report = compare_gradients(analytic, finite_diff_grad(loss, params, h), floor);
  c.passed = c.report.max_rel_error <= tolerance;
  return c;
}

/// Scalar projection of an op output with fixed random weights.
template <Real T>
typename Tape<T>::Var project(Tape<T>& tape, typename Tape<T>::Var v, std::uint64_t seed) {
  Rng rng(seed);
  return tape.weighted_sum(v, random_tensor(tape.value(v).shape(), rng).template cast<T>());
}

}  // namespace

template <Real T>
std::vector<GradCheckCase> run_gradcheck_suite(double tolerance, double h, std::uint64_t seed, double floor) {
  std::vector<GradCheckCase> out;
  std::uint64_t case_id = 0;
  auto next_rng = [&] { return Rng::derive(seed, ++case_id); };
  auto add = [&](const std::string& name, const TensorMap<double>& p, auto graph) {
    out.push_back(check<T>(name, p, graph, tolerance, h, floor));
  };

  {
    Rng rng = next_rng();
    const ConvSpec spec = ConvSpec::padded(2, 3, 3, 3, 1, 0, 2);
    TensorMap<double> p;
    p.set("x", random_tensor({2, 2, 7, 6}, rng));
    p.set("kernel", random_tensor(spec.kernel_shape(), rng));
    p.set("bias", random_tensor({3}, rng));
    add("conv2d_dense_stride2", p, [&](auto& t, const auto& v) { return project(t, t.conv2d(v[0], v[1], v[2], spec), 11); });
  }
  {
    Rng rng = next_rng();
    const ConvSpec spec = ConvSpec::same(3, 3, 5, 3);
    TensorMap<double> p;
    p.set("x", random_tensor({2, 3, 6, 6}, rng));
    p.set("kernel", random_tensor(spec.kernel_shape(), rng));
    add("conv2d_depthwise", p, [&](auto& t, const auto& v) { return project(t, t.conv2d(v[0], v[1], spec), 12); });
  }
  {
    Rng rng = next_rng();
    const ConvSpec spec = ConvSpec::same(4, 2, 3, 2, 2);
    TensorMap<double> p;
    p.set("x", random_tensor({1, 4, 7, 7}, rng));
    p.set("kernel", random_tensor(spec.kernel_shape(), rng));
    add("conv2d_grouped_stride2", p, [&](auto& t, const auto& v) { return project(t, t.conv2d(v[0], v[1], spec), 13); });
  }
  {
    Rng rng = next_rng();
    TensorMap<double> p;
    p.set("x", random_tensor({3, 2, 3, 3}, rng));
    p.set("gamma", random_tensor({2}, rng));
    p.set("beta", random_tensor({2}, rng));
    add("batchnorm_train", p,
        [&](auto& t, const auto& v) { return project(t, t.batchnorm_train(v[0], v[1], v[2], 1e-5), 14); });
  }
  {
    Rng rng = next_rng();
    TensorMap<double> p;
    p.set("x", random_tensor({2, 3, 2, 3}, rng));
    p.set("gamma", random_tensor({3}, rng));
    p.set("beta", random_tensor({3}, rng));
    const Tensor<double> mean = random_tensor({3}, rng);
    Tensor<double> var({3});
    for (std::size_t i = 0; i < 3; ++i) var[i] = rng.uniform(0.5, 2.0);
    add("batchnorm_eval", p, [&](auto& t, const auto& v) {
      using U = typename std::remove_cvref_t<decltype(t.value(v[0]))>::value_type;
      return project(t, t.batchnorm_eval(v[0], v[1], v[2], mean.cast<U>(), var.cast<U>(), 1e-5), 15);
    });
  }
  {
    Rng rng = next_rng();
    TensorMap<double> p;
    p.set("x", random_tensor({2, 2, 7, 5}, rng));
    add("adaptive_avg_pool", p, [&](auto& t, const auto& v) { return project(t, t.adaptive_avg_pool(v[0], 3, 2), 16); });
  }
  {
    Rng rng = next_rng();
    TensorMap<double> p;
    p.set("x", random_tensor({3, 5}, rng));
    p.set("weight", random_tensor({4, 5}, rng));
    p.set("bias", random_tensor({4}, rng));
    add("linear", p, [&](auto& t, const auto& v) { return project(t, t.linear(v[0], v[1], v[2]), 17); });
  }
  {
    Rng rng = next_rng();
    TensorMap<double> p;
    p.set("x", random_tensor({4, 6}, rng));
    add("relu", p, [&](auto& t, const auto& v) { return project(t, t.relu(v[0]), 18); });
  }
  {
    Rng rng = next_rng();
    TensorMap<double> p;
    p.set("x", random_tensor({4, 6}, rng));
    add("dropout", p, [&](auto& t, const auto& v) {
      Rng mask(19);
      return project(t, t.dropout(v[0], 0.5, mask, true), 20);
    });
  }
  {
    Rng rng = next_rng();
    TensorMap<double> p;
    p.set("pred", random_tensor({6}, rng, 1.5));
    const Tensor<double> target = random_tensor({6}, rng);
    add("smooth_l1", p, [&](auto& t, const auto& v) {
      using U = typename std::remove_cvref_t<decltype(t.value(v[0]))>::value_type;
      return t.smooth_l1(v[0], target.cast<U>(), 1.0);
    });
  }
  {
    Rng rng = next_rng();
    TensorMap<double> p;
    p.set("a", random_tensor({2, 3}, rng));
    p.set("b", random_tensor({2, 3}, rng));
    add("add_reshape_flatten", p,
        [&](auto& t, const auto& v) { return project(t, t.flatten(t.reshape(t.add(v[0], v[1]), {2, 3, 1, 1})), 21); });
  }

  for (ForwardMode mode : {ForwardMode::kTrain, ForwardMode::kEval}) {
    Rng rng = next_rng();
    ModelParams<double> model = build_model<double>(ModelConfig::tiny(), rng);
    // Non-trivial BN statistics and affine terms so every path carries signal.
    for (auto& e : model.tensors.entries()) {
      if (e.name.ends_with("bn.mean") || e.name.ends_with("bn.bias") || e.name.ends_with("project.bias"))
        for (std::size_t i = 0; i < e.tensor.size(); ++i) e.tensor[i] = 0.2 * rng.normal();
      if (e.name.ends_with("bn.var") || e.name.ends_with("bn.weight"))
        for (std::size_t i = 0; i < e.tensor.size(); ++i) e.tensor[i] = rng.uniform(0.5, 1.5);
    }
    const Tensor<double> batch = random_tensor({3, 1, 8, 8}, rng);
    const Tensor<double> target = random_tensor({3}, rng, 2.0);
    const ModelConfig config = model.config;
    const LossFn<double> loss = [&](const TensorMap<double>& m) {
      ModelParams<double> mp{config, m};
      Tape<double> tape;
      Rng mask(23);
      ForwardOptions<double> o;
      o.mode = mode;
      return tape.value(tape.smooth_l1(forward(tape, mp, batch, mask, o), target, 1.0))[0];
    };
    const ModelParams<T> mt{config, cast_map<T>(model.tensors)};
    Tape<T> tape;
    Rng mask(23);
    ForwardOptions<T> o;
    o.mode = mode;
    tape.backward(tape.smooth_l1(forward(tape, mt, batch.cast<T>(), mask, o), target.cast<T>(), 1.0));
    NamedGrads<double> analytic;
    for (auto& [n, g] : tape.param_grads()) analytic.emplace_back(n, g.template cast<double>());
    GradCheckCase c;
    c.name = mode == ForwardMode::kTrain ? "tiny_model_train" : "tiny_model_eval";
    c.parameters = model.tensors.trainable_values();
    c.report = compare_gradients(analytic, finite_diff_grad(loss, model.tensors, h), floor);
    c.passed = c.report.max_rel_error <= tolerance;
    out.push_back(c);
  }
  return out;
}

template std::vector<GradCheckCase> run_gradcheck_suite<float>(double, double, std::uint64_t, double);
template std::vector<GradCheckCase> run_gradcheck_suite<double>(double, double, std::uint64_t, double);

}  // namespace lkc::model
