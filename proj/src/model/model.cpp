#include "lkc/model/model.hpp"

#include <cmath>

#include "lkc/core/error.hpp"
#include "lkc/reparam/reparam.hpp"

namespace lkc::model {

namespace {

constexpr double kBnEps = 1e-5;

std::string block_name(std::size_t i) { return "block" + std::to_string(i) + "."; }
std::string stage_name(std::size_t s) { return "stage" + std::to_string(s) + "."; }

std::size_t stage_input_channels(const ModelConfig& config, std::size_t stage) {
  return stage == 0 ? config.stem_channels : config.stages[stage - 1].channels;
}

ConvSpec stem_spec(const ModelConfig& c) { return ConvSpec::same(c.input_channels, c.stem_channels, 3, 1, 2); }

ConvSpec transition_spec(const ModelConfig& c, std::size_t s) {
  return ConvSpec::same(stage_input_channels(c, s), c.stages[s].channels, 3, 1, c.stages[s].stride);
}

ConvSpec depthwise_spec(std::size_t channels, std::size_t k) { return ConvSpec::same(channels, channels, k, channels); }

template <Real T>
void add_conv(TensorMap<T>& map, const std::string& name, const ConvSpec& spec, Rng& rng) {
  const std::size_t fan_in = spec.in_channels / spec.groups * spec.kernel_h * spec.kernel_w;
  map.set(name, he_normal<T>(spec.kernel_shape(), fan_in, rng));
}

template <Real T>
void add_bn(TensorMap<T>& map, const std::string& prefix, std::size_t channels) {
  map.set(prefix + "weight", Tensor<T>({channels}, T(1)));
  map.set(prefix + "bias", Tensor<T>({channels}));
  map.set(prefix + "mean", Tensor<T>({channels}), false);
  map.set(prefix + "var", Tensor<T>({channels}, T(1)), false);
}

template <Real T>
BatchNormParams<T> read_bn(const TensorMap<T>& map, const std::string& prefix) {
  BatchNormParams<T> bn;
  bn.mean = map.at(prefix + "mean");
  bn.var = map.at(prefix + "var");
  bn.gamma = map.at(prefix + "weight");
  bn.beta = map.at(prefix + "bias");
  bn.eps = kBnEps;
  return bn;
}

/// Records one forward pass on a tape.
template <Real T>
class Recorder {
 public:
  using Var = typename Tape<T>::Var;

  Recorder(Tape<T>& tape, const ModelParams<T>& params, Rng& rng, const ForwardOptions<T>& options)
      : tape_(tape), params_(params), rng_(rng), options_(options) {}

  Var run(const Tensor<T>& batch) {
    const ModelConfig& c = params_.config;
    require(batch.rank() == 4 && batch.dim(1) == c.input_channels, "shape_mismatch",
            "model expects [N, " + std::to_string(c.input_channels) + ", H, W] input, got " +
                shape_string(batch.shape()));
    const std::size_t fh = c.feature_extent(batch.dim(2));
    const std::size_t fw = c.feature_extent(batch.dim(3));
    if (fh < c.head.pool_h || fw < c.head.pool_w)
      throw Error("input_too_small", "input " + std::to_string(batch.dim(2)) + "x" + std::to_string(batch.dim(3)) +
                                         " is below the minimum " + std::to_string(min_input_extent(c)) + "x" +
                                         std::to_string(min_input_extent(c)));

    Var x = options_.input_var ? tape_.input(batch) : tape_.constant(batch);
    if (options_.input_var) *options_.input_var = x;
    x = conv_bn_relu(x, "stem.", stem_spec(c));
    std::size_t block = 0;
    for (std::size_t s = 0; s < c.stages.size(); ++s) {
      if (has_transition(c, s)) x = conv_bn_relu(x, stage_name(s) + "down.", transition_spec(c, s));
      for (std::size_t b = 0; b < c.stages[s].blocks; ++b, ++block) x = lk_block(x, block, c.stages[s]);
    }

    if (options_.features_var) *options_.features_var = x;
    x = tape_.adaptive_avg_pool(x, c.head.pool_h, c.head.pool_w);
    x = tape_.flatten(x);
    x = tape_.relu(x);
    x = tape_.linear(x, weight("head.fc1.weight"), weight("head.fc1.bias"));
    x = tape_.relu(x);
    x = tape_.dropout(x, c.head.dropout, rng_, options_.mode != ForwardMode::kEval);
    x = tape_.linear(x, weight("head.fc2.weight"), weight("head.fc2.bias"));
    return tape_.reshape(x, {batch.dim(0)});
  }

 private:
  Var weight(const std::string& name) {
    const Tensor<T>& t = params_.tensors.at(name);
    return options_.track_params ? tape_.param(name, t) : tape_.constant(t);
  }

  Var bn(Var x, const std::string& prefix) {
    Var gamma = weight(prefix + "weight");
    Var beta = weight(prefix + "bias");
    if (options_.mode == ForwardMode::kTrain) {
      BatchStats<T> stats;
      Var y = tape_.batchnorm_train(x, gamma, beta, kBnEps, &stats);
      if (options_.bn_stats) options_.bn_stats->emplace_back(prefix, std::move(stats));
      return y;
    }
    return tape_.batchnorm_eval(x, gamma, beta, params_.tensors.at(prefix + "mean"),
                                params_.tensors.at(prefix + "var"), kBnEps);
  }

  Var conv_bn_relu(Var x, const std::string& prefix, const ConvSpec& spec) {
    Var y = tape_.conv2d(x, weight(prefix + "conv.kernel"), spec);
    return tape_.relu(bn(y, prefix + "bn."));
  }

  Var lk_block(Var x, std::size_t index, const StageConfig& stage) {
    const std::string p = block_name(index);
    const std::size_t ch = stage.channels;
    Var mixed;
    if (params_.config.block_mode == BlockMode::kFused) {
      mixed = tape_.conv2d(x, weight(p + "fused.kernel"), weight(p + "fused.bias"),
                           depthwise_spec(ch, stage.large_kernel));
    } else {
      mixed = branch(x, p + "branch0.", depthwise_spec(ch, stage.large_kernel));
      if (stage.small_kernel != 0)
        mixed = tape_.add(mixed, branch(x, p + "branch1.", depthwise_spec(ch, stage.small_kernel)));
    }
    const std::size_t wide = ch * params_.config.expansion;
    Var h = tape_.conv2d(mixed, weight(p + "expand.kernel"), ConvSpec::same(ch, wide, 1));
    h = tape_.relu(bn(h, p + "expand.bn."));
    h = tape_.conv2d(h, weight(p + "project.kernel"), weight(p + "project.bias"), ConvSpec::same(wide, ch, 1));
    return tape_.add(x, h);
  }

  Var branch(Var x, const std::string& prefix, const ConvSpec& spec) {
    return bn(tape_.conv2d(x, weight(prefix + "kernel"), spec), prefix + "bn.");
  }

  Tape<T>& tape_;
  const ModelParams<T>& params_;
  Rng& rng_;
  const ForwardOptions<T>& options_;
};

}  // namespace

bool has_transition(const ModelConfig& config, std::size_t stage) {
  return config.stages[stage].stride > 1 || config.stages[stage].channels != stage_input_channels(config, stage);
}

std::size_t min_input_extent(const ModelConfig& config) {
  return config.min_input(std::max(config.head.pool_h, config.head.pool_w));
}

template <Real T>
ModelParams<T> build_model(const ModelConfig& config, Rng& rng) {
  config.validate();
  ModelParams<T> params;
  params.config = config;
  params.config.block_mode = BlockMode::kParallel;
  TensorMap<T>& m = params.tensors;

  add_conv(m, "stem.conv.kernel", stem_spec(config), rng);
  add_bn(m, "stem.bn.", config.stem_channels);
  std::size_t block = 0;
  for (std::size_t s = 0; s < config.stages.size(); ++s) {
    const StageConfig& st = config.stages[s];
    if (has_transition(config, s)) {
      add_conv(m, stage_name(s) + "down.conv.kernel", transition_spec(config, s), rng);
      add_bn(m, stage_name(s) + "down.bn.", st.channels);
    }
    for (std::size_t b = 0; b < st.blocks; ++b, ++block) {
      const std::string p = block_name(block);
      add_conv(m, p + "branch0.kernel", depthwise_spec(st.channels, st.large_kernel), rng);
      add_bn(m, p + "branch0.bn.", st.channels);
      if (st.small_kernel != 0) {
        add_conv(m, p + "branch1.kernel", depthwise_spec(st.channels, st.small_kernel), rng);
        add_bn(m, p + "branch1.bn.", st.channels);
      }
      const std::size_t wide = st.channels * config.expansion;
      add_conv(m, p + "expand.kernel", ConvSpec::same(st.channels, wide, 1), rng);
      add_bn(m, p + "expand.bn.", wide);
      add_conv(m, p + "project.kernel", ConvSpec::same(wide, st.channels, 1), rng);
      m.set(p + "project.bias", Tensor<T>({st.channels}));
    }
  }

  const std::size_t features = config.final_channels() * config.head.pool_h * config.head.pool_w;
  m.set("head.fc1.weight", he_normal<T>({config.head.hidden, features}, features, rng));
  m.set("head.fc1.bias", Tensor<T>({config.head.hidden}));
  m.set("head.fc2.weight", he_normal<T>({1, config.head.hidden}, config.head.hidden, rng));
  m.set("head.fc2.bias", Tensor<T>({1}));

  if (config.block_mode == BlockMode::kFused) return fuse_model(params);
  return params;
}

template <Real T>
typename Tape<T>::Var forward(Tape<T>& tape, const ModelParams<T>& params, const Tensor<T>& batch, Rng& rng,
                              const ForwardOptions<T>& options) {
  return Recorder<T>(tape, params, rng, options).run(batch);
}

template <Real T>
Tensor<T> predict(const ModelParams<T>& params, const Tensor<T>& batch, ForwardMode mode, Rng& rng) {
  Tape<T> tape;
  ForwardOptions<T> options;
  options.mode = mode;
  options.track_params = false;
  return tape.value(forward(tape, params, batch, rng, options));
}

template <Real T>
void apply_bn_updates(ModelParams<T>& params, const BnStats<T>& stats, double momentum) {
  for (const auto& [prefix, s] : stats) {
    Tensor<T>& mean = params.tensors.at(prefix + "mean");
    Tensor<T>& var = params.tensors.at(prefix + "var");
    for (std::size_t c = 0; c < mean.size(); ++c) {
      mean[c] = static_cast<T>((1 - momentum) * mean[c] + momentum * s.mean[c]);
      var[c] = static_cast<T>((1 - momentum) * var[c] + momentum * s.var[c]);
    }
  }
}

template <Real T>
ModelParams<T> fuse_model(const ModelParams<T>& params) {
  const ModelConfig& c = params.config;
  if (c.block_mode == BlockMode::kFused) return params;

  // Fused entries take the place of branch0.kernel; other branch entries go.
  std::vector<std::pair<std::string, reparam::FusedConvParams<T>>> fused;
  std::size_t block = 0;
  for (const StageConfig& st : c.stages)
    for (std::size_t b = 0; b < st.blocks; ++b, ++block) {
      const std::string p = block_name(block);
      reparam::ParallelBlockParams<T> pb;
      for (std::size_t j = 0; params.tensors.contains(p + "branch" + std::to_string(j) + ".kernel"); ++j) {
        const std::string bp = p + "branch" + std::to_string(j) + ".";
        const Tensor<T>& k = params.tensors.at(bp + "kernel");
        pb.branches.push_back({k, read_bn(params.tensors, bp + "bn."), depthwise_spec(st.channels, k.dim(2))});
      }
      require(!pb.branches.empty(), "missing_tensor", "block " + std::to_string(block) + " has no branches");
      fused.emplace_back(p, pb.branches.size() == 1 ? reparam::fold_bn(pb.branches.front())
                                                    : reparam::reparam_pipeline(pb));
    }

  ModelParams<T> out;
  out.config = c;
  out.config.block_mode = BlockMode::kFused;
  for (const auto& e : params.tensors.entries()) {
    const auto pos = e.name.find(".branch");
    if (pos == std::string::npos) {
      out.tensors.set(e.name, e.tensor, e.trainable);
      continue;
    }
    if (e.name.compare(pos, std::string::npos, ".branch0.kernel") != 0) continue;
    const std::string p = e.name.substr(0, pos + 1);
    for (const auto& [prefix, f] : fused)
      if (prefix == p) {
        out.tensors.set(p + "fused.kernel", f.kernel);
        out.tensors.set(p + "fused.bias", f.bias);
      }
  }
  return out;
}

template <Real T>
McPrediction<T> mc_predict(const ModelParams<T>& params, const Tensor<T>& batch, std::size_t passes, Rng& rng) {
  require(passes >= 1, "invalid_argument", "mc_predict needs at least one pass");
  const std::size_t n = batch.dim(0);
  std::vector<double> sum(n, 0.0), sum_sq(n, 0.0);
  for (std::size_t t = 0; t < passes; ++t) {
    const Tensor<T> p = predict(params, batch, ForwardMode::kMc, rng);
    for (std::size_t i = 0; i < n; ++i) {
      sum[i] += p[i];
      sum_sq[i] += static_cast<double>(p[i]) * p[i];
    }
  }
  McPrediction<T> out{Tensor<T>({n}), Tensor<T>({n})};
  for (std::size_t i = 0; i < n; ++i) {
    const double mean = sum[i] / passes;
    out.mean[i] = static_cast<T>(mean);
    out.std[i] = static_cast<T>(std::sqrt(std::max(0.0, sum_sq[i] / passes - mean * mean)));
  }
  return out;
}

template <Real T>
TensorArchive to_archive(const ModelParams<T>& params) {
  TensorArchive archive;
  archive.put_text("config", params.config.to_json().dump());
  archive.put_all(params.tensors);
  return archive;
}

template <Real T>
ModelParams<T> from_archive(const TensorArchive& archive) {
  require(archive.contains("config"), "format", "checkpoint has no 'config' entry");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(archive.text("config"));
  } catch (const nlohmann::json::exception& e) {
    throw Error("format", std::string("checkpoint config: ") + e.what());
  }
  const ModelConfig config = ModelConfig::from_json(j);
  Rng rng(0);
  ModelParams<T> params = build_model<T>(config, rng);
  for (auto& e : params.tensors.entries()) {
    require(archive.contains(e.name), "missing_tensor", "checkpoint lacks '" + e.name + "'");
    Tensor<T> t = archive.tensor<T>(e.name);
    require(t.shape() == e.tensor.shape(), "shape_mismatch",
            "checkpoint tensor '" + e.name + "' has shape " + shape_string(t.shape()) + ", expected " +
                shape_string(e.tensor.shape()));
    e.tensor = std::move(t);
  }
  require(archive.size() == params.tensors.entries().size() + 1, "format",
          "checkpoint holds tensors the config does not describe");
  return params;
}

template <Real T>
void save_checkpoint(const ModelParams<T>& params, const std::filesystem::path& path) {
  save_tensors(to_archive(params), path);
}

template <Real T>
ModelParams<T> load_checkpoint(const std::filesystem::path& path) {
  return from_archive<T>(load_tensors(path));
}

#define LKC_INSTANTIATE_MODEL(T)                                                                               \
  template ModelParams<T> build_model<T>(const ModelConfig&, Rng&);                                           \
  template typename Tape<T>::Var forward(Tape<T>&, const ModelParams<T>&, const Tensor<T>&, Rng&,             \
                                         const ForwardOptions<T>&);                                           \
  template Tensor<T> predict(const ModelParams<T>&, const Tensor<T>&, ForwardMode, Rng&);                     \
  template void apply_bn_updates(ModelParams<T>&, const BnStats<T>&, double);                                 \
  template ModelParams<T> fuse_model(const ModelParams<T>&);                                                  \
  template McPrediction<T> mc_predict(const ModelParams<T>&, const Tensor<T>&, std::size_t, Rng&);            \
  template TensorArchive to_archive(const ModelParams<T>&);                                                   \
  template ModelParams<T> from_archive<T>(const TensorArchive&);                                              \
  template void save_checkpoint(const ModelParams<T>&, const std::filesystem::path&);                         \
  template ModelParams<T> load_checkpoint<T>(const std::filesystem::path&);

LKC_INSTANTIATE_MODEL(float)
LKC_INSTANTIATE_MODEL(double)

}  // namespace lkc::model
