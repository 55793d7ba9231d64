#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "lkc/core/error.hpp"
#include "lkc/core/image_io.hpp"
#include "lkc/model/erf.hpp"
#include "lkc/model/gradcheck_suite.hpp"
#include "lkc/model/model.hpp"
#include "lkc/pipeline/ablation.hpp"
#include "lkc/pipeline/dataset.hpp"
#include "lkc/pipeline/evaluate.hpp"
#include "lkc/pipeline/train.hpp"
#include "lkc/reparam/reparam.hpp"
#include "lkc/rsy/rsy.hpp"

namespace fs = std::filesystem;
using namespace lkc;

namespace {

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "io", "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "io", "cannot write " + path.string());
  out << text;
}

/// A config argument is either a JSON file or a preset name.
nlohmann::json config_json(const std::string& arg) {
  if (!fs::exists(arg)) return {{"preset", arg}};
  try {
    return nlohmann::json::parse(read_text(arg));
  } catch (const nlohmann::json::exception& e) {
    throw Error("format", arg + ": " + e.what());
  }
}

std::pair<std::size_t, std::size_t> parse_grid(const std::string& text) {
  const auto x = text.find('x');
  std::size_t rows = 0, cols = 0;
  try {
    require(x != std::string::npos, "invalid_argument", "");
    rows = std::stoul(text.substr(0, x));
    cols = std::stoul(text.substr(x + 1));
  } catch (const std::exception&) {
    throw Error("invalid_argument", "grid must look like NhxNw, got '" + text + "'");
  }
  return {rows, cols};
}

std::string quote(const std::string& text) {
  std::string out;
  for (char c : text) {
    if (c == '"' || c == '\\') out += '\\';
    out += c == '\n' ? ' ' : c;
  }
  return out;
}

Tensor<float> random_batch(std::size_t n, std::size_t ch, std::size_t size, Rng& rng) {
  Tensor<float> x({n, ch, size, size});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<float>(rng.normal());
  return x;
}

struct Options {
  std::string config = "desk", data, out, log, model_config = "desk", train_config = "desk", ckpt, ckpt_in,
              ckpt_out, split = "test", report, image, grid = "3x3", mode = "random_scale", record, replay,
              heatmap, profile, probe = "feature", compare;
  std::uint64_t seed = 0;
  std::size_t k1 = 13, k2 = 5, channels = 4, groups = 0, trials = 20, size = 96, samples = 8, epochs = 0,
              pretext_epochs = 0, batch = 0, layers = 4;
  double min_cell = 0.5;
  bool f64 = false, invert = false;
};

int cmd_gen(const Options& o, bool seed_set) {
  pipeline::DatasetConfig config = pipeline::DatasetConfig::from_json(config_json(o.config));
  if (seed_set) config.seed = o.seed;
  const pipeline::Dataset data = pipeline::gen_dataset(config);
  pipeline::save_dataset(data, o.out);
  std::cout << "event=gen out=" << o.out << " train=" << data.train.size() << " val=" << data.val.size()
            << " test=" << data.test.size() << " mean_train_count=" << pipeline::mean_count(data.train) << "\n";
  return 0;
}

int cmd_train(const Options& o, bool seed_set) {
  const model::ModelConfig model_config = model::ModelConfig::from_json(config_json(o.model_config));
  pipeline::TrainConfig config = pipeline::TrainConfig::from_json(config_json(o.train_config));
  if (seed_set) config.seed = o.seed;
  if (o.epochs) config.epochs = o.epochs;
  config.checkpoint = o.out;
  if (!o.log.empty()) config.log = o.log;
  const pipeline::Dataset data = pipeline::load_dataset(o.data);
  const pipeline::TrainResult result = pipeline::train(config, model_config, data.train, data.val, &std::cout);
  if (config.epochs == 0) model::save_checkpoint(result.final_params, o.out);
  return 0;
}

int cmd_eval(const Options& o) {
  const auto params = model::load_checkpoint<float>(o.ckpt);
  pipeline::TrainConfig config;
  const std::vector<Sample> samples = pipeline::load_split(o.data, o.split);
  const pipeline::EvalReport report = pipeline::evaluate(params, samples, config, o.batch ? o.batch : config.eval_batch);
  const pipeline::EvalReport baseline = pipeline::baseline_mean(pipeline::load_split(o.data, "train"), samples);
  if (!o.report.empty()) pipeline::write_report(report, o.report);
  std::cout << "split=" << o.split << " " << report.summary() << " baseline_mae=" << baseline.mae << "\n";
  return 0;
}

int cmd_fuse(const Options& o) {
  const auto params = model::load_checkpoint<float>(o.ckpt_in);
  const auto fused = model::fuse_model(params);
  model::save_checkpoint(fused, o.ckpt_out);
  Rng rng = Rng::derive(o.seed, 0);
  const std::size_t stride = params.config.total_stride();
  const std::size_t size = (std::max<std::size_t>(model::min_input_extent(params.config), 64) + stride - 1) / stride * stride;
  const Tensor<float> x = random_batch(4, params.config.input_channels, size, rng);
  Rng r1(0), r2(0);
  const Tensor<float> a = model::predict(params, x, model::ForwardMode::kEval, r1);
  const Tensor<float> b = model::predict(fused, x, model::ForwardMode::kEval, r2);
  double diff = 0;
  for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, std::abs(static_cast<double>(a[i]) - b[i]));
  std::cout << "event=fuse params_before=" << params.parameter_count() << " params_after=" << fused.parameter_count()
            << " max_abs_diff=" << diff << "\n";
  return 0;
}

template <Real T>
int run_equiv(const Options& o) {
  const std::vector<std::size_t> kernels{o.k1, o.k2};
  const std::size_t groups = o.groups ? o.groups : o.channels;
  Rng rng = Rng::derive(o.seed, 1);
  const auto block = reparam::random_block<T>(kernels, o.channels, groups, rng);
  const auto fused = reparam::reparam_pipeline(block);
  const double diff = static_cast<double>(reparam::verify_equivalence(block, fused, o.trials, rng));
  const double tolerance = std::is_same_v<T, double> ? 1e-9 : 1e-4;
  std::cout << "k1=" << o.k1 << " k2=" << o.k2 << " channels=" << o.channels << " groups=" << groups
            << " trials=" << o.trials << " precision=" << (std::is_same_v<T, double> ? "f64" : "f32")
            << " max_abs_diff=" << diff << " tolerance=" << tolerance << "\n";
  require(diff <= tolerance, "tolerance_exceeded", "fused and parallel outputs differ by " + std::to_string(diff));
  return 0;
}

template <Real T>
int run_gradcheck(const Options& o) {
  const bool f64 = std::is_same_v<T, double>;
  // 32-bit reverse mode is compared against 64-bit differences; gradients
  // below the floor are compared absolutely.
  const double tolerance = f64 ? 1e-4 : 1e-3;
  const double floor = f64 ? kGradCheckFloor : 1e-3;
  const auto cases = model::run_gradcheck_suite<T>(tolerance, 1e-5, o.seed, floor);
  bool ok = true;
  for (const auto& c : cases) {
    ok = ok && c.passed;
    std::cout << "case=" << c.name << " params=" << c.parameters << " coordinates=" << c.report.coordinates
              << " max_rel_error=" << c.report.max_rel_error << " worst=" << c.report.worst_parameter << "["
              << c.report.worst_index << "] tolerance=" << tolerance << " floor=" << floor << " pass=" << (c.passed ? 1 : 0) << "\n";
  }
  require(ok, "tolerance_exceeded", "gradient check failed");
  return 0;
}

int cmd_rsy(const Options& o) {
  Sample sample;
  sample.image = read_pnm(o.image);
  rsy::RsyRecord record;
  Tensor<float> out;
  if (!o.replay.empty()) {
    record = rsy::RsyRecord::from_text(read_text(o.replay));
    out = o.invert ? rsy::invert(sample.image, record) : rsy::replay(sample.image, record);
  } else {
    rsy::RsyConfig config;
    std::tie(config.rows, config.cols) = parse_grid(o.grid);
    config.mode = rsy::parse_scale_mode(o.mode);
    config.min_cell_fraction = o.min_cell;
    Rng rng(o.seed);
    auto [augmented, rec] = rsy::rsy_apply(sample, config, rng);
    out = std::move(augmented.image);
    record = std::move(rec);
  }
  write_pnm(out, o.out);
  if (!o.record.empty()) write_text(o.record, record.to_text());
  std::cout << record.to_text();
  return 0;
}

int cmd_erf(const Options& o) {
  const auto params = model::load_checkpoint<float>(o.ckpt);
  Rng rng = Rng::derive(o.seed, 2);
  const model::ErfReport report =
      model::measure_erf(params, o.size, model::parse_erf_probe(o.probe), o.samples, rng);
  if (!o.heatmap.empty()) model::write_erf_heatmap(report, o.heatmap);
  if (!o.profile.empty()) model::write_erf_profile(report, o.profile);
  std::cout << model::erf_summary(report) << "\n";
  if (!o.compare.empty()) {
    Rng cmp_rng = Rng::derive(o.seed, 3);
    const auto cmp = model::compare_stack_erf(o.layers, 3, o.channels, o.size, o.samples, cmp_rng);
    write_text(o.compare, model::stack_comparison_csv(cmp, 3));
    std::cout << "stacked_r95=" << cmp.stacked.r95 << " single_r95=" << cmp.single.r95 << "\n";
  }
  return 0;
}

int cmd_ablate(const Options& o, bool seed_set) {
  pipeline::AblationConfig config;
  config.train = pipeline::TrainConfig::from_json(config_json(o.train_config));
  config.model = model::ModelConfig::from_json(config_json(o.model_config));
  if (seed_set) config.train.seed = o.seed;
  if (o.epochs) config.epochs = o.epochs;
  if (o.pretext_epochs) config.pretext_epochs = o.pretext_epochs;
  config.train.log = o.log;
  const pipeline::Dataset data = pipeline::load_dataset(o.data);
  const pipeline::AblationResult result = pipeline::ablation_run(config, data, &std::cout);
  write_text(o.out, result.to_csv());
  std::cout << result.to_csv();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Large-kernel object counting toolkit"};
  app.require_subcommand(1);
  Options o;

  auto* gen = app.add_subcommand("gen", "Generate a synthetic counting dataset");
  gen->add_option("--config", o.config, "Dataset config JSON or preset (desk|paper)");
  gen->add_option("--out", o.out, "Output directory")->required();

  auto* train = app.add_subcommand("train", "Train a counter");
  train->add_option("--data", o.data, "Dataset directory")->required();
  train->add_option("--model-config", o.model_config, "Model config JSON or preset (desk|paper|tiny)");
  train->add_option("--train-config", o.train_config, "Train config JSON or preset (desk|paper)");
  train->add_option("--out", o.out, "Best checkpoint path")->required();
  train->add_option("--log", o.log, "key=value log path");
  train->add_option("--epochs", o.epochs, "Override the configured epochs");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--ckpt", o.ckpt)->required();
  eval->add_option("--data", o.data)->required();
  eval->add_option("--split", o.split)->check(CLI::IsMember({"train", "val", "test"}));
  eval->add_option("--report", o.report, "Per-sample CSV");
  eval->add_option("--batch", o.batch);

  auto* fuse = app.add_subcommand("fuse", "Fold every parallel block into one kernel");
  fuse->add_option("--ckpt-in", o.ckpt_in)->required();
  fuse->add_option("--ckpt-out", o.ckpt_out)->required();

  auto* equiv = app.add_subcommand("equiv", "Check parallel vs fused block equivalence");
  equiv->add_option("--k1", o.k1);
  equiv->add_option("--k2", o.k2);
  equiv->add_option("--channels", o.channels);
  equiv->add_option("--groups", o.groups, "0: depthwise");
  equiv->add_option("--trials", o.trials);
  equiv->add_flag("--f64", o.f64);

  auto* grad = app.add_subcommand("gradcheck", "Reverse-mode vs finite differences");
  grad->add_flag("--f64", o.f64);

  auto* rsy_cmd = app.add_subcommand("rsy", "Random-scale patch shuffle of one image");
  rsy_cmd->add_option("--image", o.image, "PGM/PPM input")->required();
  rsy_cmd->add_option("--grid", o.grid, "NhxNw");
  rsy_cmd->add_option("--mode", o.mode)->check(CLI::IsMember({"uniform", "random_scale"}));
  rsy_cmd->add_option("--min-cell-fraction", o.min_cell);
  rsy_cmd->add_option("--out", o.out, "PGM/PPM output")->required();
  rsy_cmd->add_option("--record", o.record, "Record text output");
  rsy_cmd->add_option("--replay", o.replay, "Apply a saved record instead of sampling");
  rsy_cmd->add_flag("--invert", o.invert, "With --replay: undo the record (uniform mode)");

  auto* erf = app.add_subcommand("erf", "Effective receptive field of a checkpoint");
  erf->add_option("--ckpt", o.ckpt)->required();
  erf->add_option("--size", o.size);
  erf->add_option("--probe", o.probe)->check(CLI::IsMember({"feature", "output"}));
  erf->add_option("--samples", o.samples);
  erf->add_option("--out-heatmap", o.heatmap);
  erf->add_option("--out-profile", o.profile);
  erf->add_option("--compare", o.compare, "Stacked 3x3 vs single kernel r95 CSV");
  erf->add_option("--layers", o.layers, "Depth of the stacked 3x3 comparison");
  erf->add_option("--channels", o.channels);

  auto* ablate = app.add_subcommand("ablate", "Run the five-variant ablation");
  ablate->add_option("--data", o.data)->required();
  ablate->add_option("--out", o.out, "CSV path")->required();
  ablate->add_option("--model-config", o.model_config);
  ablate->add_option("--train-config", o.train_config);
  ablate->add_option("--epochs", o.epochs);
  ablate->add_option("--pretext-epochs", o.pretext_epochs);
  ablate->add_option("--log", o.log);

  std::vector<CLI::Option*> seeds;
  for (auto* sub : {gen, train, fuse, equiv, grad, rsy_cmd, erf, ablate}) seeds.push_back(sub->add_option("--seed", o.seed));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error code=usage message=\"" << quote(e.what()) << "\"\n";
    return 2;
  }
  const bool seed_set = std::any_of(seeds.begin(), seeds.end(), [](CLI::Option* s) { return s->count() > 0; });

  try {
    if (gen->parsed()) return cmd_gen(o, seed_set);
    if (train->parsed()) return cmd_train(o, seed_set);
    if (eval->parsed()) return cmd_eval(o);
    if (fuse->parsed()) return cmd_fuse(o);
    if (equiv->parsed()) return o.f64 ? run_equiv<double>(o) : run_equiv<float>(o);
    if (grad->parsed()) return o.f64 ? run_gradcheck<double>(o) : run_gradcheck<float>(o);
    if (rsy_cmd->parsed()) return cmd_rsy(o);
    if (erf->parsed()) return cmd_erf(o);
    if (ablate->parsed()) return cmd_ablate(o, seed_set);
  } catch (const Error& e) {
    std::cerr << "error code=" << e.code() << " message=\"" << quote(e.what()) << "\"\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error code=internal message=\"" << quote(e.what()) << "\"\n";
    return 1;
  }
  return 0;
}
