#include "lkc/model/erf.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "lkc/core/error.hpp"
#include "lkc/core/image_io.hpp"

namespace lkc::model {

namespace {

struct Layer {
  std::size_t kernel;
  std::size_t stride;
  std::size_t pad;
};

/// Spatial convolutions between the input and the final feature map. 1x1
/// convolutions and the residual paths never widen the window.
std::vector<Layer> spatial_layers(const ModelConfig& c) {
  std::vector<Layer> layers{{3, 2, 1}};
  for (std::size_t s = 0; s < c.stages.size(); ++s) {
    if (has_transition(c, s)) layers.push_back({3, c.stages[s].stride, 1});
    for (std::size_t b = 0; b < c.stages[s].blocks; ++b)
      layers.push_back({c.stages[s].large_kernel, 1, c.stages[s].large_kernel / 2});
  }
  return layers;
}

RfWindow window_of(const std::vector<Layer>& layers, long cy, long cx) {
  RfWindow w{cy, cy, cx, cx};
  for (auto it = layers.rbegin(); it != layers.rend(); ++it) {
    const long s = static_cast<long>(it->stride), p = static_cast<long>(it->pad), k = static_cast<long>(it->kernel);
    w.y0 = w.y0 * s - p;
    w.y1 = w.y1 * s - p + k - 1;
    w.x0 = w.x0 * s - p;
    w.x1 = w.x1 * s - p + k - 1;
  }
  return w;
}

template <Real T>
Tensor<T> normal_batch(Shape shape, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.normal());
  return t;
}

/// One-hot weights selecting every channel at the central location of each
/// sample of a [N, C, H, W] map.
template <Real T>
Tensor<T> center_weights(const Shape& shape) {
  Tensor<T> w(shape);
  const std::size_t n = shape[0], c = shape[1], h = shape[2], wd = shape[3];
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) w[((i * c + ch) * h + h / 2) * wd + wd / 2] = T(1);
  return w;
}

template <Real T>
Tensor<double> abs_heatmap(const Tensor<T>& grad) {
  const std::size_t n = grad.dim(0), c = grad.dim(1), h = grad.dim(2), w = grad.dim(3);
  Tensor<double> heat({h, w});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < h * w; ++p) heat[p] += std::abs(static_cast<double>(grad[(i * c + ch) * h * w + p]));
  for (std::size_t p = 0; p < h * w; ++p) heat[p] /= static_cast<double>(n);
  return heat;
}

}  // namespace

std::string to_string(ErfProbe probe) { return probe == ErfProbe::kFeature ? "feature" : "output"; }

ErfProbe parse_erf_probe(const std::string& text) {
  if (text == "feature") return ErfProbe::kFeature;
  if (text == "output") return ErfProbe::kOutput;
  throw Error("invalid_argument", "unknown ERF probe '" + text + "' (feature|output)");
}

template <Real T>
ErfReport measure_erf(const ModelParams<T>& params, std::size_t size, ErfProbe probe, std::size_t samples, Rng& rng) {
  require(samples >= 1, "invalid_argument", "measure_erf needs at least one sample");
  const ModelConfig& c = params.config;
  using Var = typename Tape<T>::Var;
  Tape<T> tape;
  Var in, features;
  ForwardOptions<T> options;
  options.mode = ForwardMode::kEval;
  options.track_params = false;
  options.input_var = &in;
  options.features_var = &features;
  const Var pred = forward(tape, params, normal_batch<T>({samples, c.input_channels, size, size}, rng), rng, options);

  ErfReport report;
  const std::vector<Layer> layers = spatial_layers(c);
  report.depth = layers.size();
  if (probe == ErfProbe::kFeature) {
    const Shape& fs = tape.value(features).shape();
    tape.backward(tape.weighted_sum(features, center_weights<T>(fs)));
    report.nominal = window_of(layers, static_cast<long>(fs[2] / 2), static_cast<long>(fs[3] / 2));
  } else {
    tape.backward(tape.weighted_sum(pred, Tensor<T>({samples}, T(1))));
    const long last = static_cast<long>(size) - 1;
    report.nominal = {0, last, 0, last};
  }
  report.heatmap = abs_heatmap(tape.grad(in));
  summarize_erf(report);
  return report;
}

template <Real T>
ConvStack<T> random_stack(const std::vector<std::size_t>& kernel_sizes, std::size_t channels, Rng& rng) {
  require(!kernel_sizes.empty() && channels >= 1, "invalid_argument", "a conv stack needs layers and channels");
  ConvStack<T> stack;
  stack.channels = channels;
  for (std::size_t k : kernel_sizes) {
    require(k % 2 == 1, "invalid_argument", "conv stack kernels must be odd");
    stack.kernels.push_back(he_normal<T>({channels, channels, k, k}, channels * k * k, rng));
  }
  return stack;
}

template <Real T>
ConvStack<T> delta_stack(std::size_t layers, std::size_t kernel_size, std::size_t channels) {
  require(layers >= 1 && kernel_size % 2 == 1, "invalid_argument", "delta stack needs layers and an odd kernel");
  ConvStack<T> stack;
  stack.channels = channels;
  stack.relu = false;
  for (std::size_t l = 0; l < layers; ++l) {
    Tensor<T> k({channels, channels, kernel_size, kernel_size});
    for (std::size_t ch = 0; ch < channels; ++ch) k(ch, ch, kernel_size / 2, kernel_size / 2) = T(1);
    stack.kernels.push_back(std::move(k));
  }
  return stack;
}

template <Real T>
ErfReport measure_stack_erf(const ConvStack<T>& stack, std::size_t size, std::size_t samples, Rng& rng) {
  require(samples >= 1 && size >= 1, "invalid_argument", "measure_stack_erf needs samples and a positive size");
  using Var = typename Tape<T>::Var;
  Tape<T> tape;
  Var x = tape.input(normal_batch<T>({samples, stack.channels, size, size}, rng));
  const Var in = x;
  std::vector<Layer> layers;
  for (std::size_t l = 0; l < stack.kernels.size(); ++l) {
    const std::size_t k = stack.kernels[l].dim(2);
    x = tape.conv2d(x, tape.constant(stack.kernels[l]), ConvSpec::same(stack.channels, stack.channels, k));
    if (stack.relu && l + 1 < stack.kernels.size()) x = tape.relu(x);
    layers.push_back({k, 1, k / 2});
  }
  tape.backward(tape.weighted_sum(x, center_weights<T>(tape.value(x).shape())));

  ErfReport report;
  report.depth = layers.size();
  report.nominal = window_of(layers, static_cast<long>(size / 2), static_cast<long>(size / 2));
  report.heatmap = abs_heatmap(tape.grad(in));
  summarize_erf(report);
  return report;
}

void summarize_erf(ErfReport& report) {
  const RfWindow& w = report.nominal;
  report.center_y = 0.5 * static_cast<double>(w.y0 + w.y1);
  report.center_x = 0.5 * static_cast<double>(w.x0 + w.x1);
  report.nominal_radius = 0.5 * static_cast<double>(std::max(w.y1 - w.y0, w.x1 - w.x0));

  const std::size_t h = report.heatmap.dim(0), wd = report.heatmap.dim(1);
  std::map<double, double> rings;
  report.total_mass = 0;
  report.mass_outside = 0;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < wd; ++x) {
      const double m = report.heatmap(y, x);
      const double r = std::max(std::abs(static_cast<double>(y) - report.center_y),
                                std::abs(static_cast<double>(x) - report.center_x));
      rings[r] += m;
      report.total_mass += m;
      if (!w.contains(static_cast<long>(y), static_cast<long>(x))) report.mass_outside += m;
    }

  report.profile.clear();
  report.r95 = 0;
  bool found = false;
  double cumulative = 0;
  for (const auto& [r, m] : rings) {
    cumulative += m;
    const double fraction = report.total_mass > 0 ? cumulative / report.total_mass : 0.0;
    report.profile.push_back({r, m, fraction});
    if (!found && report.total_mass > 0 && fraction >= 0.95 - 1e-12) {
      report.r95 = r;
      found = true;
    }
  }
}

std::string erf_summary(const ErfReport& r) {
  std::ostringstream out;
  out << "depth=" << r.depth << " nominal_radius=" << r.nominal_radius << " r95=" << r.r95
      << " r95_ratio=" << (r.nominal_radius > 0 ? r.r95 / r.nominal_radius : 0.0) << " total_mass=" << r.total_mass
      << " mass_outside=" << r.mass_outside;
  return out.str();
}

std::string erf_profile_csv(const ErfReport& report) {
  std::ostringstream out;
  out.precision(10);
  out << "radius,mass,cumulative\n";
  for (const RingMass& m : report.profile) out << m.radius << ',' << m.mass << ',' << m.cumulative << '\n';
  return out.str();
}

void write_erf_profile(const ErfReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  require(out.good(), "io", "cannot write " + path.string());
  out << erf_profile_csv(report);
}

void write_erf_heatmap(const ErfReport& report, const std::filesystem::path& path) {
  const std::size_t h = report.heatmap.dim(0), w = report.heatmap.dim(1);
  double peak = 0;
  for (std::size_t i = 0; i < report.heatmap.size(); ++i) peak = std::max(peak, report.heatmap[i]);
  Tensor<float> image({1, h, w});
  if (peak > 0)
    for (std::size_t i = 0; i < image.size(); ++i) image[i] = static_cast<float>(report.heatmap[i] / peak);
  write_pnm(image, path);
}

StackComparison compare_stack_erf(std::size_t layers, std::size_t kernel_size, std::size_t channels,
                                  std::size_t size, std::size_t samples, Rng& rng) {
  require(layers >= 1, "invalid_argument", "stack comparison needs at least one layer");
  const std::size_t big = layers * (kernel_size - 1) + 1;
  StackComparison cmp;
  cmp.stacked = measure_stack_erf(random_stack<double>(std::vector<std::size_t>(layers, kernel_size), channels, rng),
                                  size, samples, rng);
  cmp.single = measure_stack_erf(random_stack<double>({big}, channels, rng), size, samples, rng);
  return cmp;
}

std::string stack_comparison_csv(const StackComparison& cmp, std::size_t kernel_size) {
  std::ostringstream out;
  out << "model,depth,kernel,nominal_radius,r95,r95_ratio,mass_outside\n";
  auto row = [&](const char* name, const ErfReport& r, std::size_t k) {
    out << name << ',' << r.depth << ',' << k << ',' << r.nominal_radius << ',' << r.r95 << ','
        << (r.nominal_radius > 0 ? r.r95 / r.nominal_radius : 0.0) << ',' << r.mass_outside << '\n';
  };
  row("stacked", cmp.stacked, kernel_size);
  row("single", cmp.single, cmp.stacked.depth * (kernel_size - 1) + 1);
  return out.str();
}

#define LKC_INSTANTIATE_ERF(T)                                                                                  \
  template ErfReport measure_erf(const ModelParams<T>&, std::size_t, ErfProbe, std::size_t, Rng&);            \
  template ConvStack<T> random_stack<T>(const std::vector<std::size_t>&, std::size_t, Rng&);                  \
  template ConvStack<T> delta_stack<T>(std::size_t, std::size_t, std::size_t);                                \
  template ErfReport measure_stack_erf(const ConvStack<T>&, std::size_t, std::size_t, Rng&);

LKC_INSTANTIATE_ERF(float)
LKC_INSTANTIATE_ERF(double)

}  // namespace lkc::model
