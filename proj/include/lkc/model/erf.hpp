#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "lkc/model/model.hpp"

namespace lkc::model {

enum class ErfProbe { kFeature, kOutput };

std::string to_string(ErfProbe probe);
ErfProbe parse_erf_probe(const std::string& text);

/// Inclusive input-pixel window, in unclipped coordinates.
struct RfWindow {
  long y0 = 0, y1 = 0, x0 = 0, x1 = 0;

  bool contains(long y, long x) const { return y >= y0 && y <= y1 && x >= x0 && x <= x1; }
};

struct RingMass {
  double radius = 0;      // Chebyshev distance from the window center
  double mass = 0;
  double cumulative = 0;  // fraction of the total mass within this radius
};

/// Radii are Chebyshev (square-ring) distances from the nominal window's
/// center, so the nominal radius is half the window's larger side and every
/// pixel inside the window lies within it.
struct ErfReport {
  Tensor<double> heatmap;  // [H, W], mean over inputs of the channel-summed |d probe / d pixel|
  RfWindow nominal;
  double center_y = 0;
  double center_x = 0;
  double nominal_radius = 0;
  double r95 = 0;
  std::size_t depth = 0;  // spatial convolutions on the probe's path
  double total_mass = 0;
  double mass_outside = 0;
  std::vector<RingMass> profile;
};

/// ERF of a model in eval mode over `samples` N(0, 1) inputs of size x size.
/// kFeature probes the channel sum of the final feature map at its central
/// location; kOutput probes the prediction, whose nominal field is the image.
template <Real T>
ErfReport measure_erf(const ModelParams<T>& params, std::size_t size, ErfProbe probe, std::size_t samples, Rng& rng);

/// Plain stack of stride-1 "same" convolutions with ReLU between layers
/// (when enabled), for depth-versus-kernel-size comparisons.
template <Real T>
struct ConvStack {
  std::size_t channels = 1;
  std::vector<Tensor<T>> kernels;  // [C, C, k, k] each
  bool relu = true;
};

template <Real T>
ConvStack<T> random_stack(const std::vector<std::size_t>& kernel_sizes, std::size_t channels, Rng& rng);
/// Identity (delta) kernels, no activation.
template <Real T>
ConvStack<T> delta_stack(std::size_t layers, std::size_t kernel_size, std::size_t channels);

/// Probe: channel sum of the last layer's output at the central pixel.
template <Real T>
ErfReport measure_stack_erf(const ConvStack<T>& stack, std::size_t size, std::size_t samples, Rng& rng);

/// Fills center, radii, masses and profile from heatmap and nominal window.
void summarize_erf(ErfReport& report);

std::string erf_summary(const ErfReport& report);
/// radius,mass,cumulative
std::string erf_profile_csv(const ErfReport& report);
void write_erf_profile(const ErfReport& report, const std::filesystem::path& path);
/// Heatmap scaled so its maximum maps to white.
void write_erf_heatmap(const ErfReport& report, const std::filesystem::path& path);

struct StackComparison {
  ErfReport stacked;  // n layers of k x k
  ErfReport single;   // one layer with the same nominal field
};

/// Stacked small kernels against one large kernel of equal nominal field.
StackComparison compare_stack_erf(std::size_t layers, std::size_t kernel_size, std::size_t channels,
                                  std::size_t size, std::size_t samples, Rng& rng);
/// model,depth,kernel,nominal_radius,r95,r95_ratio,mass_outside
std::string stack_comparison_csv(const StackComparison& cmp, std::size_t kernel_size);

}  // namespace lkc::model
