#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "lkc/core/rng.hpp"
#include "lkc/data/sample.hpp"

namespace lkc::rsy {

enum class ScaleMode { kUniform, kRandomScale };

std::string to_string(ScaleMode mode);
ScaleMode parse_scale_mode(std::string_view text);

struct RsyConfig {
  std::size_t rows = 3;  // N_h
  std::size_t cols = 3;  // N_w
  ScaleMode mode = ScaleMode::kRandomScale;
  double min_cell_fraction = 0.5;
  double probability = 0.5;  // per-sample application probability (used by preprocessing)

  void validate() const;
};

/// Cut positions partitioning an H x W image into rows() x cols() cells.
struct PatchGrid {
  std::vector<std::size_t> row_cuts;  // rows() + 1 values, 0 .. H
  std::vector<std::size_t> col_cuts;  // cols() + 1 values, 0 .. W

  std::size_t rows() const { return row_cuts.size() - 1; }
  std::size_t cols() const { return col_cuts.size() - 1; }
  std::size_t cells() const { return rows() * cols(); }
  std::size_t height() const { return row_cuts.back(); }
  std::size_t width() const { return col_cuts.back(); }
  std::size_t cell_height(std::size_t r) const { return row_cuts[r + 1] - row_cuts[r]; }
  std::size_t cell_width(std::size_t c) const { return col_cuts[c + 1] - col_cuts[c]; }
  bool uniform_cells() const;

  static PatchGrid uniform(std::size_t height, std::size_t width, std::size_t rows, std::size_t cols);
  void validate() const;
  bool operator==(const PatchGrid&) const = default;
};

/// Everything needed to replay (or, for equal uniform cells, undo) one application.
struct RsyRecord {
  ScaleMode mode = ScaleMode::kUniform;
  std::uint64_t seed = 0;  // Rng state at the start of the application
  PatchGrid source;
  PatchGrid destination;
  std::vector<std::size_t> permutation;  // source cell k -> destination cell permutation[k]

  std::string to_text() const;
  static RsyRecord from_text(std::string_view text);
  bool operator==(const RsyRecord&) const = default;
};

/// Uniform mode: cuts at floor(i * extent / n). Random-scale mode: per-axis
/// weights drawn uniform in [f, 2 - f] (f = min_cell_fraction), normalized to
/// the extent and pulled toward the uniform cell just enough that every cell
/// stays within [f, 2 - f] x the uniform extent, then rounded by largest
/// remainder.
PatchGrid sample_grid(std::size_t height, std::size_t width, const RsyConfig& config, Rng& rng);

/// Patches [C, h, w] in row-major cell order.
std::vector<Tensor<float>> split(const Tensor<float>& image, const PatchGrid& grid);

/// Fisher-Yates over 0..n-1: for i = n-1 down to 1, j = next_u64 mod (i + 1).
std::vector<std::size_t> shuffle_2d(std::size_t n_cells, Rng& rng);

/// Places patch k into destination cell permutation[k], bilinearly resampled
/// (half-pixel centers) when its extent differs from the cell's.
Tensor<float> recompose(const std::vector<Tensor<float>>& patches, const std::vector<std::size_t>& permutation,
                        const PatchGrid& destination);

/// Half-pixel-center bilinear resize of a [C, h, w] patch.
Tensor<float> resize_bilinear(const Tensor<float>& patch, std::size_t out_h, std::size_t out_w);

/// Applies RSY unconditionally. The count is kept; centers are dropped since
/// they no longer describe the recomposed image.
std::pair<Sample, RsyRecord> rsy_apply(const Sample& sample, const RsyConfig& config, Rng& rng);

/// Re-applies a recorded transform to an image of the recorded size.
Tensor<float> replay(const Tensor<float>& image, const RsyRecord& record);

/// Undoes a uniform-mode record whose cells all have one extent; bit-exact.
Tensor<float> invert(const Tensor<float>& image, const RsyRecord& record);

}  // namespace lkc::rsy
