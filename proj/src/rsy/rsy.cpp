#include "lkc/rsy/rsy.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <tuple>

namespace lkc::rsy {

namespace {

std::vector<std::size_t> uniform_cuts(std::size_t extent, std::size_t n) {
  std::vector<std::size_t> cuts(n + 1);
  for (std::size_t i = 0; i <= n; ++i) cuts[i] = i * extent / n;
  return cuts;
}

std::vector<std::size_t> random_cuts(std::size_t extent, std::size_t n, double min_fraction, Rng& rng) {
  std::vector<double> ratio(n);
  double total = 0;
  for (double& r : ratio) {
    r = rng.uniform(min_fraction, 2.0 - min_fraction);
    total += r;
  }
  // Normalize so the ratios average to one, then contract toward one if any
  // ratio left [f, 2 - f].
  double worst = 0;
  for (double& r : ratio) {
    r *= static_cast<double>(n) / total;
    worst = std::max(worst, std::abs(r - 1.0));
  }
  const double slack = 1.0 - min_fraction;
  if (worst > slack) {
    const double c = slack / worst;
    for (double& r : ratio) r = 1.0 + c * (r - 1.0);
  }

  const double unit = static_cast<double>(extent) / static_cast<double>(n);
  std::vector<std::size_t> size(n);
  std::vector<double> frac(n);
  std::size_t used = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double e = ratio[i] * unit;
    size[i] = static_cast<std::size_t>(std::floor(e));
    frac[i] = e - std::floor(e);
    used += size[i];
  }
  // Largest remainder; ties go to the lower index.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  for (std::size_t k = 0; used < extent; ++k, ++used) size[order[k % n]] += 1;
  for (; used > extent; --used) *std::max_element(size.begin(), size.end()) -= 1;
  // Tiny extents can round a cell to zero; borrow from the largest cell.
  for (std::size_t i = 0; i < n; ++i) {
    if (size[i] > 0) continue;
    auto largest = std::max_element(size.begin(), size.end());
    *largest -= 1;
    size[i] = 1;
  }

  std::vector<std::size_t> cuts(n + 1, 0);
  for (std::size_t i = 0; i < n; ++i) cuts[i + 1] = cuts[i] + size[i];
  return cuts;
}

std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(v[i]);
  }
  return s;
}

std::vector<std::size_t> parse_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    require(!item.empty() && item.find_first_not_of("0123456789") == std::string::npos, "format",
            "bad integer list '" + s + "'");
    out.push_back(std::stoull(item));
  }
  return out;
}

void check_image(const Tensor<float>& image, const PatchGrid& grid) {
  require(image.rank() == 3, "shape_mismatch", "rsy expects a [C, H, W] image, got " + shape_string(image.shape()));
  require(image.dim(1) == grid.height() && image.dim(2) == grid.width(), "shape_mismatch",
          "image " + shape_string(image.shape()) + " does not match grid " + std::to_string(grid.height()) + "x" +
              std::to_string(grid.width()));
}

}  // namespace

std::string to_string(ScaleMode mode) { return mode == ScaleMode::kUniform ? "uniform" : "random_scale"; }

ScaleMode parse_scale_mode(std::string_view text) {
  if (text == "uniform") return ScaleMode::kUniform;
  if (text == "random_scale") return ScaleMode::kRandomScale;
  throw Error("invalid_argument", "unknown rsy mode '" + std::string(text) + "' (uniform|random_scale)");
}

void RsyConfig::validate() const {
  require(rows >= 1 && cols >= 1, "invalid_argument", "rsy grid counts must be >= 1");
  require(min_cell_fraction > 0 && min_cell_fraction <= 1, "invalid_argument",
          "rsy min_cell_fraction must be in (0, 1]");
  require(probability >= 0 && probability <= 1, "invalid_argument", "rsy probability must be in [0, 1]");
}

bool PatchGrid::uniform_cells() const {
  for (std::size_t r = 1; r < rows(); ++r)
    if (cell_height(r) != cell_height(0)) return false;
  for (std::size_t c = 1; c < cols(); ++c)
    if (cell_width(c) != cell_width(0)) return false;
  return true;
}

PatchGrid PatchGrid::uniform(std::size_t height, std::size_t width, std::size_t rows, std::size_t cols) {
  require(rows >= 1 && cols >= 1 && height >= rows && width >= cols, "invalid_argument",
          "grid " + std::to_string(rows) + "x" + std::to_string(cols) + " does not fit a " + std::to_string(height) +
              "x" + std::to_string(width) + " image");
  return {uniform_cuts(height, rows), uniform_cuts(width, cols)};
}

void PatchGrid::validate() const {
  for (const auto* cuts : {&row_cuts, &col_cuts}) {
    require(cuts->size() >= 2 && cuts->front() == 0, "invalid_argument", "grid cuts must start at 0");
    for (std::size_t i = 1; i < cuts->size(); ++i)
      require((*cuts)[i] > (*cuts)[i - 1], "invalid_argument", "grid cuts must strictly increase");
  }
}

PatchGrid sample_grid(std::size_t height, std::size_t width, const RsyConfig& config, Rng& rng) {
  config.validate();
  if (config.mode == ScaleMode::kUniform) return PatchGrid::uniform(height, width, config.rows, config.cols);
  require(height >= config.rows && width >= config.cols, "invalid_argument",
          "rsy grid larger than the image");
  PatchGrid grid;
  grid.row_cuts = random_cuts(height, config.rows, config.min_cell_fraction, rng);
  grid.col_cuts = random_cuts(width, config.cols, config.min_cell_fraction, rng);
  return grid;
}

std::vector<Tensor<float>> split(const Tensor<float>& image, const PatchGrid& grid) {
  grid.validate();
  check_image(image, grid);
  const std::size_t channels = image.dim(0), w = image.dim(2);
  std::vector<Tensor<float>> patches;
  patches.reserve(grid.cells());
  for (std::size_t r = 0; r < grid.rows(); ++r) {
    for (std::size_t c = 0; c < grid.cols(); ++c) {
      const std::size_t ph = grid.cell_height(r), pw = grid.cell_width(c);
      Tensor<float> patch({channels, ph, pw});
      for (std::size_t ch = 0; ch < channels; ++ch)
        for (std::size_t y = 0; y < ph; ++y) {
          const float* src = image.data() + (ch * image.dim(1) + grid.row_cuts[r] + y) * w + grid.col_cuts[c];
          std::copy(src, src + pw, patch.data() + (ch * ph + y) * pw);
        }
      patches.push_back(std::move(patch));
    }
  }
  return patches;
}

std::vector<std::size_t> shuffle_2d(std::size_t n_cells, Rng& rng) {
  require(n_cells >= 1, "invalid_argument", "shuffle needs at least one cell");
  std::vector<std::size_t> perm(n_cells);
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = n_cells - 1; i >= 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.below(i + 1));
    std::swap(perm[i], perm[j]);
  }
  return perm;
}

Tensor<float> resize_bilinear(const Tensor<float>& patch, std::size_t out_h, std::size_t out_w) {
  const std::size_t channels = patch.dim(0), in_h = patch.dim(1), in_w = patch.dim(2);
  if (in_h == out_h && in_w == out_w) return patch;
  Tensor<float> out({channels, out_h, out_w});
  auto source = [](std::size_t d, std::size_t in, std::size_t outn) {
    double s = (static_cast<double>(d) + 0.5) * static_cast<double>(in) / static_cast<double>(outn) - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in - 1));
    const std::size_t i0 = static_cast<std::size_t>(std::floor(s));
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    return std::tuple{i0, i1, s - static_cast<double>(i0)};
  };
  for (std::size_t y = 0; y < out_h; ++y) {
    const auto [y0, y1, fy] = source(y, in_h, out_h);
    for (std::size_t x = 0; x < out_w; ++x) {
      const auto [x0, x1, fx] = source(x, in_w, out_w);
      for (std::size_t ch = 0; ch < channels; ++ch) {
        const double top = (1 - fx) * patch(ch, y0, x0) + fx * patch(ch, y0, x1);
        const double bottom = (1 - fx) * patch(ch, y1, x0) + fx * patch(ch, y1, x1);
        out(ch, y, x) = static_cast<float>((1 - fy) * top + fy * bottom);
      }
    }
  }
  return out;
}

Tensor<float> recompose(const std::vector<Tensor<float>>& patches, const std::vector<std::size_t>& permutation,
                        const PatchGrid& destination) {
  destination.validate();
  require(patches.size() == destination.cells() && permutation.size() == patches.size(), "shape_mismatch",
          "recompose: " + std::to_string(patches.size()) + " patches, " + std::to_string(permutation.size()) +
              " permutation entries, " + std::to_string(destination.cells()) + " cells");
  std::vector<bool> seen(permutation.size(), false);
  for (std::size_t p : permutation) {
    require(p < seen.size() && !seen[p], "invalid_argument", "recompose: permutation is not a bijection");
    seen[p] = true;
  }
  const std::size_t channels = patches.front().dim(0);
  const std::size_t h = destination.height(), w = destination.width();
  Tensor<float> out({channels, h, w});
  for (std::size_t k = 0; k < patches.size(); ++k) {
    const std::size_t cell = permutation[k];
    const std::size_t r = cell / destination.cols(), c = cell % destination.cols();
    const std::size_t ch_h = destination.cell_height(r), ch_w = destination.cell_width(c);
    const Tensor<float> placed = resize_bilinear(patches[k], ch_h, ch_w);
    for (std::size_t ch = 0; ch < channels; ++ch)
      for (std::size_t y = 0; y < ch_h; ++y) {
        const float* src = placed.data() + (ch * ch_h + y) * ch_w;
        std::copy(src, src + ch_w, out.data() + (ch * h + destination.row_cuts[r] + y) * w + destination.col_cuts[c]);
      }
  }
  return out;
}

std::pair<Sample, RsyRecord> rsy_apply(const Sample& sample, const RsyConfig& config, Rng& rng) {
  config.validate();
  require(sample.image.rank() == 3, "shape_mismatch", "rsy expects a [C, H, W] image");
  RsyRecord record;
  record.mode = config.mode;
  record.seed = rng.state();
  const std::size_t h = sample.image.dim(1), w = sample.image.dim(2);
  record.source = sample_grid(h, w, config, rng);
  record.destination = config.mode == ScaleMode::kUniform ? record.source : sample_grid(h, w, config, rng);
  record.permutation = shuffle_2d(record.source.cells(), rng);

  Sample out;
  out.image = recompose(split(sample.image, record.source), record.permutation, record.destination);
  out.count = sample.count;
  return {std::move(out), std::move(record)};
}

Tensor<float> replay(const Tensor<float>& image, const RsyRecord& record) {
  return recompose(split(image, record.source), record.permutation, record.destination);
}

Tensor<float> invert(const Tensor<float>& image, const RsyRecord& record) {
  require(record.mode == ScaleMode::kUniform && record.source == record.destination &&
              record.destination.uniform_cells(),
          "not_invertible", "not invertible: only uniform-mode records with equal cells can be undone");
  std::vector<std::size_t> inverse(record.permutation.size());
  for (std::size_t k = 0; k < record.permutation.size(); ++k) inverse[record.permutation[k]] = k;
  return recompose(split(image, record.destination), inverse, record.source);
}

std::string RsyRecord::to_text() const {
  std::ostringstream os;
  os << "mode=" << to_string(mode) << "\n"
     << "seed=" << seed << "\n"
     << "grid=" << source.rows() << "x" << source.cols() << "\n"
     << "image=" << source.height() << "x" << source.width() << "\n"
     << "src_rows=" << join(source.row_cuts) << "\n"
     << "src_cols=" << join(source.col_cuts) << "\n"
     << "dst_rows=" << join(destination.row_cuts) << "\n"
     << "dst_cols=" << join(destination.col_cuts) << "\n"
     << "perm=" << join(permutation) << "\n";
  return os.str();
}

RsyRecord RsyRecord::from_text(std::string_view text) {
  RsyRecord r;
  std::istringstream is{std::string(text)};
  std::string line;
  bool have_mode = false, have_perm = false;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, "format", "rsy record: expected key=value, got '" + line + "'");
    const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    if (key == "mode") {
      r.mode = parse_scale_mode(value);
      have_mode = true;
    } else if (key == "seed") {
      r.seed = std::stoull(value);
    } else if (key == "src_rows") {
      r.source.row_cuts = parse_list(value);
    } else if (key == "src_cols") {
      r.source.col_cuts = parse_list(value);
    } else if (key == "dst_rows") {
      r.destination.row_cuts = parse_list(value);
    } else if (key == "dst_cols") {
      r.destination.col_cuts = parse_list(value);
    } else if (key == "perm") {
      r.permutation = parse_list(value);
      have_perm = true;
    }
  }
  require(have_mode && have_perm, "format", "rsy record is missing mode or perm");
  r.source.validate();
  r.destination.validate();
  require(r.permutation.size() == r.source.cells() && r.source.cells() == r.destination.cells(), "format",
          "rsy record: grid and permutation sizes disagree");
  return r;
}

}  // namespace lkc::rsy
