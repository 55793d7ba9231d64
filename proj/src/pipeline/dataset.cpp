#include "lkc/pipeline/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "lkc/core/error.hpp"
#include "lkc/core/lkc1.hpp"

namespace lkc::pipeline {

namespace {

constexpr int kPlacementAttempts = 20;
constexpr const char* kSplits[] = {"train", "val", "test"};

struct Object {
  double y, x, radius;
  std::vector<double> intensity;  // per channel
};

double coverage(const DatasetConfig& config, double d, double radius) {
  if (config.profile == ObjectProfile::kDisc) return std::clamp(radius + 0.5 - d, 0.0, 1.0);
  const double sigma = radius / 2;
  if (d > 3 * sigma) return 0.0;
  return std::exp(-d * d / (2 * sigma * sigma));
}

std::vector<Sample> generate_split(const DatasetConfig& config, std::size_t split, std::size_t n) {
  std::vector<Sample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = Rng::derive(config.seed, split, i);
    out.push_back(generate_sample(config, rng));
  }
  return out;
}

TensorArchive split_archive(const std::vector<Sample>& samples) {
  require(!samples.empty(), "invalid_argument", "cannot store an empty split");
  const Shape& shape = samples.front().image.shape();
  const std::size_t n = samples.size(), per = samples.front().image.size();
  Tensor<float> images({n, shape[0], shape[1], shape[2]});
  Tensor<double> counts({n});
  Tensor<double> offsets({n + 1});
  std::vector<double> centers;
  for (std::size_t i = 0; i < n; ++i) {
    require(samples[i].image.shape() == shape, "shape_mismatch", "split images must share one shape");
    std::copy(samples[i].image.data(), samples[i].image.data() + per, images.data() + i * per);
    counts[i] = static_cast<double>(samples[i].count);
    offsets[i] = static_cast<double>(centers.size() / 2);
    for (const Point& p : samples[i].centers) {
      centers.push_back(p.y);
      centers.push_back(p.x);
    }
  }
  offsets[n] = static_cast<double>(centers.size() / 2);
  TensorArchive archive;
  archive.put("images", std::move(images));
  archive.put("counts", std::move(counts));
  archive.put("center_offsets", std::move(offsets));
  if (!centers.empty()) {
    const std::size_t k = centers.size() / 2;
    archive.put("centers", Tensor<double>({k, 2}, std::move(centers)));
  }
  return archive;
}

std::vector<Sample> samples_from_archive(const TensorArchive& archive) {
  const Tensor<float> images = archive.tensor<float>("images");
  const Tensor<double> counts = archive.tensor<double>("counts");
  const Tensor<double> offsets = archive.tensor<double>("center_offsets");
  require(images.rank() == 4 && counts.size() == images.dim(0) && offsets.size() == images.dim(0) + 1, "format",
          "split file has inconsistent images/counts/center_offsets");
  Tensor<double> centers;
  if (archive.contains("centers")) centers = archive.tensor<double>("centers");
  const std::size_t n = images.dim(0), per = images.size() / n;
  std::vector<Sample> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    Sample& s = out[i];
    s.image = Tensor<float>({images.dim(1), images.dim(2), images.dim(3)},
                            std::vector<float>(images.data() + i * per, images.data() + (i + 1) * per));
    s.count = static_cast<std::size_t>(counts[i]);
    const auto lo = static_cast<std::size_t>(offsets[i]), hi = static_cast<std::size_t>(offsets[i + 1]);
    require(lo <= hi && (hi == 0 || hi <= centers.size() / 2), "format", "split file center offsets out of range");
    for (std::size_t k = lo; k < hi; ++k) s.centers.push_back({centers[2 * k], centers[2 * k + 1]});
  }
  return out;
}

}  // namespace

std::string to_string(ObjectProfile profile) { return profile == ObjectProfile::kDisc ? "disc" : "gaussian"; }

ObjectProfile parse_object_profile(const std::string& text) {
  if (text == "disc") return ObjectProfile::kDisc;
  if (text == "gaussian") return ObjectProfile::kGaussian;
  throw Error("invalid_argument", "unknown object profile '" + text + "' (disc|gaussian)");
}

void DatasetConfig::validate() const {
  require(height >= 1 && width >= 1 && channels >= 1, "invalid_argument", "image extents must be positive");
  require(count_min <= count_max, "invalid_argument", "count_min must not exceed count_max");
  require(radius_min >= 1 && radius_min <= radius_max, "invalid_argument", "radii must satisfy 1 <= min <= max");
  require(2 * radius_max < static_cast<double>(std::min(height, width)), "invalid_argument",
          "objects of the largest radius must fit inside the image");
  require(intensity_min >= 0 && intensity_min <= intensity_max && intensity_max <= 1, "invalid_argument",
          "intensities must satisfy 0 <= min <= max <= 1");
  require(background >= 0 && background <= 1 && noise >= 0, "invalid_argument", "background in [0,1], noise >= 0");
  require(train >= 1 && val >= 1 && test >= 1, "invalid_argument", "every split needs at least one sample");
}

nlohmann::json DatasetConfig::to_json() const {
  return {{"height", height},
          {"width", width},
          {"channels", channels},
          {"count_min", count_min},
          {"count_max", count_max},
          {"radius_min", radius_min},
          {"radius_max", radius_max},
          {"profile", to_string(profile)},
          {"intensity_min", intensity_min},
          {"intensity_max", intensity_max},
          {"background", background},
          {"noise", noise},
          {"train", train},
          {"val", val},
          {"test", test},
          {"seed", seed}};
}

DatasetConfig DatasetConfig::from_json(const nlohmann::json& j) {
  DatasetConfig c = j.contains("preset") ? preset(j.at("preset").get<std::string>()) : DatasetConfig{};
  try {
    c.height = j.value("height", c.height);
    c.width = j.value("width", c.width);
    c.channels = j.value("channels", c.channels);
    c.count_min = j.value("count_min", c.count_min);
    c.count_max = j.value("count_max", c.count_max);
    c.radius_min = j.value("radius_min", c.radius_min);
    c.radius_max = j.value("radius_max", c.radius_max);
    c.profile = parse_object_profile(j.value("profile", to_string(c.profile)));
    c.intensity_min = j.value("intensity_min", c.intensity_min);
    c.intensity_max = j.value("intensity_max", c.intensity_max);
    c.background = j.value("background", c.background);
    c.noise = j.value("noise", c.noise);
    c.train = j.value("train", c.train);
    c.val = j.value("val", c.val);
    c.test = j.value("test", c.test);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw Error("format", std::string("dataset config: ") + e.what());
  }
  c.validate();
  return c;
}

DatasetConfig DatasetConfig::desk() { return DatasetConfig{}; }

DatasetConfig DatasetConfig::paper() {
  DatasetConfig c;
  c.height = 384;
  c.width = 384;
  c.channels = 3;
  return c;
}

DatasetConfig DatasetConfig::preset(const std::string& name) {
  if (name == "desk") return desk();
  if (name == "paper") return paper();
  throw Error("invalid_argument", "unknown dataset preset '" + name + "' (desk|paper)");
}

const std::vector<Sample>& Dataset::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "val") return val;
  if (name == "test") return test;
  throw Error("invalid_argument", "unknown split '" + name + "' (train|val|test)");
}

Sample generate_sample(const DatasetConfig& config, Rng& rng) {
  config.validate();
  const std::size_t h = config.height, w = config.width, ch = config.channels;
  const std::size_t k = config.count_min + rng.below(config.count_max - config.count_min + 1);

  std::vector<Object> objects;
  for (std::size_t i = 0; i < k; ++i) {
    Object o;
    o.radius = rng.uniform(config.radius_min, config.radius_max);
    for (std::size_t c = 0; c < ch; ++c) o.intensity.push_back(rng.uniform(config.intensity_min, config.intensity_max));
    for (int attempt = 0; attempt < kPlacementAttempts; ++attempt) {
      o.y = rng.uniform(o.radius, static_cast<double>(h) - o.radius);
      o.x = rng.uniform(o.radius, static_cast<double>(w) - o.radius);
      const bool clear = std::none_of(objects.begin(), objects.end(), [&](const Object& p) {
        return std::hypot(p.y - o.y, p.x - o.x) < std::max(p.radius, o.radius);
      });
      if (clear) break;
    }
    objects.push_back(std::move(o));
  }

  Tensor<float> layer({ch, h, w});
  for (const Object& o : objects) {
    const double reach = config.profile == ObjectProfile::kDisc ? o.radius + 0.5 : 1.5 * o.radius;
    const auto y0 = static_cast<std::size_t>(std::max(0.0, std::floor(o.y - reach)));
    const auto y1 = static_cast<std::size_t>(std::min<double>(static_cast<double>(h), std::ceil(o.y + reach)));
    const auto x0 = static_cast<std::size_t>(std::max(0.0, std::floor(o.x - reach)));
    const auto x1 = static_cast<std::size_t>(std::min<double>(static_cast<double>(w), std::ceil(o.x + reach)));
    for (std::size_t y = y0; y < y1; ++y)
      for (std::size_t x = x0; x < x1; ++x) {
        const double cov = coverage(config, std::hypot(y + 0.5 - o.y, x + 0.5 - o.x), o.radius);
        if (cov <= 0) continue;
        for (std::size_t c = 0; c < ch; ++c) {
          float& v = layer[(c * h + y) * w + x];
          v = std::max(v, static_cast<float>(o.intensity[c] * cov));
        }
      }
  }

  Sample s;
  s.image = Tensor<float>({ch, h, w});
  for (std::size_t i = 0; i < s.image.size(); ++i) {
    const double v = std::max(config.background, static_cast<double>(layer[i])) + config.noise * rng.normal();
    s.image[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
  s.count = k;
  for (const Object& o : objects) s.centers.push_back({o.y, o.x});
  return s;
}

Dataset gen_dataset(const DatasetConfig& config) {
  config.validate();
  Dataset d;
  d.config = config;
  d.train = generate_split(config, 0, config.train);
  d.val = generate_split(config, 1, config.val);
  d.test = generate_split(config, 2, config.test);
  return d;
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  require(!ec, "io", "cannot create " + dir.string() + ": " + ec.message());
  nlohmann::json manifest;
  manifest["config"] = dataset.config.to_json();
  for (const char* name : kSplits) {
    const std::vector<Sample>& samples = dataset.split(name);
    save_tensors(split_archive(samples), dir / (std::string(name) + ".lkc1"));
    manifest["splits"][name] = {{"file", std::string(name) + ".lkc1"}, {"samples", samples.size()}};
  }
  std::ofstream out(dir / "manifest.json");
  require(out.good(), "io", "cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << '\n';
}

std::vector<Sample> load_split(const std::filesystem::path& dir, const std::string& split) {
  require(split == "train" || split == "val" || split == "test", "invalid_argument",
          "unknown split '" + split + "' (train|val|test)");
  return samples_from_archive(load_tensors(dir / (split + ".lkc1")));
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  require(in.good(), "io", "cannot open " + (dir / "manifest.json").string());
  Dataset d;
  try {
    d.config = DatasetConfig::from_json(nlohmann::json::parse(in).at("config"));
  } catch (const nlohmann::json::exception& e) {
    throw Error("format", std::string("dataset manifest: ") + e.what());
  }
  d.train = load_split(dir, "train");
  d.val = load_split(dir, "val");
  d.test = load_split(dir, "test");
  return d;
}

}  // namespace lkc::pipeline
