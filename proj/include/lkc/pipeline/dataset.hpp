#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "lkc/core/rng.hpp"
#include "lkc/data/sample.hpp"

namespace lkc::pipeline {

enum class ObjectProfile { kDisc, kGaussian };

std::string to_string(ObjectProfile profile);
ObjectProfile parse_object_profile(const std::string& text);

/// Synthetic counting images: k ~ U{count_min..count_max} bright objects on a
/// dim noisy background.
struct DatasetConfig {
  std::size_t height = 96;
  std::size_t width = 96;
  std::size_t channels = 1;
  std::size_t count_min = 0;
  std::size_t count_max = 30;
  double radius_min = 2;
  double radius_max = 6;
  ObjectProfile profile = ObjectProfile::kDisc;
  double intensity_min = 0.5;
  double intensity_max = 1.0;
  double background = 0.1;
  double noise = 0.02;
  std::size_t train = 2000;
  std::size_t val = 200;
  std::size_t test = 200;
  std::uint64_t seed = 3035;

  void validate() const;
  nlohmann::json to_json() const;
  static DatasetConfig from_json(const nlohmann::json& j);
  static DatasetConfig desk();
  /// 384 px RGB images.
  static DatasetConfig paper();
  static DatasetConfig preset(const std::string& name);
  bool operator==(const DatasetConfig&) const = default;
};

struct Dataset {
  DatasetConfig config;
  std::vector<Sample> train;
  std::vector<Sample> val;
  std::vector<Sample> test;

  /// "train", "val" or "test".
  const std::vector<Sample>& split(const std::string& name) const;
};

/// One image. Centers are drawn uniformly with every object fully inside the
/// image; up to a fixed number of redraws keeps a center from falling inside
/// an earlier object's radius.
Sample generate_sample(const DatasetConfig& config, Rng& rng);

/// Sample i of split s (0 train, 1 val, 2 test) uses Rng::derive(seed, s, i).
Dataset gen_dataset(const DatasetConfig& config);

// On disk: manifest.json plus {train,val,test}.lkc1, each holding `images`
// [N, C, H, W] f32, `counts` [N] f64, `center_offsets` [N + 1] f64 and, when
// any object exists, `centers` [K, 2] f64 (y, x).
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);
std::vector<Sample> load_split(const std::filesystem::path& dir, const std::string& split);

}  // namespace lkc::pipeline
