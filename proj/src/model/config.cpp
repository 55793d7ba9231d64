#include "lkc/model/config.hpp"

#include <algorithm>

#include "lkc/core/error.hpp"

namespace lkc::model {

namespace {

std::size_t conv_extent(std::size_t in, std::size_t stride) { return (in - 1) / stride + 1; }

}  // namespace

std::string to_string(BlockMode mode) { return mode == BlockMode::kParallel ? "parallel" : "fused"; }

BlockMode parse_block_mode(const std::string& text) {
  if (text == "parallel") return BlockMode::kParallel;
  if (text == "fused") return BlockMode::kFused;
  throw Error("invalid_argument", "unknown block mode '" + text + "' (parallel|fused)");
}

void ModelConfig::validate() const {
  require(input_channels > 0 && stem_channels > 0 && expansion > 0, "invalid_argument",
          "model channel counts must be positive");
  for (const StageConfig& s : stages) {
    require(s.channels > 0 && s.stride >= 1, "invalid_argument", "stage channels and stride must be positive");
    require(s.large_kernel % 2 == 1, "invalid_argument", "large kernel must be odd");
    if (s.small_kernel != 0)
      require(s.small_kernel % 2 == 1 && s.small_kernel < s.large_kernel, "invalid_argument",
              "small kernel must be odd and smaller than the large kernel");
  }
  require(head.pool_h >= 1 && head.pool_w >= 1 && head.hidden >= 1, "invalid_argument",
          "head pool grid and hidden width must be >= 1");
  require(head.dropout >= 0 && head.dropout < 1, "invalid_argument", "dropout must be in [0, 1)");
}

std::size_t ModelConfig::total_stride() const {
  std::size_t s = 2;
  for (const StageConfig& st : stages) s *= st.stride;
  return s;
}

std::size_t ModelConfig::feature_extent(std::size_t input_extent) const {
  std::size_t e = conv_extent(input_extent, 2);
  for (const StageConfig& st : stages) e = conv_extent(e, st.stride);
  return e;
}

std::size_t ModelConfig::min_input(std::size_t pool_extent) const {
  std::size_t n = 1;
  while (feature_extent(n) < pool_extent) ++n;
  return n;
}

std::size_t ModelConfig::block_count() const {
  std::size_t n = 0;
  for (const StageConfig& s : stages) n += s.blocks;
  return n;
}

std::size_t ModelConfig::final_channels() const { return stages.empty() ? stem_channels : stages.back().channels; }

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.input_channels = 1;
  c.stem_channels = 16;
  c.stages = {{24, 1, 13, 3, 2}, {32, 1, 13, 3, 2}};
  c.expansion = 2;
  c.head = {3, 3, 128, 0.5};
  return c;
}

ModelConfig ModelConfig::paper() {
  ModelConfig c;
  c.input_channels = 3;
  c.stem_channels = 32;
  c.stages = {{64, 2, 31, 5, 2}, {128, 2, 27, 5, 2}, {256, 2, 13, 5, 2}};
  c.expansion = 4;
  c.head = {9, 9, 128, 0.5};
  return c;
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.input_channels = 1;
  c.stem_channels = 2;
  c.stages = {{2, 1, 5, 3, 1}};
  c.expansion = 2;
  c.head = {2, 2, 8, 0.5};
  return c;
}

ModelConfig ModelConfig::preset(const std::string& name) {
  if (name == "desk") return desk();
  if (name == "paper") return paper();
  if (name == "tiny") return tiny();
  throw Error("invalid_argument", "unknown model preset '" + name + "' (desk|paper|tiny)");
}

nlohmann::json ModelConfig::to_json() const {
  nlohmann::json j;
  j["input_channels"] = input_channels;
  j["stem_channels"] = stem_channels;
  j["expansion"] = expansion;
  j["block_mode"] = to_string(block_mode);
  j["stages"] = nlohmann::json::array();
  for (const StageConfig& s : stages)
    j["stages"].push_back({{"channels", s.channels},
                           {"blocks", s.blocks},
                           {"large_kernel", s.large_kernel},
                           {"small_kernel", s.small_kernel},
                           {"stride", s.stride}});
  j["head"] = {{"pool_h", head.pool_h}, {"pool_w", head.pool_w}, {"hidden", head.hidden}, {"dropout", head.dropout}};
  return j;
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    if (j.contains("preset")) c = preset(j.at("preset").get<std::string>());
    c.input_channels = j.value("input_channels", c.input_channels);
    c.stem_channels = j.value("stem_channels", c.stem_channels);
    c.expansion = j.value("expansion", c.expansion);
    c.block_mode = parse_block_mode(j.value("block_mode", to_string(c.block_mode)));
    if (j.contains("stages")) c.stages.clear();
    if (j.contains("stages"))
      for (const auto& s : j.at("stages")) {
        StageConfig st;
        st.channels = s.value("channels", st.channels);
        st.blocks = s.value("blocks", st.blocks);
        st.large_kernel = s.value("large_kernel", st.large_kernel);
        st.small_kernel = s.value("small_kernel", st.small_kernel);
        st.stride = s.value("stride", st.stride);
        c.stages.push_back(st);
      }
    if (j.contains("head")) {
      const auto& h = j.at("head");
      c.head.pool_h = h.value("pool_h", c.head.pool_h);
      c.head.pool_w = h.value("pool_w", c.head.pool_w);
      c.head.hidden = h.value("hidden", c.head.hidden);
      c.head.dropout = h.value("dropout", c.head.dropout);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error("format", std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

}  // namespace lkc::model
