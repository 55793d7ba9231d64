#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "lkc/core/tensor.hpp"

namespace lkc {

/// Binary netpbm: P5 (gray, 1 channel) and P6 (RGB, 3 channels), maxval up
/// to 255. Images are [C, H, W] floats in [0, 1].
Tensor<float> decode_pnm(std::string_view bytes);
/// Values are clamped to [0, 1] and rounded to 8 bits.
std::string encode_pnm(const Tensor<float>& image);

Tensor<float> read_pnm(const std::filesystem::path& path);
void write_pnm(const Tensor<float>& image, const std::filesystem::path& path);

}  // namespace lkc
