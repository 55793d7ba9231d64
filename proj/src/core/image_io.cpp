#include "lkc/core/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

#include "lkc/core/error.hpp"

namespace lkc {

namespace {

class HeaderReader {
 public:
  explicit HeaderReader(std::string_view bytes) : bytes_(bytes) {}

  std::size_t number() {
    skip_space();
    require(pos_ < bytes_.size() && std::isdigit(static_cast<unsigned char>(bytes_[pos_])), "format",
            "malformed netpbm header");
    std::size_t v = 0;
    while (pos_ < bytes_.size() && std::isdigit(static_cast<unsigned char>(bytes_[pos_]))) {
      v = v * 10 + static_cast<std::size_t>(bytes_[pos_++] - '0');
      require(v < (1u << 24), "format", "netpbm header value too large");
    }
    return v;
  }

  // Exactly one whitespace byte separates the header from the raster.
  std::size_t raster_start() {
    require(pos_ < bytes_.size() && std::isspace(static_cast<unsigned char>(bytes_[pos_])), "format",
            "malformed netpbm header");
    return pos_ + 1;
  }

 private:
  void skip_space() {
    while (pos_ < bytes_.size()) {
      if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(bytes_[pos_]))) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  std::string_view bytes_;
  std::size_t pos_ = 2;
};

}  // namespace

Tensor<float> decode_pnm(std::string_view bytes) {
  require(bytes.size() >= 2 && bytes[0] == 'P' && (bytes[1] == '5' || bytes[1] == '6'), "format",
          "only binary P5/P6 netpbm images are supported");
  const std::size_t channels = bytes[1] == '5' ? 1 : 3;
  HeaderReader header(bytes);
  const std::size_t w = header.number();
  const std::size_t h = header.number();
  const std::size_t maxval = header.number();
  require(w > 0 && h > 0, "format", "netpbm image has zero extent");
  require(maxval > 0 && maxval <= 255, "format", "netpbm maxval must be in 1..255");
  const std::size_t start = header.raster_start();
  require(bytes.size() >= start + w * h * channels, "format", "netpbm raster is truncated");

  Tensor<float> image({channels, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < channels; ++c) {
        const auto v = static_cast<unsigned char>(bytes[start + (y * w + x) * channels + c]);
        image[(c * h + y) * w + x] = static_cast<float>(v) / static_cast<float>(maxval);
      }
  return image;
}

std::string encode_pnm(const Tensor<float>& image) {
  require(image.rank() == 3 && (image.dim(0) == 1 || image.dim(0) == 3), "shape_mismatch",
          "netpbm output needs a [1|3, H, W] image, got " + shape_string(image.shape()));
  const std::size_t channels = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::string out = (channels == 1 ? "P5\n" : "P6\n") + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  const std::size_t start = out.size();
  out.resize(start + channels * h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < channels; ++c) {
        const float v = std::clamp(image[(c * h + y) * w + x], 0.0f, 1.0f);
        out[start + (y * w + x) * channels + c] = static_cast<char>(std::lround(v * 255.0f));
      }
  return out;
}

Tensor<float> read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "io", "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_pnm(ss.str());
}

void write_pnm(const Tensor<float>& image, const std::filesystem::path& path) {
  const std::string bytes = encode_pnm(image);
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "io", "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(out.good(), "io", "failed writing " + path.string());
}

}  // namespace lkc
