#pragma once

#include <cstddef>
#include <vector>

#include "lkc/core/tensor.hpp"

namespace lkc {

/// Object center in continuous pixel coordinates: pixel (i, j) covers
/// [i, i+1) x [j, j+1), so its center is (i + 0.5, j + 0.5).
struct Point {
  double y = 0;
  double x = 0;
  bool operator==(const Point&) const = default;
};

/// An image [C, H, W] with values in [0, 1], its object count and the object
/// centers when they are known.
struct Sample {
  Tensor<float> image;
  std::size_t count = 0;
  std::vector<Point> centers;
};

}  // namespace lkc
