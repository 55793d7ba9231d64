#pragma once

#include <string>
#include <vector>

#include "lkc/core/gradcheck.hpp"

namespace lkc::model {

struct GradCheckCase {
  std::string name;
  GradCheckReport report;
  std::size_t parameters = 0;
  bool passed = false;
};

/// Reverse-mode gradients computed in T against 64-bit central differences
/// (step h) for every differentiable op in isolation, inputs included, and for
/// the tiny model in train and eval mode. Case data comes from
/// Rng::derive(seed, case). `floor` is the relative-error floor.
template <Real T>
std::vector<GradCheckCase> run_gradcheck_suite(double tolerance, double h = 1e-5, std::uint64_t seed = 1,
                                               double floor = kGradCheckFloor);

}  // namespace lkc::model
