#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ssd {

struct GradCheckRow {
  std::string op;
  double max_rel_err = 0.0;
  bool pass = false;
};

/// Finite-difference verification of every differentiable composite: conv2d
/// (input and kernel), SE, CBAM-spatial, C2PSA, fusion node (inputs and both
/// weights), focal loss, objectness BCE, and SIoU. Each op is probed at
/// `points` random locations; pass means max relative error <= tolerance.
std::vector<GradCheckRow> run_gradient_suite(double eps = 1e-3, uint64_t seed = 0,
                                             int points = 10, double tolerance = 1e-3);

}  // namespace ssd
