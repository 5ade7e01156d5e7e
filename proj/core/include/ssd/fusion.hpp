#pragma once

#include <utility>
#include <vector>

#include "ssd/autograd.hpp"

namespace ssd {

/// One weighted cross-scale fusion point. The learnable scalars are squashed
/// through a sigmoid so each effective weight lies in (0,1); both start at 0
/// (weight 0.5 each).
struct FusionNode {
  ag::Var alpha, beta;
  int channels = 0;

  static FusionNode create(int channels);

  /// (sigmoid(alpha), sigmoid(beta)) as plain doubles.
  std::pair<double, double> weights() const;
  std::vector<ag::Var> params() { return {alpha, beta}; }
};

/// sigmoid(alpha) * p_i + sigmoid(beta) * upsample2x(p_j). p_j must be half
/// of p_i in both spatial extents, channel counts equal.
ag::Var fuse(const FusionNode& node, const ag::Var& p_i, const ag::Var& p_j);
Tensor fuse(const FusionNode& node, const Tensor& p_i, const Tensor& p_j);

/// Bottom-up variant: sigmoid(alpha) * p_i + sigmoid(beta) * avg_pool2(p_j),
/// where p_j is the finer level (twice the spatial size of p_i).
ag::Var fuse_down(const FusionNode& node, const ag::Var& p_i, const ag::Var& p_j);
Tensor fuse_down(const FusionNode& node, const Tensor& p_i, const Tensor& p_j);

/// Nodes for one bidirectional pass over `levels` pyramid levels.
struct PyramidNodes {
  std::vector<FusionNode> top_down;   // levels-1 nodes
  std::vector<FusionNode> bottom_up;  // levels-1 nodes

  static PyramidNodes create(int levels, int channels);
  std::vector<ag::Var> params();
};

/// Top-down pass (coarse to fine, nearest upsampling) followed by a
/// bottom-up pass (fine to coarse, stride-2 average pooling). Levels are
/// ordered coarse to fine; adjacent levels must differ by exactly a factor
/// of 2 in both spatial extents. Shapes are preserved; a single level is
/// returned unchanged.
std::vector<ag::Var> pyramid_fuse(const std::vector<ag::Var>& levels, const PyramidNodes& nodes);
std::vector<Tensor> pyramid_fuse(const std::vector<Tensor>& levels, const PyramidNodes& nodes);

}  // namespace ssd
