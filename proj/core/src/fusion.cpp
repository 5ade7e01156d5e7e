#include "ssd/fusion.hpp"

namespace ssd {

FusionNode FusionNode::create(int channels) {
  check(channels > 0, "FusionNode: channel count must be positive");
  FusionNode node;
  node.channels = channels;
  node.alpha = ag::param(Tensor::scalar(0.0f));
  node.beta = ag::param(Tensor::scalar(0.0f));
  return node;
}

std::pair<double, double> FusionNode::weights() const {
  return {double(ssd::sigmoid(alpha.value())[0]), double(ssd::sigmoid(beta.value())[0])};
}

namespace {

void check_fuse_shapes(const FusionNode& node, const Tensor& p_i, const Tensor& p_j,
                       bool p_j_finer) {
  check(p_i.rank() == 4 && p_j.rank() == 4, "fuse: inputs must be NCHW");
  check(p_i.extent(1) == node.channels && p_j.extent(1) == node.channels,
        "fuse: node expects ", node.channels, " channels, got ", p_i.shape_str(), " and ",
        p_j.shape_str());
  const int hi = p_i.extent(2), wi = p_i.extent(3);
  const int hj = p_j.extent(2), wj = p_j.extent(3);
  if (p_j_finer) {
    check(hj == 2 * hi && wj == 2 * wi && p_i.extent(0) == p_j.extent(0),
          "fuse_down: p_j must be exactly twice p_i spatially, got p_i ", p_i.shape_str(),
          ", p_j ", p_j.shape_str());
  } else {
    check(2 * hj == hi && 2 * wj == wi && p_i.extent(0) == p_j.extent(0),
          "fuse: p_j must be exactly half of p_i spatially, got p_i ", p_i.shape_str(),
          ", p_j ", p_j.shape_str());
  }
}

}  // namespace

ag::Var fuse(const FusionNode& node, const ag::Var& p_i, const ag::Var& p_j) {
  check_fuse_shapes(node, p_i.value(), p_j.value(), false);
  ag::Var wa = ag::sigmoid(node.alpha);
  ag::Var wb = ag::sigmoid(node.beta);
  return ag::add(ag::scale_by(p_i, wa), ag::scale_by(ag::upsample_nearest2x(p_j), wb));
}

Tensor fuse(const FusionNode& node, const Tensor& p_i, const Tensor& p_j) {
  return fuse(node, ag::constant(p_i), ag::constant(p_j)).value();
}

ag::Var fuse_down(const FusionNode& node, const ag::Var& p_i, const ag::Var& p_j) {
  check_fuse_shapes(node, p_i.value(), p_j.value(), true);
  ag::Var wa = ag::sigmoid(node.alpha);
  ag::Var wb = ag::sigmoid(node.beta);
  return ag::add(ag::scale_by(p_i, wa), ag::scale_by(ag::avg_pool2(p_j), wb));
}

Tensor fuse_down(const FusionNode& node, const Tensor& p_i, const Tensor& p_j) {
  return fuse_down(node, ag::constant(p_i), ag::constant(p_j)).value();
}

PyramidNodes PyramidNodes::create(int levels, int channels) {
  check(levels >= 1, "PyramidNodes: need at least one level");
  PyramidNodes nodes;
  for (int i = 0; i + 1 < levels; ++i) {
    nodes.top_down.push_back(FusionNode::create(channels));
    nodes.bottom_up.push_back(FusionNode::create(channels));
  }
  return nodes;
}

std::vector<ag::Var> PyramidNodes::params() {
  std::vector<ag::Var> out;
  for (auto& n : top_down) {
    out.push_back(n.alpha);
    out.push_back(n.beta);
  }
  for (auto& n : bottom_up) {
    out.push_back(n.alpha);
    out.push_back(n.beta);
  }
  return out;
}

std::vector<ag::Var> pyramid_fuse(const std::vector<ag::Var>& levels, const PyramidNodes& nodes) {
  check(!levels.empty(), "pyramid_fuse: no levels");
  const size_t n = levels.size();
  if (n == 1) return levels;
  check(nodes.top_down.size() == n - 1 && nodes.bottom_up.size() == n - 1,
        "pyramid_fuse: expected ", n - 1, " node pairs, got ", nodes.top_down.size(), "/",
        nodes.bottom_up.size());

  // Top-down: refine each finer level with its (already refined) coarser one.
  std::vector<ag::Var> refined = levels;
  for (size_t i = 1; i < n; ++i)
    refined[i] = fuse(nodes.top_down[i - 1], refined[i], refined[i - 1]);

  // Bottom-up: refresh coarser levels from the finer ones.
  for (size_t i = n - 1; i-- > 0;)
    refined[i] = fuse_down(nodes.bottom_up[i], refined[i], refined[i + 1]);
  return refined;
}

std::vector<Tensor> pyramid_fuse(const std::vector<Tensor>& levels, const PyramidNodes& nodes) {
  std::vector<ag::Var> vars;
  vars.reserve(levels.size());
  for (const auto& t : levels) vars.push_back(ag::constant(t));
  std::vector<ag::Var> out = pyramid_fuse(vars, nodes);
  std::vector<Tensor> tensors;
  tensors.reserve(out.size());
  for (const auto& v : out) tensors.push_back(v.value());
  return tensors;
}

}  // namespace ssd
