#include "ssd/verify.hpp"

#include <algorithm>

#include "ssd/autograd.hpp"
#include "ssd/blocks.hpp"
#include "ssd/fusion.hpp"
#include "ssd/losses.hpp"
#include "ssd/rng.hpp"

namespace ssd {

namespace {

using CheckFn = std::function<double(Rng&, double)>;  // returns max rel err at one point

GradCheckRow run_rows(const std::string& name, const CheckFn& fn, Rng& rng, double eps,
                      int points, double tolerance) {
  GradCheckRow row;
  row.op = name;
  for (int i = 0; i < points; ++i) row.max_rel_err = std::max(row.max_rel_err, fn(rng, eps));
  row.pass = row.max_rel_err <= tolerance;
  return row;
}

}  // namespace

std::vector<GradCheckRow> run_gradient_suite(double eps, uint64_t seed, int points,
                                             double tolerance) {
  Rng rng(seed);
  std::vector<GradCheckRow> rows;

  auto conv_input = [](Rng& r, double e) {
    Tensor k = Tensor::randn({4, 3, 3, 3}, r, 0.4f);
    Tensor b = Tensor::randn({4}, r, 0.2f);
    Tensor x = Tensor::randn({1, 3, 5, 5}, r, 1.0f);
    auto f = [&](const ag::Var& v) {
      return ag::mean(ag::conv2d(v, ag::constant(k), ag::constant(b), 1, 1));
    };
    return ag::grad_check(f, x, e);
  };
  auto conv_kernel = [](Rng& r, double e) {
    Tensor x = Tensor::randn({1, 3, 5, 5}, r, 1.0f);
    Tensor k = Tensor::randn({4, 3, 3, 3}, r, 0.4f);
    auto f = [&](const ag::Var& v) {
      return ag::mean(ag::conv2d(ag::constant(x), v, ag::Var(), 1, 1));
    };
    return ag::grad_check(f, k, e);
  };
  auto se_input = [](Rng& r, double e) {
    SeAttention block = SeAttention::create(8, 4, r);
    Tensor x = Tensor::randn({1, 8, 4, 4}, r, 1.0f);
    auto f = [&](const ag::Var& v) { return ag::mean(block.forward(v)); };
    return ag::grad_check(f, x, e);
  };
  auto cbam_input = [](Rng& r, double e) {
    CbamSpatial block = CbamSpatial::create(7, r);
    Tensor x = Tensor::randn({1, 4, 6, 6}, r, 1.0f);
    auto f = [&](const ag::Var& v) { return ag::mean(block.forward(v)); };
    return ag::grad_check(f, x, e);
  };
  auto c2psa_input = [](Rng& r, double e) {
    C2psa block = C2psa::create(8, r, 4, 5);
    Tensor x = Tensor::randn({1, 8, 6, 6}, r, 1.0f);
    auto f = [&](const ag::Var& v) { return ag::mean(block.forward(v)); };
    return ag::grad_check(f, x, e);
  };

  auto fusion_check = [](Rng& r, double e, int which) {
    Tensor pi = Tensor::randn({1, 4, 4, 4}, r, 1.0f);
    Tensor pj = Tensor::randn({1, 4, 2, 2}, r, 1.0f);
    Tensor a = Tensor::randn({1}, r, 0.8f);
    Tensor b = Tensor::randn({1}, r, 0.8f);
    auto build = [&](const ag::Var& vi, const ag::Var& vj, const ag::Var& va,
                     const ag::Var& vb) {
      FusionNode node;
      node.channels = 4;
      node.alpha = va;
      node.beta = vb;
      return ag::mean(fuse(node, vi, vj));
    };
    auto f = [&](const ag::Var& v) {
      switch (which) {
        case 0: return build(v, ag::constant(pj), ag::constant(a), ag::constant(b));
        case 1: return build(ag::constant(pi), v, ag::constant(a), ag::constant(b));
        case 2: return build(ag::constant(pi), ag::constant(pj), v, ag::constant(b));
        default: return build(ag::constant(pi), ag::constant(pj), ag::constant(a), v);
      }
    };
    const Tensor* probe = which == 0 ? &pi : which == 1 ? &pj : which == 2 ? &a : &b;
    return ag::grad_check(f, *probe, e);
  };

  auto focal_check = [](Rng& r, double e) {
    Tensor p = Tensor::uniform({12}, r, 0.1f, 0.9f);
    Tensor alpha = Tensor::uniform({12}, r, 0.5f, 2.0f);
    auto f = [&](const ag::Var& v) { return ag::mean(focal_pos_terms(v, alpha, 2.0)); };
    return ag::grad_check(f, p, e);
  };
  auto bce_check = [](Rng& r, double e) {
    Tensor p = Tensor::uniform({12}, r, 0.1f, 0.9f);
    Tensor t({12});
    for (int i = 0; i < 12; ++i) t[i] = r.uniform() < 0.5 ? 0.0f : 1.0f;
    auto f = [&](const ag::Var& v) { return ag::mean(bce_terms(v, t)); };
    return ag::grad_check(f, p, e);
  };
  auto siou_check = [](Rng& r, double e) {
    // Boxes are kept away from the loss's non-smooth points (|dx|=0, equal
    // sizes, touching corners) by more than the FD step.
    const int n = 4;
    Tensor pred({4 * n});
    Tensor gcx({n}), gcy({n}), gw({n}), gh({n});
    for (int i = 0; i < n; ++i) {
      const double sign_x = r.uniform() < 0.5 ? -1.0 : 1.0;
      const double sign_y = r.uniform() < 0.5 ? -1.0 : 1.0;
      const double sign_w = r.uniform() < 0.5 ? -1.0 : 1.0;
      const double sign_h = r.uniform() < 0.5 ? -1.0 : 1.0;
      pred[i] = float(r.uniform(0.4, 0.6));
      pred[n + i] = float(r.uniform(0.4, 0.6));
      pred[2 * n + i] = float(r.uniform(0.2, 0.3));
      pred[3 * n + i] = float(r.uniform(0.2, 0.3));
      gcx[i] = float(pred[i] + sign_x * r.uniform(0.05, 0.12));
      gcy[i] = float(pred[n + i] + sign_y * r.uniform(0.05, 0.12));
      gw[i] = float(pred[2 * n + i] + sign_w * r.uniform(0.05, 0.1));
      gh[i] = float(pred[3 * n + i] + sign_h * r.uniform(0.05, 0.1));
    }
    std::vector<int64_t> c0(n), c1(n), c2(n), c3(n);
    for (int i = 0; i < n; ++i) {
      c0[size_t(i)] = i;
      c1[size_t(i)] = n + i;
      c2[size_t(i)] = 2 * n + i;
      c3[size_t(i)] = 3 * n + i;
    }
    auto f = [&](const ag::Var& v) {
      return ag::mean(siou_terms(ag::gather(v, c0), ag::gather(v, c1), ag::gather(v, c2),
                                 ag::gather(v, c3), gcx, gcy, gw, gh));
    };
    return ag::grad_check(f, pred, e);
  };

  rows.push_back(run_rows("conv2d(input)", conv_input, rng, eps, points, tolerance));
  rows.push_back(run_rows("conv2d(kernel)", conv_kernel, rng, eps, points, tolerance));
  rows.push_back(run_rows("se_channel_attention", se_input, rng, eps, points, tolerance));
  rows.push_back(run_rows("cbam_spatial_attention", cbam_input, rng, eps, points, tolerance));
  rows.push_back(run_rows("c2psa", c2psa_input, rng, eps, points, tolerance));
  rows.push_back(run_rows(
      "fusion(p_i)", [&](Rng& r, double e) { return fusion_check(r, e, 0); }, rng, eps, points,
      tolerance));
  rows.push_back(run_rows(
      "fusion(p_j)", [&](Rng& r, double e) { return fusion_check(r, e, 1); }, rng, eps, points,
      tolerance));
  rows.push_back(run_rows(
      "fusion(alpha)", [&](Rng& r, double e) { return fusion_check(r, e, 2); }, rng, eps,
      points, tolerance));
  rows.push_back(run_rows(
      "fusion(beta)", [&](Rng& r, double e) { return fusion_check(r, e, 3); }, rng, eps,
      points, tolerance));
  rows.push_back(run_rows("focal_loss", focal_check, rng, eps, points, tolerance));
  rows.push_back(run_rows("objectness_bce", bce_check, rng, eps, points, tolerance));
  rows.push_back(run_rows("siou_loss", siou_check, rng, eps, points, tolerance));
  return rows;
}

}  // namespace ssd
