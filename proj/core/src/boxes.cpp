#include "ssd/boxes.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace ssd {

namespace {

void validate_box(const BBox& b, const char* who) {
  check(b.w > 0 && b.h > 0, who, ": zero-area box (w=", b.w, ", h=", b.h, ")");
  check(std::isfinite(b.cx) && std::isfinite(b.cy) && std::isfinite(b.w) && std::isfinite(b.h),
        who, ": non-finite box");
}

double intersection(const BBox& a, const BBox& b) {
  const double iw = std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1());
  const double ih = std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1());
  if (iw <= 0 || ih <= 0) return 0.0;
  return iw * ih;
}

}  // namespace

double iou(const BBox& a, const BBox& b, IouMode mode) {
  validate_box(a, "iou");
  validate_box(b, "iou");
  const double inter = intersection(a, b);
  const double uni = a.area() + b.area() - inter;
  const double base = inter / uni;
  if (mode == IouMode::iou) return base;

  const double ex1 = std::min(a.x1(), b.x1()), ex2 = std::max(a.x2(), b.x2());
  const double ey1 = std::min(a.y1(), b.y1()), ey2 = std::max(a.y2(), b.y2());
  if (mode == IouMode::giou) {
    const double enclose = (ex2 - ex1) * (ey2 - ey1);
    return base - (enclose - uni) / enclose;
  }
  // diou
  const double d2 = (a.cx - b.cx) * (a.cx - b.cx) + (a.cy - b.cy) * (a.cy - b.cy);
  const double c2 = (ex2 - ex1) * (ex2 - ex1) + (ey2 - ey1) * (ey2 - ey1);
  return base - d2 / c2;
}

double siou_loss(const BBox& pred, const BBox& gt) {
  validate_box(pred, "siou_loss");
  validate_box(gt, "siou_loss");

  const double iou_v = iou(pred, gt);

  const double dx = gt.cx - pred.cx;
  const double dy = gt.cy - pred.cy;
  const double sigma2 = dx * dx + dy * dy;
  // Closed form of 1 - 2*sin^2(arcsin(|dy|/sigma) - pi/4); 0 at sigma = 0.
  const double angle = sigma2 > 0 ? 2.0 * std::fabs(dx) * std::fabs(dy) / sigma2 : 0.0;

  const double cw = std::max(pred.x2(), gt.x2()) - std::min(pred.x1(), gt.x1());
  const double ch = std::max(pred.y2(), gt.y2()) - std::min(pred.y1(), gt.y1());
  const double rho_x = (dx / cw) * (dx / cw);
  const double rho_y = (dy / ch) * (dy / ch);
  const double dist = (1.0 - std::exp(-(2.0 - angle) * rho_x)) +
                      (1.0 - std::exp(-(2.0 - angle) * rho_y));

  const double omega_w = std::fabs(pred.w - gt.w) / std::max(pred.w, gt.w);
  const double omega_h = std::fabs(pred.h - gt.h) / std::max(pred.h, gt.h);
  const double shape = std::pow(1.0 - std::exp(-omega_w), 4.0) +
                       std::pow(1.0 - std::exp(-omega_h), 4.0);

  return 1.0 - iou_v + (dist + shape) / 2.0;
}

double alignment_metric(double p, double iou_val, const AlignmentParams& params,
                        MetricForm form) {
  check(p >= 0 && p <= 1, "alignment_metric: p must lie in [0,1], got ", p);
  check(iou_val >= 0 && iou_val <= 1, "alignment_metric: iou must lie in [0,1], got ", iou_val);
  if (form == MetricForm::eq3) {
    check(params.gamma >= 0 && params.gamma <= 1, "alignment_metric: gamma must lie in [0,1]");
    return std::pow(p, params.gamma) * std::pow(iou_val, 1.0 - params.gamma);
  }
  check(params.alpha_ta >= 0 && params.beta_ta >= 0,
        "alignment_metric: eq5 exponents must be non-negative");
  return std::pow(p, params.alpha_ta) * std::pow(iou_val, params.beta_ta);
}

AssignmentResult assign(const std::vector<Prediction>& preds, const std::vector<BBox>& gts,
                        const AlignmentParams& params, MetricForm form) {
  check(params.topk >= 1, "assign: topk must be >= 1, got ", params.topk);
  AssignmentResult result;
  result.preds.resize(preds.size());
  if (preds.empty() || gts.empty()) return result;

  for (const auto& pr : preds)
    for (double s : pr.class_scores)
      check(s >= 0 && s <= 1, "assign: class score ", s, " outside [0,1]");

  const int P = int(preds.size());
  const int G = int(gts.size());

  // claims[p] = (gt, t) of the best claim so far.
  std::vector<std::pair<int, double>> claims(size_t(P), {-1, 0.0});

  for (int g = 0; g < G; ++g) {
    const BBox& gt = gts[size_t(g)];
    validate_box(gt, "assign");
    std::vector<std::pair<double, int>> candidates;  // (t, pred index)
    for (int p = 0; p < P; ++p) {
      const BBox& box = preds[size_t(p)].box;
      const bool inside = std::fabs(box.cx - gt.cx) <= gt.w / 2.0 &&
                          std::fabs(box.cy - gt.cy) <= gt.h / 2.0;
      if (!inside) continue;
      check(size_t(gt.class_id) < preds[size_t(p)].class_scores.size(),
            "assign: prediction has no score for class ", gt.class_id);
      const double score = preds[size_t(p)].class_scores[size_t(gt.class_id)];
      const double overlap = iou(box, gt);
      candidates.emplace_back(alignment_metric(score, overlap, params, form), p);
    }
    std::sort(candidates.begin(), candidates.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    const int take = std::min<int>(params.topk, int(candidates.size()));
    for (int i = 0; i < take; ++i) {
      const auto [t, p] = candidates[size_t(i)];
      auto& claim = claims[size_t(p)];
      if (claim.first < 0 || t > claim.second) claim = {g, t};
      // exact tie keeps the earlier (lower-index) gt
    }
  }

  for (int p = 0; p < P; ++p) {
    if (claims[size_t(p)].first >= 0) {
      result.preds[size_t(p)].positive = true;
      result.preds[size_t(p)].matched_gt = claims[size_t(p)].first;
      result.preds[size_t(p)].score = claims[size_t(p)].second;
    }
  }
  return result;
}

std::vector<int> non_max_suppression(const std::vector<BBox>& dets, double iou_thr,
                                     double conf_thr) {
  std::vector<int> order;
  for (int i = 0; i < int(dets.size()); ++i)
    if (dets[size_t(i)].conf >= conf_thr) order.push_back(i);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (dets[size_t(a)].conf != dets[size_t(b)].conf)
      return dets[size_t(a)].conf > dets[size_t(b)].conf;
    return a < b;
  });
  std::vector<int> kept;
  for (int idx : order) {
    bool suppressed = false;
    for (int k : kept) {
      if (dets[size_t(k)].class_id != dets[size_t(idx)].class_id) continue;
      if (iou(dets[size_t(k)], dets[size_t(idx)]) > iou_thr) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(idx);
  }
  return kept;
}

}  // namespace ssd
