// Independent reference implementations used as test oracles. These must not
// call the library code paths they verify; geometry and statistics are
// recomputed from first principles in double precision.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "ssd/boxes.hpp"

namespace oracle {

// ---------------------------------------------------------------------------
// Convolution: direct quadruple loop, double accumulation.
// ---------------------------------------------------------------------------

inline std::vector<double> conv2d_reference(const std::vector<double>& in, int N, int I, int H,
                                            int W, const std::vector<double>& k, int O, int KH,
                                            int KW, const std::vector<double>& bias, int stride,
                                            int pad, int& HO, int& WO) {
  HO = (H + 2 * pad - KH) / stride + 1;
  WO = (W + 2 * pad - KW) / stride + 1;
  std::vector<double> out(size_t(N) * O * HO * WO, 0.0);
  auto in_at = [&](int n, int i, int y, int x) {
    return in[size_t(((n * I + i) * H + y) * W + x)];
  };
  auto k_at = [&](int o, int i, int y, int x) {
    return k[size_t(((o * I + i) * KH + y) * KW + x)];
  };
  for (int n = 0; n < N; ++n)
    for (int o = 0; o < O; ++o)
      for (int y = 0; y < HO; ++y)
        for (int x = 0; x < WO; ++x) {
          double acc = bias.empty() ? 0.0 : bias[size_t(o)];
          for (int i = 0; i < I; ++i)
            for (int ky = 0; ky < KH; ++ky)
              for (int kx = 0; kx < KW; ++kx) {
                const int iy = y * stride + ky - pad;
                const int ix = x * stride + kx - pad;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                acc += in_at(n, i, iy, ix) * k_at(o, i, ky, kx);
              }
          out[size_t(((n * O + o) * HO + y) * WO + x)] = acc;
        }
  return out;
}

// ---------------------------------------------------------------------------
// Box geometry (own corner arithmetic).
// ---------------------------------------------------------------------------

struct Rect {
  double x1, y1, x2, y2;
};

inline Rect to_rect(const ssd::BBox& b) {
  return {b.cx - b.w / 2, b.cy - b.h / 2, b.cx + b.w / 2, b.cy + b.h / 2};
}

inline double rect_iou(const ssd::BBox& a, const ssd::BBox& b) {
  const Rect ra = to_rect(a), rb = to_rect(b);
  const double iw = std::min(ra.x2, rb.x2) - std::max(ra.x1, rb.x1);
  const double ih = std::min(ra.y2, rb.y2) - std::max(ra.y1, rb.y1);
  const double inter = (iw > 0 && ih > 0) ? iw * ih : 0.0;
  const double uni = a.w * a.h + b.w * b.h - inter;
  return inter / uni;
}

// SIoU by the literal published formulas (arcsin form), double precision.
inline double siou_reference(const ssd::BBox& pred, const ssd::BBox& gt) {
  const double iou_v = rect_iou(pred, gt);
  const double dx = gt.cx - pred.cx;
  const double dy = gt.cy - pred.cy;
  const double sigma = std::sqrt(dx * dx + dy * dy);
  double lambda = 0.0;
  if (sigma > 0) {
    const double c_h = std::fabs(dy);
    const double x = std::min(1.0, c_h / sigma);
    const double s = std::sin(std::asin(x) - M_PI / 4.0);
    lambda = 1.0 - 2.0 * s * s;
  }
  const Rect rp = to_rect(pred), rg = to_rect(gt);
  const double cw = std::max(rp.x2, rg.x2) - std::min(rp.x1, rg.x1);
  const double ch = std::max(rp.y2, rg.y2) - std::min(rp.y1, rg.y1);
  const double rho_x = (dx / cw) * (dx / cw);
  const double rho_y = (dy / ch) * (dy / ch);
  const double delta = (1.0 - std::exp(-(2.0 - lambda) * rho_x)) +
                       (1.0 - std::exp(-(2.0 - lambda) * rho_y));
  const double omega_w = std::fabs(pred.w - gt.w) / std::max(pred.w, gt.w);
  const double omega_h = std::fabs(pred.h - gt.h) / std::max(pred.h, gt.h);
  const double shape = std::pow(1.0 - std::exp(-omega_w), 4.0) +
                       std::pow(1.0 - std::exp(-omega_h), 4.0);
  return 1.0 - iou_v + (delta + shape) / 2.0;
}

// ---------------------------------------------------------------------------
// Task-aligned assignment by exhaustive selection loops.
// ---------------------------------------------------------------------------

struct AssignEntry {
  bool positive = false;
  int matched_gt = -1;
  double score = 0.0;
};

inline std::vector<AssignEntry> assign_reference(const std::vector<ssd::Prediction>& preds,
                                                 const std::vector<ssd::BBox>& gts,
                                                 const ssd::AlignmentParams& params,
                                                 ssd::MetricForm form) {
  const int P = int(preds.size());
  const int G = int(gts.size());
  std::vector<AssignEntry> out(size_t(P));
  if (P == 0 || G == 0) return out;

  auto metric = [&](double p, double a) {
    if (form == ssd::MetricForm::eq3)
      return std::pow(p, params.gamma) * std::pow(a, 1.0 - params.gamma);
    return std::pow(p, params.alpha_ta) * std::pow(a, params.beta_ta);
  };

  // claims[p]: list of (gt, t) from per-gt top-k selection.
  std::vector<std::vector<std::pair<int, double>>> claims(size_t(P));
  for (int g = 0; g < G; ++g) {
    std::vector<int> cand;
    std::vector<double> t(size_t(P), 0.0);
    for (int p = 0; p < P; ++p) {
      const ssd::BBox& box = preds[size_t(p)].box;
      const ssd::BBox& gt = gts[size_t(g)];
      if (std::fabs(box.cx - gt.cx) > gt.w / 2 || std::fabs(box.cy - gt.cy) > gt.h / 2)
        continue;
      t[size_t(p)] = metric(preds[size_t(p)].class_scores[size_t(gt.class_id)],
                            rect_iou(box, gt));
      cand.push_back(p);
    }
    // Selection sort for the top-k (t desc, index asc).
    std::vector<bool> used(cand.size(), false);
    const int take = std::min<int>(params.topk, int(cand.size()));
    for (int k = 0; k < take; ++k) {
      int best = -1;
      for (int i = 0; i < int(cand.size()); ++i) {
        if (used[size_t(i)]) continue;
        if (best < 0 || t[size_t(cand[size_t(i)])] > t[size_t(cand[size_t(best)])]) best = i;
      }
      used[size_t(best)] = true;
      claims[size_t(cand[size_t(best)])].emplace_back(g, t[size_t(cand[size_t(best)])]);
    }
  }
  for (int p = 0; p < P; ++p) {
    int best_g = -1;
    double best_t = 0;
    for (const auto& [g, t] : claims[size_t(p)]) {
      if (best_g < 0 || t > best_t) {
        best_g = g;
        best_t = t;
      }
    }
    if (best_g >= 0) out[size_t(p)] = {true, best_g, best_t};
  }
  return out;
}

// ---------------------------------------------------------------------------
// Average precision by exhaustive threshold scan. Confidences must be
// distinct within a class for the scan to be well defined.
// ---------------------------------------------------------------------------

struct OracleDet {
  std::string image;
  ssd::BBox box;
};

inline int matched_count(const std::vector<OracleDet>& dets,
                         const std::map<std::string, std::vector<ssd::BBox>>& gts,
                         double iou_thr) {
  // Greedy per image in descending confidence order (the det list is given
  // already sorted by conf desc, image, index).
  std::map<std::string, std::vector<bool>> taken;
  for (const auto& [image, boxes] : gts) taken[image].assign(boxes.size(), false);
  int tp = 0;
  for (const auto& det : dets) {
    auto it = gts.find(det.image);
    if (it == gts.end()) continue;
    const auto& boxes = it->second;
    int best = -1;
    double best_iou = 0;
    for (int g = 0; g < int(boxes.size()); ++g) {
      if (taken[det.image][size_t(g)]) continue;
      const double v = rect_iou(det.box, boxes[size_t(g)]);
      if (v < iou_thr) continue;
      if (best < 0 || v > best_iou) {
        best = g;
        best_iou = v;
      }
    }
    if (best >= 0) {
      taken[det.image][size_t(best)] = true;
      ++tp;
    }
  }
  return tp;
}

/// AP for a single class at one IoU threshold. dets: all detections of that
/// class (any images); gts: per-image same-class boxes.
inline double ap_reference(std::vector<OracleDet> dets,
                           const std::map<std::string, std::vector<ssd::BBox>>& gts,
                           double iou_thr) {
  int n_gt = 0;
  for (const auto& [_, boxes] : gts) n_gt += int(boxes.size());
  if (n_gt == 0) return 0.0;

  std::sort(dets.begin(), dets.end(), [](const OracleDet& a, const OracleDet& b) {
    if (a.box.conf != b.box.conf) return a.box.conf > b.box.conf;
    return a.image < b.image;
  });

  // One PR point per prefix (== per distinct confidence threshold).
  std::vector<std::pair<double, double>> points;  // (recall, precision)
  for (size_t k = 1; k <= dets.size(); ++k) {
    const std::vector<OracleDet> subset(dets.begin(), dets.begin() + long(k));
    const int tp = matched_count(subset, gts, iou_thr);
    points.emplace_back(double(tp) / n_gt, double(tp) / double(k));
  }
  double total = 0;
  for (int i = 0; i <= 100; ++i) {
    const double r = double(i) / 100.0;
    double best = 0;
    for (const auto& [rec, prec] : points)
      if (rec >= r - 1e-12) best = std::max(best, prec);
    total += best;
  }
  return total / 101.0;
}

// ---------------------------------------------------------------------------
// Class weights by direct arithmetic.
// ---------------------------------------------------------------------------

inline std::vector<double> class_weights_reference(const std::vector<int64_t>& counts) {
  double total = 0;
  int nonzero = 0;
  for (int64_t c : counts) {
    total += double(c);
    if (c > 0) ++nonzero;
  }
  std::vector<double> w(counts.size(), 0.0);
  double max_raw = 0;
  for (size_t i = 0; i < counts.size(); ++i)
    if (counts[i] > 0) {
      w[i] = total / (nonzero * double(counts[i]));
      max_raw = std::max(max_raw, w[i]);
    }
  for (size_t i = 0; i < counts.size(); ++i)
    if (counts[i] == 0) w[i] = max_raw;
  double mean = 0;
  for (size_t i = 0; i < counts.size(); ++i) mean += double(counts[i]) / total * w[i];
  for (auto& v : w) v /= mean;
  return w;
}

// ---------------------------------------------------------------------------
// Rectangle clipping (mosaic oracle).
// ---------------------------------------------------------------------------

/// Clips a pixel-space box to a visible window; returns false when dropped
/// (empty or below the 10% area threshold).
inline bool clip_box_reference(double cx, double cy, double w, double h, double vx0, double vy0,
                               double vx1, double vy1, double out[4]) {
  const double x1 = std::max(cx - w / 2, vx0);
  const double y1 = std::max(cy - h / 2, vy0);
  const double x2 = std::min(cx + w / 2, vx1);
  const double y2 = std::min(cy + h / 2, vy1);
  if (x2 <= x1 || y2 <= y1) return false;
  if ((x2 - x1) * (y2 - y1) < 0.1 * (w * h)) return false;
  out[0] = (x1 + x2) / 2;
  out[1] = (y1 + y2) / 2;
  out[2] = x2 - x1;
  out[3] = y2 - y1;
  return true;
}

}  // namespace oracle
