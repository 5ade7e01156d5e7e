#pragma once

#include <vector>

#include "ssd/common.hpp"

namespace ssd {

/// Axis-aligned box in normalized center format.
struct BBox {
  double cx = 0.0, cy = 0.0, w = 0.0, h = 0.0;
  int class_id = 0;
  double conf = 1.0;

  double x1() const { return cx - w / 2.0; }
  double y1() const { return cy - h / 2.0; }
  double x2() const { return cx + w / 2.0; }
  double y2() const { return cy + h / 2.0; }
  double area() const { return w * h; }

  bool operator==(const BBox& o) const {
    return cx == o.cx && cy == o.cy && w == o.w && h == o.h && class_id == o.class_id;
  }
};

enum class IouMode { iou, giou, diou };

/// Overlap ratios in double precision. iou in [0,1]; giou and diou in (-1,1].
/// Symmetric in (a, b). Zero-area boxes are rejected.
double iou(const BBox& a, const BBox& b, IouMode mode = IouMode::iou);

/// Box regression loss: 1 - IoU + (distance + shape)/2, where the distance
/// term is scaled by the angle cost (coincident centers define the angle
/// term as 0). Zero exactly when pred == gt.
double siou_loss(const BBox& pred, const BBox& gt);

struct AlignmentParams {
  double gamma = 0.5;    // eq3: t = p^gamma * iou^(1-gamma)
  double alpha_ta = 1.0; // eq5: t = p^alpha * iou^beta
  double beta_ta = 6.0;
  int topk = 10;
};

enum class MetricForm { eq3, eq5 };

/// Task-alignment score of one (classification confidence, IoU) pair.
double alignment_metric(double p, double iou_val, const AlignmentParams& params,
                        MetricForm form = MetricForm::eq5);

struct Prediction {
  BBox box;
  std::vector<double> class_scores;  // per class, in [0,1]
};

struct AssignmentResult {
  struct Entry {
    bool positive = false;
    int matched_gt = -1;  // set when positive
    double score = 0.0;   // alignment score t for the matched gt
  };
  std::vector<Entry> preds;

  int positive_count() const {
    int n = 0;
    for (const auto& e : preds) n += e.positive ? 1 : 0;
    return n;
  }
};

/// Task-aligned positive selection. Candidates for a ground truth are the
/// predictions whose box center lies inside it (center prior, inclusive
/// edges); the top-k by t become positive. A prediction claimed by several
/// ground truths goes to the one with larger t; exact ties break toward the
/// lower index (predictions and ground truths alike).
AssignmentResult assign(const std::vector<Prediction>& preds, const std::vector<BBox>& gts,
                        const AlignmentParams& params, MetricForm form = MetricForm::eq5);

/// Greedy class-wise suppression. Returns kept indices in descending
/// confidence order; boxes below conf_thr are dropped first.
std::vector<int> non_max_suppression(const std::vector<BBox>& dets, double iou_thr,
                                     double conf_thr);

}  // namespace ssd
