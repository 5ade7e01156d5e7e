#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ssd/autograd.hpp"
#include "ssd/boxes.hpp"

namespace ssd {

struct FocalParams {
  double gamma = 2.0;
  std::vector<double> class_weights;  // alpha_c; empty means all ones
};

/// Inverse-frequency class weights: raw_c = N_total / (C_nonzero * N_c) for
/// counted classes, the max raw weight for zero-count classes, rescaled so
/// the frequency-weighted mean is exactly 1. Rarer classes weigh more.
std::vector<double> calculate_class_weights(const std::vector<int64_t>& class_counts);

/// -alpha_c * (1-p)^gamma * log(p); p is clamped to [1e-7, 1] before the log.
double focal_loss(double p, int class_id, const FocalParams& params);

/// Binary cross-entropy on a post-sigmoid probability; pred is clamped to
/// [1e-7, 1-1e-7].
double objectness_bce(double pred, int target);

struct LossWeights {
  double cls = 0.5, reg = 7.5, obj = 1.0;
};

struct LossBreakdown {
  double cls = 0, reg = 0, obj = 0, total = 0;
  LossWeights weights;
  std::string to_json() const;
};

/// Multi-task loss over one image's predictions.
///   cls: mean over predictions of the summed per-class focal terms. A
///        positive prediction targets its matched gt class (weighted by
///        alpha_c); every other (prediction, class) pair is background and
///        contributes -p^gamma * log(1-p).
///   reg: mean siou_loss over positives (0 when there are none).
///   obj: mean objectness_bce of box.conf against 1 for positives, else 0.
/// total = cls*w.cls + reg*w.reg + obj*w.obj.
LossBreakdown total_loss(const AssignmentResult& assignment,
                         const std::vector<Prediction>& preds, const std::vector<BBox>& gts,
                         const FocalParams& focal, const LossWeights& lambdas);

// ---------------------------------------------------------------------------
// Differentiable (autograd) forms used by the training harness. Shapes are
// elementwise over flat probability tensors; same math as the scalar
// contracts above, including the 1e-7 clamps.
// ---------------------------------------------------------------------------

/// Positive-target focal terms: -alpha[i] * (1-p[i])^gamma * log(p[i]).
ag::Var focal_pos_terms(const ag::Var& p, const Tensor& alpha, double gamma);

/// Background-target focal terms: -p[i]^gamma * log(1-p[i]).
ag::Var focal_neg_terms(const ag::Var& p, double gamma);

/// Elementwise BCE against constant targets in {0,1}.
ag::Var bce_terms(const ag::Var& p, const Tensor& targets);

/// Elementwise SIoU losses for n (pred, gt) pairs; pred columns are
/// differentiable, gt columns are constants. All tensors have shape (n).
ag::Var siou_terms(const ag::Var& pcx, const ag::Var& pcy, const ag::Var& pw,
                   const ag::Var& ph, const Tensor& gcx, const Tensor& gcy,
                   const Tensor& gw, const Tensor& gh);

}  // namespace ssd
