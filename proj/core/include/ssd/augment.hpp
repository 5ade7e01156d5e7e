#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <utility>
#include <vector>

#include "ssd/image.hpp"

namespace ssd {

struct AugSchedule {
  double p_mosaic0 = 1.0;
  double p_mixup0 = 0.15;
  double decay_start_frac = 0.8;  // plateau until this fraction of training
  int mosaic_grid = 4;            // 4 or 9
  std::map<int, double> class_boost;
};

/// Aspect-preserving resize to a square canvas with centered gray padding
/// (114,114,114) and bilinear interpolation; annotations are remapped.
Image letterbox(const Image& img, int target, uint8_t pad_value = 114);

/// Rectangular variant used by mosaic cells.
Image letterbox_rect(const Image& img, int target_w, int target_h, uint8_t pad_value = 114);

/// Remaps a box from letterboxed canvas coordinates back to the original
/// image's normalized frame.
BBox unletterbox_box(const BBox& box, int orig_w, int orig_h, int target);

/// Stitches 4 images (2x2, jittered center in the middle 50% of the canvas,
/// tiles cropped at the canvas border) or 9 images (equal 3x3 cells, each
/// letterboxed) onto one target-size canvas. Boxes are transformed, clipped
/// to their visible cell, and dropped when the clipped area falls below 10%
/// of the pre-clip area.
Image mosaic(const std::vector<Image>& imgs, uint64_t seed, int target = 640);

/// The jittered 2x2 center the 4-grid mosaic uses for a given seed; each
/// coordinate is uniform over [target/4, 3*target/4].
std::pair<int, int> mosaic4_center(uint64_t seed, int target);

/// Pixelwise blend lambda*a + (1-lambda)*b (round half up); annotations are
/// the union of both sets.
Image mixup(const Image& a, const Image& b, double lambda);

/// Epoch-scheduled (p_mosaic, p_mixup): constant until decay_start_frac*E,
/// then linear to zero at epoch E.
std::pair<double, double> adjust_augmentation(int epoch, int total_epochs,
                                              const AugSchedule& sched);

/// Per-class mosaic sampling weights: inverse-frequency class weights times
/// the boost for boosted classes, renormalized to sum 1. Images are drawn by
/// the max weight among their annotations' classes.
std::vector<double> adjust_mosaic_weights(const std::vector<int64_t>& class_counts,
                                          const std::set<int>& boosted_classes, double boost);

struct JitterGains {
  double h = 0.015, s = 0.7, v = 0.4;  // fractional ranges
};

/// Multiplicative HSV jitter with gains drawn from the seeded stream;
/// annotations unchanged. All-zero gain ranges return the image untouched.
Image color_jitter(const Image& img, uint64_t seed, const JitterGains& gains = {});

}  // namespace ssd
