#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ssd/boxes.hpp"
#include "ssd/data.hpp"

namespace ssd {

using BoxesByImage = std::map<std::string, std::vector<BBox>>;

/// Matches one image's detections (any classes) against its ground truths at
/// one IoU threshold. Detections are processed in descending confidence
/// (ties toward the lower index); each takes the unmatched ground truth of
/// its own class with the highest IoU >= iou_thr. Returns the matched gt
/// index per detection in the original order, -1 for false positives.
std::vector<int> match_detections(const std::vector<BBox>& dets, const std::vector<BBox>& gts,
                                  double iou_thr);

/// 101-point interpolated average precision from a TP/FP sequence. The
/// arrays are parallel; entries are ordered by descending confidence
/// internally (stable, so pre-sorted callers control tie order). Returns
/// nullopt when n_gt == 0 and there are no detections (undefined, excluded
/// from means); 0 when n_gt == 0 but detections exist.
std::optional<double> average_precision(const std::vector<bool>& tp_flags,
                                        const std::vector<double>& confs, int n_gt);

struct ClassRow {
  std::string name;
  int class_id = -1;  // -1 for the aggregate row
  int images = 0;
  int instances = 0;
  double precision = 0, recall = 0, ap50 = 0, ap50_95 = 0;
};

struct EvalReport {
  std::vector<ClassRow> rows;  // classes with ground truths or detections
  ClassRow all;
  std::vector<std::vector<int>> confusion;  // (C+1)x(C+1), row=pred, col=true
  std::vector<std::string> class_names;

  std::string to_text() const;  // Class/Images/Instances/Box(P R mAP50 mAP50-95)
  std::string to_csv() const;
  std::string to_json() const;
};

/// Full evaluation: AP50 at IoU 0.50, AP50-95 averaged over 0.50:0.05:0.95,
/// per-class precision/recall at the F1-maximizing confidence, aggregate row
/// as the unweighted mean over reported classes, plus the confusion matrix.
EvalReport map_summary(const BoxesByImage& dets, const BoxesByImage& gts,
                       const std::vector<std::string>& class_names);

/// Rows are predicted classes (+background last), columns true classes
/// (+background). Detections below conf_thr are ignored; matching is greedy
/// one-to-one by descending IoU at iou_thr, class-agnostic.
std::vector<std::vector<int>> confusion_matrix(const BoxesByImage& dets, const BoxesByImage& gts,
                                               int num_classes, double iou_thr = 0.45,
                                               double conf_thr = 0.25);

/// Reads a JSON list of {"image","class","cx","cy","w","h","conf"} records.
BoxesByImage load_predictions_json(const std::filesystem::path& path, int num_classes);

/// Collects ground-truth boxes from a manifest's label files, optionally
/// restricted to one split. Keys are the manifest image paths.
BoxesByImage gather_ground_truth(const DatasetManifest& manifest,
                                 std::optional<Split> only = std::nullopt);

/// Serializes an EvalReport back onto disk as JSON (used by `compare`).
void save_report_json(const EvalReport& report, const std::filesystem::path& path);
EvalReport load_report_json(const std::filesystem::path& path);

}  // namespace ssd
