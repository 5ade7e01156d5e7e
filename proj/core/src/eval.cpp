#include "ssd/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace ssd {

std::vector<int> match_detections(const std::vector<BBox>& dets, const std::vector<BBox>& gts,
                                  double iou_thr) {
  std::vector<int> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (dets[size_t(a)].conf != dets[size_t(b)].conf)
      return dets[size_t(a)].conf > dets[size_t(b)].conf;
    return a < b;
  });
  std::vector<int> matched(dets.size(), -1);
  std::vector<bool> taken(gts.size(), false);
  for (int d : order) {
    int best = -1;
    double best_iou = 0.0;
    for (int g = 0; g < int(gts.size()); ++g) {
      if (taken[size_t(g)] || gts[size_t(g)].class_id != dets[size_t(d)].class_id) continue;
      const double v = iou(dets[size_t(d)], gts[size_t(g)]);
      if (v < iou_thr) continue;
      if (best < 0 || v > best_iou) {  // IoU ties keep the earlier gt
        best = g;
        best_iou = v;
      }
    }
    if (best >= 0) {
      matched[size_t(d)] = best;
      taken[size_t(best)] = true;
    }
  }
  return matched;
}

std::optional<double> average_precision(const std::vector<bool>& tp_flags,
                                        const std::vector<double>& confs, int n_gt) {
  check(tp_flags.size() == confs.size(), "average_precision: flag/conf size mismatch");
  check(n_gt >= 0, "average_precision: negative ground-truth count");
  if (n_gt == 0) {
    if (tp_flags.empty()) return std::nullopt;
    return 0.0;
  }
  if (tp_flags.empty()) return 0.0;

  std::vector<int> order(tp_flags.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return confs[size_t(a)] > confs[size_t(b)]; });

  const size_t n = order.size();
  std::vector<double> recall(n), precision(n);
  int tp = 0;
  for (size_t k = 0; k < n; ++k) {
    tp += tp_flags[size_t(order[k])] ? 1 : 0;
    recall[k] = double(tp) / n_gt;
    precision[k] = double(tp) / double(k + 1);
  }
  // Monotone-decreasing envelope: best precision at recall >= r.
  std::vector<double> suffix_max(n);
  double running = 0;
  for (size_t k = n; k-- > 0;) {
    running = std::max(running, precision[k]);
    suffix_max[k] = running;
  }
  double total = 0;
  size_t cursor = 0;
  for (int i = 0; i <= 100; ++i) {
    const double r = double(i) / 100.0;
    while (cursor < n && recall[cursor] < r - 1e-12) ++cursor;
    total += cursor < n ? suffix_max[cursor] : 0.0;
  }
  return total / 101.0;
}

namespace {

struct ScoredFlag {
  double conf;
  std::string image;
  int det_index;
  bool tp;
};

// Deterministic global ordering: confidence desc, then image id, then index.
void sort_flags(std::vector<ScoredFlag>& flags) {
  std::sort(flags.begin(), flags.end(), [](const ScoredFlag& a, const ScoredFlag& b) {
    if (a.conf != b.conf) return a.conf > b.conf;
    if (a.image != b.image) return a.image < b.image;
    return a.det_index < b.det_index;
  });
}

}  // namespace

EvalReport map_summary(const BoxesByImage& dets, const BoxesByImage& gts,
                       const std::vector<std::string>& class_names) {
  EvalReport report;
  report.class_names = class_names;
  const int C = int(class_names.size());

  std::set<std::string> images;
  for (const auto& [image, _] : gts) images.insert(image);
  for (const auto& [image, _] : dets) images.insert(image);

  static const double kThresholds[10] = {0.50, 0.55, 0.60, 0.65, 0.70,
                                         0.75, 0.80, 0.85, 0.90, 0.95};

  int total_instances = 0;
  std::vector<double> mean_acc(4, 0.0);  // P, R, ap50, ap50_95
  int reported = 0;

  for (int c = 0; c < C; ++c) {
    // Per-image boxes restricted to this class.
    std::map<std::string, std::vector<BBox>> class_dets, class_gts;
    int instances = 0, image_hits = 0, det_count = 0;
    for (const auto& image : images) {
      std::vector<BBox> d, g;
      if (auto it = dets.find(image); it != dets.end())
        for (const BBox& b : it->second)
          if (b.class_id == c) d.push_back(b);
      if (auto it = gts.find(image); it != gts.end())
        for (const BBox& b : it->second)
          if (b.class_id == c) g.push_back(b);
      instances += int(g.size());
      det_count += int(d.size());
      if (!g.empty()) ++image_hits;
      class_dets[image] = std::move(d);
      class_gts[image] = std::move(g);
    }
    if (instances == 0 && det_count == 0) continue;

    double ap50 = 0.0, ap_sum = 0.0;
    std::vector<ScoredFlag> flags50;
    for (int t = 0; t < 10; ++t) {
      std::vector<ScoredFlag> flags;
      for (const auto& image : images) {
        const auto& d = class_dets[image];
        const std::vector<int> matched = match_detections(d, class_gts[image], kThresholds[t]);
        for (int i = 0; i < int(d.size()); ++i)
          flags.push_back({d[size_t(i)].conf, image, i, matched[size_t(i)] >= 0});
      }
      sort_flags(flags);
      std::vector<bool> tp;
      std::vector<double> conf;
      for (const auto& f : flags) {
        tp.push_back(f.tp);
        conf.push_back(f.conf);
      }
      const auto ap = average_precision(tp, conf, instances);
      const double ap_v = ap.value_or(0.0);
      ap_sum += ap_v;
      if (t == 0) {
        ap50 = ap_v;
        flags50 = std::move(flags);
      }
    }

    // Precision/recall at the F1-maximizing confidence (IoU 0.50 matching).
    double best_f1 = -1, best_p = 0, best_r = 0;
    int tp = 0, fp = 0;
    for (const auto& f : flags50) {
      tp += f.tp ? 1 : 0;
      fp += f.tp ? 0 : 1;
      if (instances == 0) continue;
      const double p = double(tp) / double(tp + fp);
      const double r = double(tp) / double(instances);
      const double f1 = (p + r) > 0 ? 2 * p * r / (p + r) : 0.0;
      if (f1 > best_f1) {
        best_f1 = f1;
        best_p = p;
        best_r = r;
      }
    }

    ClassRow row;
    row.name = class_names[size_t(c)];
    row.class_id = c;
    row.images = image_hits;
    row.instances = instances;
    row.precision = best_f1 < 0 ? 0.0 : best_p;
    row.recall = best_f1 < 0 ? 0.0 : best_r;
    row.ap50 = ap50;
    row.ap50_95 = ap_sum / 10.0;
    report.rows.push_back(row);

    total_instances += instances;
    mean_acc[0] += row.precision;
    mean_acc[1] += row.recall;
    mean_acc[2] += row.ap50;
    mean_acc[3] += row.ap50_95;
    ++reported;
  }

  report.all.name = "all";
  report.all.class_id = -1;
  report.all.images = int(images.size());
  report.all.instances = total_instances;
  if (reported > 0) {
    report.all.precision = mean_acc[0] / reported;
    report.all.recall = mean_acc[1] / reported;
    report.all.ap50 = mean_acc[2] / reported;
    report.all.ap50_95 = mean_acc[3] / reported;
  }
  report.confusion = confusion_matrix(dets, gts, C);
  return report;
}

std::vector<std::vector<int>> confusion_matrix(const BoxesByImage& dets, const BoxesByImage& gts,
                                               int num_classes, double iou_thr,
                                               double conf_thr) {
  std::vector<std::vector<int>> matrix(size_t(num_classes + 1),
                                       std::vector<int>(size_t(num_classes + 1), 0));
  std::set<std::string> images;
  for (const auto& [image, _] : gts) images.insert(image);
  for (const auto& [image, _] : dets) images.insert(image);

  for (const auto& image : images) {
    std::vector<BBox> d;
    if (auto it = dets.find(image); it != dets.end())
      for (const BBox& b : it->second)
        if (b.conf >= conf_thr) d.push_back(b);
    std::vector<BBox> g;
    if (auto it = gts.find(image); it != gts.end()) g = it->second;

    struct Cand {
      double iou;
      int det, gt;
    };
    std::vector<Cand> cands;
    for (int i = 0; i < int(d.size()); ++i)
      for (int j = 0; j < int(g.size()); ++j) {
        const double v = iou(d[size_t(i)], g[size_t(j)]);
        if (v >= iou_thr) cands.push_back({v, i, j});
      }
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.iou != b.iou) return a.iou > b.iou;
      if (a.det != b.det) return a.det < b.det;
      return a.gt < b.gt;
    });
    std::vector<bool> det_used(d.size(), false), gt_used(g.size(), false);
    for (const Cand& c : cands) {
      if (det_used[size_t(c.det)] || gt_used[size_t(c.gt)]) continue;
      det_used[size_t(c.det)] = gt_used[size_t(c.gt)] = true;
      ++matrix[size_t(d[size_t(c.det)].class_id)][size_t(g[size_t(c.gt)].class_id)];
    }
    for (int i = 0; i < int(d.size()); ++i)
      if (!det_used[size_t(i)]) ++matrix[size_t(d[size_t(i)].class_id)][size_t(num_classes)];
    for (int j = 0; j < int(g.size()); ++j)
      if (!gt_used[size_t(j)]) ++matrix[size_t(num_classes)][size_t(g[size_t(j)].class_id)];
  }
  return matrix;
}

// ---------------------------------------------------------------------------
// Report rendering
// ---------------------------------------------------------------------------

namespace {

std::string format_row(const std::string& name, int images, int instances, double p, double r,
                       double ap50, double ap50_95) {
  char line[256];
  std::snprintf(line, sizeof(line), "%22s%11d%11d%11.3g%11.3g%11.3g%11.3g\n", name.c_str(),
                images, instances, p, r, ap50, ap50_95);
  return line;
}

nlohmann::json row_to_json(const ClassRow& row) {
  return {{"class", row.name},       {"class_id", row.class_id},
          {"images", row.images},    {"instances", row.instances},
          {"precision", row.precision}, {"recall", row.recall},
          {"ap50", row.ap50},        {"ap50_95", row.ap50_95}};
}

ClassRow row_from_json(const nlohmann::json& j) {
  ClassRow row;
  row.name = j.at("class").get<std::string>();
  row.class_id = j.at("class_id").get<int>();
  row.images = j.at("images").get<int>();
  row.instances = j.at("instances").get<int>();
  row.precision = j.at("precision").get<double>();
  row.recall = j.at("recall").get<double>();
  row.ap50 = j.at("ap50").get<double>();
  row.ap50_95 = j.at("ap50_95").get<double>();
  return row;
}

}  // namespace

std::string EvalReport::to_text() const {
  std::ostringstream os;
  char header[256];
  std::snprintf(header, sizeof(header), "%22s%11s%11s%11s%11s%11s%11s\n", "Class", "Images",
                "Instances", "Box(P", "R", "mAP50", "mAP50-95)");
  os << header;
  os << format_row(all.name, all.images, all.instances, all.precision, all.recall, all.ap50,
                   all.ap50_95);
  for (const auto& row : rows)
    os << format_row(row.name, row.images, row.instances, row.precision, row.recall, row.ap50,
                     row.ap50_95);
  return os.str();
}

std::string EvalReport::to_csv() const {
  std::ostringstream os;
  os << "class,images,instances,precision,recall,ap50,ap50_95\n";
  auto line = [&os](const ClassRow& row) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%s,%d,%d,%.6f,%.6f,%.6f,%.6f\n", row.name.c_str(),
                  row.images, row.instances, row.precision, row.recall, row.ap50, row.ap50_95);
    os << buf;
  };
  line(all);
  for (const auto& row : rows) line(row);
  return os.str();
}

std::string EvalReport::to_json() const {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& row : rows) classes.push_back(row_to_json(row));
  nlohmann::json j{{"all", row_to_json(all)},
                   {"classes", classes},
                   {"confusion", confusion},
                   {"names", class_names}};
  return j.dump(2);
}

void save_report_json(const EvalReport& report, const std::filesystem::path& path) {
  std::ofstream os(path);
  check(os.good(), "cannot write report ", path.string());
  os << report.to_json() << "\n";
}

EvalReport load_report_json(const std::filesystem::path& path) {
  std::ifstream is(path);
  check(is.good(), "cannot open report ", path.string());
  nlohmann::json j = nlohmann::json::parse(is, nullptr, true, true);
  EvalReport report;
  report.all = row_from_json(j.at("all"));
  for (const auto& row : j.at("classes")) report.rows.push_back(row_from_json(row));
  if (j.contains("confusion"))
    report.confusion = j.at("confusion").get<std::vector<std::vector<int>>>();
  if (j.contains("names"))
    report.class_names = j.at("names").get<std::vector<std::string>>();
  return report;
}

BoxesByImage load_predictions_json(const std::filesystem::path& path, int num_classes) {
  std::ifstream is(path);
  check(is.good(), "cannot open predictions ", path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const std::exception& e) {
    fail("predictions ", path.string(), ": ", e.what());
  }
  check(j.is_array(), "predictions ", path.string(), ": expected a JSON array");
  BoxesByImage out;
  for (const auto& rec : j) {
    BBox b;
    b.class_id = rec.at("class").get<int>();
    check(b.class_id >= 0 && b.class_id < num_classes, "predictions ", path.string(),
          ": class id ", b.class_id, " outside [0, ", num_classes, ")");
    b.cx = rec.at("cx").get<double>();
    b.cy = rec.at("cy").get<double>();
    b.w = rec.at("w").get<double>();
    b.h = rec.at("h").get<double>();
    b.conf = rec.value("conf", 1.0);
    check(b.conf >= 0 && b.conf <= 1, "predictions ", path.string(), ": conf ", b.conf,
          " outside [0,1]");
    out[rec.at("image").get<std::string>()].push_back(b);
  }
  return out;
}

BoxesByImage gather_ground_truth(const DatasetManifest& manifest, std::optional<Split> only) {
  BoxesByImage out;
  for (const auto& entry : manifest.entries) {
    if (only && entry.split != *only) continue;
    out[entry.image] = load_entry_labels(manifest, entry);
  }
  return out;
}

}  // namespace ssd
