#include "ssd/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <mutex>
#include <sstream>

#include <nlohmann/json.hpp>
#include <yaml-cpp/yaml.h>

#include "ssd/rng.hpp"
#include "ssd/threading.hpp"

namespace ssd {

std::string split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    default: return "none";
  }
}

std::vector<BBox> parse_label_file(std::string_view text, int num_classes) {
  std::vector<BBox> boxes;
  int line_no = 0;
  size_t pos = 0;
  while (pos <= text.size()) {
    const size_t eol = text.find('\n', pos);
    std::string line(text.substr(pos, eol == std::string_view::npos ? eol : eol - pos));
    pos = eol == std::string_view::npos ? text.size() + 1 : eol + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;

    std::istringstream is(line);
    long cls = -1;
    double cx, cy, w, h;
    if (!(is >> cls >> cx >> cy >> w >> h)) {
      fail("label line ", line_no, ": expected 'class cx cy w h', got '", line, "'");
    }
    std::string extra;
    if (is >> extra) fail("label line ", line_no, ": trailing token '", extra, "'");
    if (cls < 0 || cls >= num_classes)
      fail("label line ", line_no, ": class id ", cls, " outside [0, ", num_classes, ")");
    if (!(cx >= 0 && cx <= 1 && cy >= 0 && cy <= 1))
      fail("label line ", line_no, ": center (", cx, ", ", cy, ") outside [0,1]");
    if (!(w > 0 && w <= 1 && h > 0 && h <= 1))
      fail("label line ", line_no, ": size (", w, ", ", h, ") outside (0,1]");
    BBox b;
    b.class_id = int(cls);
    b.cx = cx;
    b.cy = cy;
    b.w = w;
    b.h = h;
    boxes.push_back(b);
  }
  return boxes;
}

std::string serialize_labels(const std::vector<BBox>& boxes) {
  std::ostringstream os;
  os.precision(17);
  for (const BBox& b : boxes)
    os << b.class_id << ' ' << b.cx << ' ' << b.cy << ' ' << b.w << ' ' << b.h << '\n';
  return os.str();
}

std::vector<std::string> load_class_names(const std::filesystem::path& classes_txt) {
  std::ifstream is(classes_txt);
  check(is.good(), "cannot open class list ", classes_txt.string());
  std::vector<std::string> names;
  std::string line;
  while (std::getline(is, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (!line.empty()) names.push_back(line);
  }
  check(!names.empty(), "class list ", classes_txt.string(), " is empty");
  return names;
}

std::string label_path_for(const std::string& image_path) {
  std::string label = image_path;
  const size_t dir = label.rfind("images/");
  if (dir != std::string::npos) label.replace(dir, 7, "labels/");
  const size_t dot = label.rfind('.');
  if (dot != std::string::npos && dot > label.rfind('/') + 1)
    label.erase(dot);
  return label + ".txt";
}

std::vector<BBox> load_entry_labels(const DatasetManifest& manifest, const ManifestEntry& entry) {
  const std::filesystem::path path = manifest.root / entry.label;
  std::ifstream is(path);
  if (!is.good()) return {};  // missing label file means no boxes
  std::stringstream buf;
  buf << is.rdbuf();
  try {
    return parse_label_file(buf.str(), int(manifest.class_names.size()));
  } catch (const Error& e) {
    fail(path.string(), ": ", e.what());
  }
}

std::vector<int64_t> compute_class_counts(DatasetManifest& manifest) {
  std::vector<int64_t> counts(manifest.class_names.size(), 0);
  std::vector<std::vector<int64_t>> per_entry(manifest.entries.size());
  std::mutex error_mutex;
  std::string first_error;
  parallel_for(int64_t(manifest.entries.size()), [&](int64_t i) {
    try {
      std::vector<int64_t> local(manifest.class_names.size(), 0);
      for (const BBox& b : load_entry_labels(manifest, manifest.entries[size_t(i)]))
        ++local[size_t(b.class_id)];
      per_entry[size_t(i)] = std::move(local);
    } catch (const std::exception& e) {
      std::lock_guard<std::mutex> lock(error_mutex);
      if (first_error.empty()) first_error = e.what();
    }
  });
  check(first_error.empty(), first_error);
  for (const auto& local : per_entry)
    for (size_t c = 0; c < counts.size(); ++c) counts[c] += local[c];
  manifest.class_counts = counts;
  return counts;
}

namespace {

/// floor(n*f_i) per split, leftovers to the largest fractional remainders
/// (ties toward the lower split index).
std::array<int, 3> largest_remainder(int n, const std::array<double, 3>& fractions) {
  std::array<int, 3> out{};
  std::array<double, 3> remainder{};
  int assigned = 0;
  for (int i = 0; i < 3; ++i) {
    const double ideal = n * fractions[size_t(i)];
    out[size_t(i)] = int(std::floor(ideal + 1e-9));
    remainder[size_t(i)] = ideal - out[size_t(i)];
    assigned += out[size_t(i)];
  }
  std::array<int, 3> order = {0, 1, 2};
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (remainder[size_t(a)] != remainder[size_t(b)])
      return remainder[size_t(a)] > remainder[size_t(b)];
    return a < b;
  });
  for (int k = 0; k < n - assigned; ++k) ++out[size_t(order[size_t(k % 3)])];
  return out;
}

}  // namespace

std::vector<std::string> split_dataset(DatasetManifest& manifest,
                                       std::array<double, 3> fractions, uint64_t seed) {
  double total = 0;
  for (double f : fractions) {
    check(f >= 0, "split_dataset: negative fraction");
    total += f;
  }
  check(std::fabs(total - 1.0) < 1e-9, "split_dataset: fractions must sum to 1, got ", total);

  // Stratum per entry: majority class, ties toward the lower id; -1 for
  // label-free images.
  std::vector<int> stratum(manifest.entries.size(), -1);
  for (size_t i = 0; i < manifest.entries.size(); ++i) {
    std::vector<int> votes(manifest.class_names.size(), 0);
    for (const BBox& b : load_entry_labels(manifest, manifest.entries[i]))
      ++votes[size_t(b.class_id)];
    int best = -1;
    for (size_t c = 0; c < votes.size(); ++c)
      if (votes[c] > 0 && (best < 0 || votes[c] > votes[size_t(best)])) best = int(c);
    stratum[i] = best;
  }

  std::map<int, std::vector<size_t>> strata;
  for (size_t i = 0; i < stratum.size(); ++i) strata[stratum[i]].push_back(i);

  std::vector<std::string> warnings;
  for (auto& [cls, indices] : strata) {
    Rng rng(derive_seed(seed, uint64_t(cls + 1)));
    // Fisher-Yates over the (already deterministic) index order.
    for (size_t i = indices.size(); i > 1; --i)
      std::swap(indices[i - 1], indices[size_t(rng.uniform_int(0, int(i - 1)))]);

    if (indices.size() < 3) {
      for (size_t idx : indices) manifest.entries[idx].split = Split::train;
      const std::string name =
          cls >= 0 ? manifest.class_names[size_t(cls)] : std::string("(unlabeled)");
      warnings.push_back(detail::cat("stratum '", name, "' has only ", indices.size(),
                                     " entries; all assigned to train"));
      continue;
    }
    const std::array<int, 3> counts = largest_remainder(int(indices.size()), fractions);
    size_t cursor = 0;
    for (int s = 0; s < 3; ++s) {
      const Split tag = s == 0 ? Split::train : (s == 1 ? Split::val : Split::test);
      for (int k = 0; k < counts[size_t(s)]; ++k)
        manifest.entries[indices[cursor++]].split = tag;
    }
  }
  return warnings;
}

// ---------------------------------------------------------------------------
// Consistency verification
// ---------------------------------------------------------------------------

double ConsistencyReport::overall_rate() const {
  int consistent = 0, samples = 0;
  for (const auto& row : per_class) {
    consistent += row.consistent;
    samples += row.sample_size;
  }
  int unmatched_b = 0;
  for (const auto& p : pairs)
    if (p.index_a < 0) ++unmatched_b;
  const int denom = samples + unmatched_b;
  return denom ? double(consistent) / denom : 1.0;
}

std::string ConsistencyReport::to_table() const {
  std::ostringstream os;
  os << "Category            Sample size    Category concordance\n";
  for (const auto& row : per_class) {
    char line[128];
    std::snprintf(line, sizeof(line), "%-22s %9d %23ld%%\n", row.name.c_str(), row.sample_size,
                  std::lround(row.rate() * 100.0));
    os << line;
  }
  return os.str();
}

std::string ConsistencyReport::to_json() const {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& row : per_class)
    classes.push_back({{"category", row.name},
                       {"sample_size", row.sample_size},
                       {"consistent", row.consistent},
                       {"rate", row.rate()}});
  nlohmann::json pair_list = nlohmann::json::array();
  for (const auto& p : pairs)
    pair_list.push_back({{"image", p.image},
                         {"index_a", p.index_a},
                         {"index_b", p.index_b},
                         {"iou", p.matched_iou},
                         {"class_match", p.class_match},
                         {"consistent", p.consistent}});
  nlohmann::json j{{"iou_threshold", iou_threshold},
                   {"overall_rate", overall_rate()},
                   {"classes", classes},
                   {"pairs", pair_list}};
  return j.dump(2);
}

ConsistencyReport verify_consistency(const std::map<std::string, std::vector<BBox>>& labels_a,
                                     const std::map<std::string, std::vector<BBox>>& labels_b,
                                     double iou_threshold,
                                     const std::vector<std::string>& class_names) {
  for (const auto& [image, _] : labels_a)
    check(labels_b.count(image) == 1, "verify_consistency: image '", image,
          "' missing from the second annotation set");
  for (const auto& [image, _] : labels_b)
    check(labels_a.count(image) == 1, "verify_consistency: image '", image,
          "' missing from the first annotation set");

  ConsistencyReport report;
  report.iou_threshold = iou_threshold;
  report.per_class.resize(class_names.size());
  for (size_t c = 0; c < class_names.size(); ++c) report.per_class[c].name = class_names[c];

  for (const auto& [image, boxes_a] : labels_a) {
    const auto& boxes_b = labels_b.at(image);
    for (const BBox& b : boxes_a) ++report.per_class.at(size_t(b.class_id)).sample_size;

    // All overlapping cross pairs, greedy one-to-one by descending IoU.
    struct Cand {
      double iou;
      int a, b;
    };
    std::vector<Cand> cands;
    for (int i = 0; i < int(boxes_a.size()); ++i)
      for (int j = 0; j < int(boxes_b.size()); ++j) {
        const double v = iou(boxes_a[size_t(i)], boxes_b[size_t(j)]);
        if (v > 0) cands.push_back({v, i, j});
      }
    std::sort(cands.begin(), cands.end(), [](const Cand& x, const Cand& y) {
      if (x.iou != y.iou) return x.iou > y.iou;
      if (x.a != y.a) return x.a < y.a;
      return x.b < y.b;
    });
    std::vector<bool> used_a(boxes_a.size(), false), used_b(boxes_b.size(), false);
    for (const Cand& c : cands) {
      if (used_a[size_t(c.a)] || used_b[size_t(c.b)]) continue;
      used_a[size_t(c.a)] = used_b[size_t(c.b)] = true;
      ConsistencyReport::PairVerdict v;
      v.image = image;
      v.index_a = c.a;
      v.index_b = c.b;
      v.matched_iou = c.iou;
      v.class_match = boxes_a[size_t(c.a)].class_id == boxes_b[size_t(c.b)].class_id;
      v.consistent = c.iou > iou_threshold && v.class_match;  // strict inequality
      report.pairs.push_back(v);
      if (v.consistent)
        ++report.per_class.at(size_t(boxes_a[size_t(c.a)].class_id)).consistent;
    }
    for (int i = 0; i < int(boxes_a.size()); ++i)
      if (!used_a[size_t(i)])
        report.pairs.push_back({image, i, -1, 0.0, false, false});
    for (int j = 0; j < int(boxes_b.size()); ++j)
      if (!used_b[size_t(j)])
        report.pairs.push_back({image, -1, j, 0.0, false, false});
  }
  return report;
}

// ---------------------------------------------------------------------------
// Manifest YAML
// ---------------------------------------------------------------------------

namespace {

void append_entries(DatasetManifest& manifest, const YAML::Node& node, Split split) {
  if (!node) return;
  check(node.IsSequence(), "manifest: split lists must be sequences");
  for (const auto& item : node) {
    ManifestEntry entry;
    entry.image = item.as<std::string>();
    entry.label = label_path_for(entry.image);
    entry.split = split;
    manifest.entries.push_back(std::move(entry));
  }
}

}  // namespace

DatasetManifest load_manifest(const std::filesystem::path& path) {
  YAML::Node doc;
  try {
    doc = YAML::LoadFile(path.string());
  } catch (const std::exception& e) {
    fail("cannot load manifest ", path.string(), ": ", e.what());
  }
  DatasetManifest manifest;
  if (doc["root"])
    manifest.root = doc["root"].as<std::string>();
  else
    manifest.root = path.parent_path();
  check(doc["names"] && doc["names"].IsSequence(), "manifest ", path.string(),
        ": missing 'names' list");
  for (const auto& n : doc["names"]) manifest.class_names.push_back(n.as<std::string>());
  if (doc["class_counts"]) {
    for (const auto& c : doc["class_counts"]) manifest.class_counts.push_back(c.as<int64_t>());
    check(manifest.class_counts.size() == manifest.class_names.size(), "manifest ",
          path.string(), ": class_counts length ", manifest.class_counts.size(),
          " != names length ", manifest.class_names.size());
  }
  append_entries(manifest, doc["train"], Split::train);
  append_entries(manifest, doc["val"], Split::val);
  append_entries(manifest, doc["test"], Split::test);
  append_entries(manifest, doc["images"], Split::none);
  return manifest;
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  YAML::Emitter out;
  out << YAML::BeginMap;
  out << YAML::Key << "root" << YAML::Value << manifest.root.string();
  out << YAML::Key << "names" << YAML::Value << YAML::BeginSeq;
  for (const auto& n : manifest.class_names) out << n;
  out << YAML::EndSeq;
  if (!manifest.class_counts.empty()) {
    out << YAML::Key << "class_counts" << YAML::Value << YAML::Flow << YAML::BeginSeq;
    for (int64_t c : manifest.class_counts) out << c;
    out << YAML::EndSeq;
  }
  const std::pair<Split, const char*> groups[] = {
      {Split::train, "train"}, {Split::val, "val"}, {Split::test, "test"}, {Split::none, "images"}};
  for (const auto& [split, key] : groups) {
    std::vector<std::string> files;
    for (const auto& e : manifest.entries)
      if (e.split == split) files.push_back(e.image);
    if (files.empty()) continue;
    out << YAML::Key << key << YAML::Value << YAML::BeginSeq;
    for (const auto& f : files) out << f;
    out << YAML::EndSeq;
  }
  out << YAML::EndMap;
  std::ofstream os(path);
  check(os.good(), "cannot write manifest ", path.string());
  os << out.c_str() << "\n";
}

}  // namespace ssd
