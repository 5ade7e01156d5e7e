#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "ssd/boxes.hpp"

namespace ssd {

enum class Split { none, train, val, test };

std::string split_name(Split s);

struct ManifestEntry {
  std::string image;  // relative to manifest root
  std::string label;
  Split split = Split::none;
};

struct DatasetManifest {
  std::filesystem::path root;
  std::vector<std::string> class_names;
  std::vector<ManifestEntry> entries;
  std::vector<int64_t> class_counts;  // per class, classes.txt order
};

/// Parses YOLO label lines: "class cx cy w h", whitespace separated,
/// normalized floats. Malformed lines and out-of-range values report the
/// 1-based line number.
std::vector<BBox> parse_label_file(std::string_view text, int num_classes);

/// Full round trip with parse_label_file: parse(serialize(b)) == b exactly.
std::string serialize_labels(const std::vector<BBox>& boxes);

/// One class name per line.
std::vector<std::string> load_class_names(const std::filesystem::path& classes_txt);

/// Recounts instances per class across all label files and writes the result
/// back into the manifest. Unknown class ids name the offending file.
std::vector<int64_t> compute_class_counts(DatasetManifest& manifest);

/// Stratified 3-way split: stratum = majority class of an image's boxes
/// (ties toward the lower class id, label-free images form their own
/// stratum); per-stratum largest-remainder apportionment over shuffled
/// entries; deterministic under seed. Strata smaller than 3 entries go
/// entirely to train with a warning.
std::vector<std::string> split_dataset(DatasetManifest& manifest,
                                       std::array<double, 3> fractions, uint64_t seed);

struct ConsistencyReport {
  struct PairVerdict {
    std::string image;
    int index_a = -1, index_b = -1;  // -1 marks an unmatched box
    double matched_iou = 0.0;
    bool class_match = false;
    bool consistent = false;
  };
  struct ClassRow {
    std::string name;
    int sample_size = 0;  // boxes from annotator A of this class
    int consistent = 0;
    double rate() const { return sample_size ? double(consistent) / sample_size : 0.0; }
  };

  std::vector<ClassRow> per_class;
  std::vector<PairVerdict> pairs;
  double iou_threshold = 0.85;

  double overall_rate() const;
  std::string to_table() const;  // Category / Sample size / Category concordance
  std::string to_json() const;
};

/// Compares two annotation passes over the same image set. Boxes are greedily
/// matched per image by descending IoU (class-agnostic); a pair is consistent
/// iff IoU > iou_threshold (strict) and the classes agree. Unmatched boxes
/// count against their class. Per-class rows follow annotator A.
ConsistencyReport verify_consistency(const std::map<std::string, std::vector<BBox>>& labels_a,
                                     const std::map<std::string, std::vector<BBox>>& labels_b,
                                     double iou_threshold,
                                     const std::vector<std::string>& class_names);

/// Manifest YAML: keys root/names/class_counts plus train/val/test/unassigned
/// image lists. Label paths derive from image paths (images/ -> labels/,
/// extension -> .txt) unless listed explicitly.
DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

/// Reads and parses the label file of one entry.
std::vector<BBox> load_entry_labels(const DatasetManifest& manifest, const ManifestEntry& entry);

/// Default label path for an image path: images/ -> labels/, extension .txt.
std::string label_path_for(const std::string& image_path);

}  // namespace ssd
