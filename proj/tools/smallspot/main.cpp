// smallspot: dataset curation, augmentation preview, toy training, and
// detection evaluation in one binary.
//
// Exit codes: 0 success, 1 usage error, 2 data/verification error. All
// errors go to stderr with the prefix "error:".

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ssd/augment.hpp"
#include "ssd/data.hpp"
#include "ssd/eval.hpp"
#include "ssd/rng.hpp"
#include "ssd/toy.hpp"
#include "ssd/verify.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// stats
// ---------------------------------------------------------------------------

struct StatsOptions {
  std::string manifest_path;
  bool recount = false;
  std::string format = "text";
};

int cmd_stats(const StatsOptions& opt) {
  ssd::DatasetManifest manifest = ssd::load_manifest(opt.manifest_path);
  if (manifest.class_counts.empty() || opt.recount) ssd::compute_class_counts(manifest);

  int64_t total = 0;
  for (int64_t c : manifest.class_counts) total += c;
  std::vector<double> pct(manifest.class_counts.size(), 0.0);
  for (size_t i = 0; i < pct.size(); ++i)
    pct[i] = total > 0
                 ? std::round(10000.0 * double(manifest.class_counts[i]) / double(total)) / 10.0
                 : 0.0;

  if (opt.format == "json") {
    json rows = json::array();
    for (size_t i = 0; i < manifest.class_names.size(); ++i)
      rows.push_back({{"class", manifest.class_names[i]},
                      {"instances", manifest.class_counts[i]},
                      {"percentage", pct[i]}});
    std::cout << json{{"classes", rows}, {"total", total}}.dump(2) << "\n";
  } else if (opt.format == "csv") {
    std::cout << "class,instances,percentage\n";
    for (size_t i = 0; i < manifest.class_names.size(); ++i) {
      char line[160];
      std::snprintf(line, sizeof(line), "%s,%ld,%.1f\n", manifest.class_names[i].c_str(),
                    long(manifest.class_counts[i]), pct[i]);
      std::cout << line;
    }
  } else {
    char header[96];
    std::snprintf(header, sizeof(header), "%-20s %12s %13s\n", "Class", "Instances",
                  "Percentage");
    std::cout << header;
    for (size_t i = 0; i < manifest.class_names.size(); ++i) {
      char line[160];
      std::snprintf(line, sizeof(line), "%-20s %12ld %12.1f%%\n",
                    manifest.class_names[i].c_str(), long(manifest.class_counts[i]), pct[i]);
      std::cout << line;
    }
    char footer[96];
    std::snprintf(footer, sizeof(footer), "%-20s %12ld %12.1f%%\n", "total", long(total),
                  total > 0 ? 100.0 : 0.0);
    std::cout << footer;
  }
  return 0;
}

// ---------------------------------------------------------------------------
// split
// ---------------------------------------------------------------------------

struct SplitOptions {
  std::string manifest_path;
  std::string out_path;
  std::vector<double> fractions = {0.8, 0.1, 0.1};
  uint64_t seed = 0;
};

int cmd_split(const SplitOptions& opt) {
  ssd::check(opt.fractions.size() == 3, "--fractions needs exactly three values");
  ssd::DatasetManifest manifest = ssd::load_manifest(opt.manifest_path);
  const auto warnings = ssd::split_dataset(
      manifest, {opt.fractions[0], opt.fractions[1], opt.fractions[2]}, opt.seed);
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
  ssd::save_manifest(manifest, opt.out_path);

  int counts[3] = {0, 0, 0};
  for (const auto& e : manifest.entries) {
    if (e.split == ssd::Split::train) ++counts[0];
    if (e.split == ssd::Split::val) ++counts[1];
    if (e.split == ssd::Split::test) ++counts[2];
  }
  std::cout << "train " << counts[0] << "  val " << counts[1] << "  test " << counts[2]
            << "  -> " << opt.out_path << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// verify-labels
// ---------------------------------------------------------------------------

struct VerifyOptions {
  std::string dir_a, dir_b, classes_path;
  double iou_threshold = 0.85;
  std::string format = "text";
};

std::map<std::string, std::vector<ssd::BBox>> read_label_dir(const fs::path& dir,
                                                             int num_classes) {
  std::map<std::string, std::vector<ssd::BBox>> out;
  ssd::check(fs::is_directory(dir), "not a directory: ", dir.string());
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".txt") continue;
    std::ifstream is(entry.path());
    std::stringstream buf;
    buf << is.rdbuf();
    try {
      out[entry.path().filename().string()] = ssd::parse_label_file(buf.str(), num_classes);
    } catch (const ssd::Error& e) {
      ssd::fail(entry.path().string(), ": ", e.what());
    }
  }
  ssd::check(!out.empty(), "no .txt label files under ", dir.string());
  return out;
}

int cmd_verify_labels(const VerifyOptions& opt) {
  const auto names = ssd::load_class_names(opt.classes_path);
  const auto a = read_label_dir(opt.dir_a, int(names.size()));
  const auto b = read_label_dir(opt.dir_b, int(names.size()));
  const ssd::ConsistencyReport report = ssd::verify_consistency(a, b, opt.iou_threshold, names);
  if (opt.format == "json")
    std::cout << report.to_json() << "\n";
  else
    std::cout << report.to_table();
  return 0;
}

// ---------------------------------------------------------------------------
// augment preview
// ---------------------------------------------------------------------------

struct PreviewOptions {
  std::string manifest_path;
  std::string out_dir;
  int count = 8;
  int size = 640;
  int mosaic_grid = 0;  // 0 = plain letterbox
  double mixup_lambda = 0.0;
  bool jitter = false;
  uint64_t seed = 0;
};

int cmd_augment_preview(const PreviewOptions& opt) {
  ssd::DatasetManifest manifest = ssd::load_manifest(opt.manifest_path);
  ssd::check(!manifest.entries.empty(), "manifest has no entries");
  fs::create_directories(opt.out_dir);

  std::vector<ssd::Image> pool;
  const int n_pool = int(std::min<size_t>(manifest.entries.size(), 64));
  for (int i = 0; i < n_pool; ++i) {
    ssd::Image img = ssd::read_png(manifest.root / manifest.entries[size_t(i)].image);
    img.annotations = ssd::load_entry_labels(manifest, manifest.entries[size_t(i)]);
    pool.push_back(std::move(img));
  }

  json sidecar = json::array();
  for (int k = 0; k < opt.count; ++k) {
    const uint64_t sample_seed = ssd::derive_seed(opt.seed, uint64_t(k));
    ssd::Rng rng(sample_seed);
    ssd::Image out;
    if (opt.mosaic_grid == 4 || opt.mosaic_grid == 9) {
      std::vector<ssd::Image> sources;
      for (int s = 0; s < opt.mosaic_grid; ++s)
        sources.push_back(pool[size_t(rng.uniform_int(0, n_pool - 1))]);
      out = ssd::mosaic(sources, rng.next(), opt.size);
    } else {
      out = ssd::letterbox(pool[size_t(k % n_pool)], opt.size);
    }
    if (opt.mixup_lambda > 0) {
      ssd::Image other = ssd::letterbox(pool[size_t(rng.uniform_int(0, n_pool - 1))], opt.size);
      out = ssd::mixup(out, other, opt.mixup_lambda);
    }
    if (opt.jitter) out = ssd::color_jitter(out, rng.next());

    json boxes = json::array();
    for (const ssd::BBox& b : out.annotations) {
      boxes.push_back(
          {{"class", b.class_id}, {"cx", b.cx}, {"cy", b.cy}, {"w", b.w}, {"h", b.h}});
      ssd::draw_box(out, b);
    }
    char name[64];
    std::snprintf(name, sizeof(name), "preview_%03d.png", k);
    ssd::write_png(fs::path(opt.out_dir) / name, out);
    sidecar.push_back({{"file", name}, {"seed", sample_seed}, {"boxes", boxes}});
  }
  std::ofstream os(fs::path(opt.out_dir) / "previews.json");
  os << sidecar.dump(2) << "\n";
  std::cout << "wrote " << opt.count << " previews to " << opt.out_dir << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train-toy
// ---------------------------------------------------------------------------

struct TrainOptions {
  std::string out_dir = "runs/toy";
  int epochs = -1;
  int images = -1;
  uint64_t seed = 0;
  int img_start = -1, img_end = -1;
  int batch = -1;
  double lr = -1;
  bool no_c2psa = false;
  int mosaic_grid = 4;
  std::vector<int> boost_classes;
};

int cmd_train_toy(const TrainOptions& opt) {
  ssd::TrainConfig cfg = ssd::toy_default_config();
  ssd::SyntheticSpec spec;
  if (opt.epochs >= 0) cfg.epochs = opt.epochs;
  if (opt.images > 0) spec.n_images = opt.images;
  if (opt.img_start > 0) cfg.img_size_start = opt.img_start;
  if (opt.img_end > 0) cfg.img_size_end = opt.img_end;
  if (opt.batch > 0) cfg.batch_size = opt.batch;
  if (opt.lr > 0) cfg.base_lr = opt.lr;
  cfg.seed = opt.seed;
  cfg.use_c2psa = !opt.no_c2psa;
  cfg.aug.mosaic_grid = opt.mosaic_grid;
  for (int c : opt.boost_classes) cfg.boosted_classes.insert(c);

  const ssd::TrainResult result = ssd::train(cfg, spec, opt.out_dir);
  std::cout << result.report.to_text();
  std::cout << "final mAP50 " << result.final_map50 << "\n";
  std::cout << "checkpoint " << result.checkpoint_dir.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalOptions {
  std::string pred_path;
  std::string manifest_path;
  std::string split = "all";
  std::string format = "text";
  std::string out_json;
};

int cmd_eval(const EvalOptions& opt) {
  ssd::DatasetManifest manifest = ssd::load_manifest(opt.manifest_path);
  std::optional<ssd::Split> filter;
  if (opt.split == "train") filter = ssd::Split::train;
  else if (opt.split == "val") filter = ssd::Split::val;
  else if (opt.split == "test") filter = ssd::Split::test;
  else ssd::check(opt.split == "all", "--split must be train|val|test|all");

  const ssd::BoxesByImage gts = ssd::gather_ground_truth(manifest, filter);
  const ssd::BoxesByImage dets =
      ssd::load_predictions_json(opt.pred_path, int(manifest.class_names.size()));
  const ssd::EvalReport report = ssd::map_summary(dets, gts, manifest.class_names);

  if (opt.format == "json")
    std::cout << report.to_json() << "\n";
  else if (opt.format == "csv")
    std::cout << report.to_csv();
  else
    std::cout << report.to_text();
  if (!opt.out_json.empty()) ssd::save_report_json(report, opt.out_json);
  return 0;
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

struct CompareOptions {
  std::vector<std::string> reports;
  std::vector<std::string> names;
  std::string csv_path;
};

int cmd_compare(const CompareOptions& opt) {
  ssd::check(!opt.reports.empty(), "need at least one --reports entry");
  std::vector<ssd::EvalReport> reports;
  std::vector<std::string> names;
  for (size_t i = 0; i < opt.reports.size(); ++i) {
    reports.push_back(ssd::load_report_json(opt.reports[i]));
    names.push_back(i < opt.names.size() ? opt.names[i]
                                         : fs::path(opt.reports[i]).stem().string());
  }

  char header[96];
  std::snprintf(header, sizeof(header), "%-24s %10s %10s\n", "Model", "mAP50", "mAP50-95");
  std::cout << header;
  for (size_t i = 0; i < reports.size(); ++i) {
    char line[128];
    std::snprintf(line, sizeof(line), "%-24s %10.3f %10.3f\n", names[i].c_str(),
                  reports[i].all.ap50, reports[i].all.ap50_95);
    std::cout << line;
  }

  if (!opt.csv_path.empty()) {
    // Per-class AP table, one row per class, two columns per model.
    std::vector<std::string> classes;
    for (const auto& r : reports)
      for (const auto& row : r.rows)
        if (std::find(classes.begin(), classes.end(), row.name) == classes.end())
          classes.push_back(row.name);
    std::ofstream os(opt.csv_path);
    ssd::check(os.good(), "cannot write ", opt.csv_path);
    os << "class";
    for (const auto& n : names) os << "," << n << "_ap50," << n << "_ap50_95";
    os << "\n";
    for (const auto& cls : classes) {
      os << cls;
      for (const auto& r : reports) {
        const ssd::ClassRow* found = nullptr;
        for (const auto& row : r.rows)
          if (row.name == cls) found = &row;
        if (found) {
          char cell[64];
          std::snprintf(cell, sizeof(cell), ",%.6f,%.6f", found->ap50, found->ap50_95);
          os << cell;
        } else {
          os << ",,";
        }
      }
      os << "\n";
    }
    std::cout << "per-class CSV -> " << opt.csv_path << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------
// grad-check
// ---------------------------------------------------------------------------

struct GradCheckOptions {
  double eps = 1e-3;
  uint64_t seed = 0;
  int points = 10;
  double tolerance = 1e-3;
};

int cmd_grad_check(const GradCheckOptions& opt) {
  const auto rows = ssd::run_gradient_suite(opt.eps, opt.seed, opt.points, opt.tolerance);
  bool all_pass = true;
  for (const auto& row : rows) {
    char line[128];
    std::snprintf(line, sizeof(line), "%-24s max_rel_err %.3e  %s\n", row.op.c_str(),
                  row.max_rel_err, row.pass ? "ok" : "FAIL");
    std::cout << line;
    all_pass = all_pass && row.pass;
  }
  if (!all_pass) ssd::fail("gradient check failed (tolerance ", opt.tolerance, ")");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"small-spot detection toolkit"};
  app.require_subcommand(1);

  StatsOptions stats_opt;
  auto* stats = app.add_subcommand("stats", "Per-class instance counts and percentages");
  stats->add_option("--manifest", stats_opt.manifest_path, "manifest YAML")->required();
  stats->add_flag("--recount", stats_opt.recount, "recount from label files");
  stats->add_option("--format", stats_opt.format, "text|json|csv")
      ->check(CLI::IsMember({"text", "json", "csv"}));

  SplitOptions split_opt;
  auto* split = app.add_subcommand("split", "Stratified train/val/test split");
  split->add_option("--manifest", split_opt.manifest_path, "manifest YAML")->required();
  split->add_option("--out", split_opt.out_path, "output manifest path")->required();
  split->add_option("--fractions", split_opt.fractions, "train,val,test fractions")
      ->expected(3);
  split->add_option("--seed", split_opt.seed, "shuffle seed");

  VerifyOptions verify_opt;
  auto* verify = app.add_subcommand("verify-labels", "Annotation consistency check");
  verify->add_option("--a", verify_opt.dir_a, "label dir, annotator A")->required();
  verify->add_option("--b", verify_opt.dir_b, "label dir, annotator B")->required();
  verify->add_option("--classes", verify_opt.classes_path, "classes.txt")->required();
  verify->add_option("--iou", verify_opt.iou_threshold, "consistency IoU threshold");
  verify->add_option("--format", verify_opt.format, "text|json")
      ->check(CLI::IsMember({"text", "json"}));

  auto* augment = app.add_subcommand("augment", "Augmentation tools");
  PreviewOptions preview_opt;
  auto* preview = augment->add_subcommand("preview", "Write annotated augmentation previews");
  preview->add_option("--manifest", preview_opt.manifest_path, "manifest YAML")->required();
  preview->add_option("--out", preview_opt.out_dir, "output directory")->required();
  preview->add_option("--count", preview_opt.count, "number of previews");
  preview->add_option("--size", preview_opt.size, "canvas size");
  preview->add_option("--mosaic", preview_opt.mosaic_grid, "mosaic grid (4 or 9)")
      ->check(CLI::IsMember({0, 4, 9}));
  preview->add_option("--mixup", preview_opt.mixup_lambda, "mixup lambda in (0,1)");
  preview->add_flag("--jitter", preview_opt.jitter, "apply color jitter");
  preview->add_option("--seed", preview_opt.seed, "rng seed");

  TrainOptions train_opt;
  auto* train = app.add_subcommand("train-toy", "Train the toy detector on synthetic shapes");
  train->add_option("--out", train_opt.out_dir, "output directory");
  train->add_option("--epochs", train_opt.epochs, "epochs");
  train->add_option("--images", train_opt.images, "synthetic image count");
  train->add_option("--seed", train_opt.seed, "seed");
  train->add_option("--img-start", train_opt.img_start, "initial train size (multiple of 32)");
  train->add_option("--img-end", train_opt.img_end, "final train size (multiple of 32)");
  train->add_option("--batch", train_opt.batch, "batch size");
  train->add_option("--lr", train_opt.lr, "base learning rate");
  train->add_flag("--no-c2psa", train_opt.no_c2psa, "disable the C2PSA block");
  train->add_option("--mosaic-grid", train_opt.mosaic_grid, "4 or 9")
      ->check(CLI::IsMember({4, 9}));
  train->add_option("--boost-classes", train_opt.boost_classes,
                    "class ids with boosted mosaic sampling");

  EvalOptions eval_opt;
  auto* evalc = app.add_subcommand("eval", "Evaluate predictions against a manifest");
  evalc->add_option("--pred", eval_opt.pred_path, "predictions JSON")->required();
  evalc->add_option("--gt", eval_opt.manifest_path, "manifest YAML")->required();
  evalc->add_option("--split", eval_opt.split, "train|val|test|all");
  evalc->add_option("--format", eval_opt.format, "text|json|csv")
      ->check(CLI::IsMember({"text", "json", "csv"}));
  evalc->add_option("--out", eval_opt.out_json, "also write report JSON here");

  CompareOptions compare_opt;
  auto* compare = app.add_subcommand("compare", "Compare multiple eval reports");
  compare->add_option("--reports", compare_opt.reports, "report JSON files")->required();
  compare->add_option("--names", compare_opt.names, "model names (parallel to --reports)");
  compare->add_option("--csv", compare_opt.csv_path, "write per-class AP table CSV");

  GradCheckOptions grad_opt;
  auto* grad = app.add_subcommand("grad-check", "Run the numerical gradient suite");
  grad->add_option("--eps", grad_opt.eps, "finite-difference step");
  grad->add_option("--seed", grad_opt.seed, "rng seed");
  grad->add_option("--points", grad_opt.points, "random points per op");
  grad->add_option("--tolerance", grad_opt.tolerance, "max relative error");

  if (argc <= 1) {
    std::cerr << app.help() << "\n";
    return 1;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help() << "\n";
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }

  try {
    if (stats->parsed()) return cmd_stats(stats_opt);
    if (split->parsed()) return cmd_split(split_opt);
    if (verify->parsed()) return cmd_verify_labels(verify_opt);
    if (augment->parsed() && preview->parsed()) return cmd_augment_preview(preview_opt);
    if (augment->parsed()) {
      std::cerr << "error: augment requires a subcommand (preview)\n";
      return 1;
    }
    if (train->parsed()) return cmd_train_toy(train_opt);
    if (evalc->parsed()) return cmd_eval(eval_opt);
    if (compare->parsed()) return cmd_compare(compare_opt);
    if (grad->parsed()) return cmd_grad_check(grad_opt);
    std::cerr << "error: no subcommand\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
