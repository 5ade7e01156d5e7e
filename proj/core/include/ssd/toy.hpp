#pragma once

#include <filesystem>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "ssd/augment.hpp"
#include "ssd/blocks.hpp"
#include "ssd/data.hpp"
#include "ssd/eval.hpp"
#include "ssd/fusion.hpp"
#include "ssd/losses.hpp"

namespace ssd {

struct TrainConfig {
  int epochs = 40;
  double base_lr = 0.02;
  double min_lr = 1e-4;
  int warmup_epochs = 3;
  int img_size_start = 320;  // ramps to img_size_end over the first half
  int img_size_end = 640;
  int batch_size = 8;
  uint64_t seed = 0;
  double momentum = 0.937;
  double weight_decay = 5e-4;
  bool use_c2psa = true;
  AugSchedule aug;
  LossWeights loss_weights;
  AlignmentParams assigner;
  MetricForm assigner_form = MetricForm::eq5;
  std::set<int> boosted_classes;    // extra mosaic sampling weight
  double mosaic_class_boost = 2.0;

  void validate() const;
};

/// Desk-scale defaults: the paper-style schedule shapes at sizes a CPU can
/// train in minutes (96 -> 160 instead of 320 -> 640).
TrainConfig toy_default_config();

/// Linear warmup for warmup_epochs, then cosine annealing to min_lr.
double lr_schedule(int epoch, const TrainConfig& cfg);

/// Linear ramp img_size_start -> img_size_end over the first half of
/// training, snapped to multiples of 32; constant afterwards.
int progressive_size(int epoch, const TrainConfig& cfg);

struct SyntheticSpec {
  int n_images = 200;
  int base_size = 192;
  std::vector<std::string> classes = {"disk", "square", "ring"};
  double min_side_frac = 0.14, max_side_frac = 0.45;
  double small_band_frac = 0.25;  // fraction of shapes drawn from the small band
  double small_max_side = 0.22;   // small band: side below this (area < ~5%)
  int max_objects = 3;
  double noise = 18.0;
};

/// One rendered sample; annotations are exact by construction.
Image render_synthetic_image(const SyntheticSpec& spec, uint64_t seed);

/// Renders the dataset to dir (images/ + labels/ + classes.txt +
/// manifest.yaml), computes class_counts and applies the stratified
/// 0.8/0.1/0.1 split.
DatasetManifest build_synthetic_dataset(const SyntheticSpec& spec, uint64_t seed,
                                        const std::filesystem::path& dir);

/// Tiny anchor-free detector: 3 backbone stages (8/16/32 channels) with
/// RepConv and GsConv blocks, C2PSA after the deepest stage, a 2-level
/// weighted-fusion neck, and decoupled heads at strides 8 and 16.
struct ToyModel {
  int num_classes = 3;
  bool use_c2psa = true;

  ag::Var stem_w, stem_b;  // 3->8, stride 2
  ag::Var ds1_w, ds1_b;    // 8->8, stride 2
  RepConv rep1;            // 8->8
  ag::Var ds2_w, ds2_b;    // 8->16, stride 2
  GsConv gs2;              // 16->16
  ag::Var ds3_w, ds3_b;    // 16->32, stride 2
  RepConv rep3;            // 32->32
  C2psa attn;              // 32
  ag::Var lat_w, lat_b;    // 32->16, 1x1
  PyramidNodes neck;       // 2 levels @ 16 channels
  ag::Var smooth3_w, smooth3_b;
  ag::Var smooth4_w, smooth4_b;

  struct Head {
    ag::Var cls_w1, cls_b1, cls_w2, cls_b2;  // class branch
    ag::Var reg_w1, reg_b1;                  // shared reg trunk
    ag::Var box_w, box_b;                    // 4 box logits
    ag::Var obj_w, obj_b;                    // 1 objectness logit
  };
  Head head3, head4;

  struct LevelOut {
    ag::Var cls, box, obj;  // logits, (N,C,h,w) / (N,4,h,w) / (N,1,h,w)
    int stride;
  };

  static ToyModel create(int num_classes, bool use_c2psa, uint64_t seed);
  std::vector<LevelOut> forward(const ag::Var& x, bool merged = false) const;
  std::vector<ag::Var> params();
  std::vector<std::pair<std::string, ag::Var>> named_params();
  void merge_repconvs();

  void save(const std::filesystem::path& dir);
  static ToyModel load(const std::filesystem::path& dir);
};

/// SGD with momentum and (uniform) weight decay.
struct Sgd {
  explicit Sgd(std::vector<ag::Var> params, double momentum, double weight_decay);
  void step(double lr);
  void zero_grad();

  std::vector<ag::Var> params;
  std::vector<Tensor> velocity;
  double momentum, weight_decay;
};

struct EpochLog {
  int epoch = 0;
  double lr = 0;
  int img_size = 0;
  double p_mosaic = 0, p_mixup = 0;
  LossBreakdown loss;  // epoch means
};

struct TrainResult {
  std::vector<EpochLog> log;
  EvalReport report;  // held-out (test split) evaluation
  double final_map50 = 0;
  double final_loss = 0;  // last step's total loss (determinism probe)
  std::filesystem::path checkpoint_dir;
  std::filesystem::path dataset_dir;
};

/// Full run: dataset synthesis, scheduled-augmentation training with
/// task-aligned assignment and the class-weighted multi-task loss, held-out
/// evaluation, checkpoint + JSONL log under out_dir. Deterministic in
/// cfg.seed. Aborts with a diagnostic dump if the loss goes non-finite.
TrainResult train(const TrainConfig& cfg, const SyntheticSpec& spec,
                  const std::filesystem::path& out_dir);

/// Decoded + NMS-filtered detections in the image's normalized frame.
std::vector<BBox> predict(const ToyModel& model, const Image& img, int img_size,
                          double conf_thr, double nms_thr, bool merged = false);

}  // namespace ssd
