#include "ssd/toy.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "ssd/rng.hpp"
#include "ssd/threading.hpp"

namespace ssd {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Config and schedules
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  check(epochs >= 0, "TrainConfig: epochs must be >= 0");
  check(warmup_epochs >= 1 && (epochs == 0 || warmup_epochs < epochs),
        "TrainConfig: warmup_epochs must be >= 1 and < epochs");
  check(img_size_start % 32 == 0 && img_size_end % 32 == 0,
        "TrainConfig: image sizes must be multiples of 32, got ", img_size_start, " and ",
        img_size_end);
  check(img_size_start > 0 && img_size_start <= img_size_end,
        "TrainConfig: need 0 < img_size_start <= img_size_end");
  check(batch_size >= 1, "TrainConfig: batch_size must be >= 1");
  check(base_lr > 0 && min_lr > 0 && min_lr <= base_lr, "TrainConfig: bad learning rates");
}

TrainConfig toy_default_config() {
  TrainConfig cfg;
  cfg.epochs = 40;
  cfg.base_lr = 0.02;
  cfg.min_lr = 1e-4;
  cfg.warmup_epochs = 3;
  cfg.img_size_start = 96;
  cfg.img_size_end = 160;
  cfg.batch_size = 8;
  return cfg;
}

double lr_schedule(int epoch, const TrainConfig& cfg) {
  check(epoch >= 0 && epoch < std::max(cfg.epochs, 1), "lr_schedule: epoch ", epoch,
        " outside [0, ", cfg.epochs, ")");
  const int w = cfg.warmup_epochs;
  if (epoch < w) return cfg.base_lr * double(epoch + 1) / double(w);
  const double progress = double(epoch - w) / double(cfg.epochs - w);
  return cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + std::cos(M_PI * progress));
}

int progressive_size(int epoch, const TrainConfig& cfg) {
  check(epoch >= 0, "progressive_size: negative epoch");
  if (cfg.epochs <= 0 || 2 * epoch >= cfg.epochs) return cfg.img_size_end;
  const double raw = cfg.img_size_start +
                     (cfg.img_size_end - cfg.img_size_start) * (2.0 * epoch / cfg.epochs);
  const int snapped = int(std::lround(raw / 32.0)) * 32;
  return std::clamp(snapped, cfg.img_size_start, cfg.img_size_end);
}

// ---------------------------------------------------------------------------
// Synthetic shapes dataset
// ---------------------------------------------------------------------------

namespace {

void paint_shape(Image& img, int cls, int cx, int cy, int half, Rng& rng) {
  // Class palette with mild per-object variation: disk red, square green,
  // ring blue.
  static const int base_color[3][3] = {{205, 64, 64}, {64, 200, 70}, {70, 92, 215}};
  int color[3];
  for (int c = 0; c < 3; ++c)
    color[c] = std::clamp(base_color[size_t(cls)][size_t(c)] + rng.uniform_int(-25, 25), 0, 255);

  const int inner = int(std::lround(half * 0.55));
  for (int y = cy - half; y <= cy + half; ++y) {
    if (y < 0 || y >= img.height) continue;
    for (int x = cx - half; x <= cx + half; ++x) {
      if (x < 0 || x >= img.width) continue;
      const double d2 = double(x - cx) * (x - cx) + double(y - cy) * (y - cy);
      bool hit = false;
      switch (cls) {
        case 0: hit = d2 <= double(half) * half; break;
        case 1: hit = true; break;  // the loop bounds are the square
        default: hit = d2 <= double(half) * half && d2 >= double(inner) * inner; break;
      }
      if (!hit) continue;
      for (int c = 0; c < 3; ++c) img.at(x, y, c) = uint8_t(color[size_t(c)]);
    }
  }
}

}  // namespace

Image render_synthetic_image(const SyntheticSpec& spec, uint64_t seed) {
  check(spec.base_size >= 32, "SyntheticSpec: base_size too small");
  check(spec.classes.size() >= 1 && spec.classes.size() <= 3,
        "SyntheticSpec: supports 1..3 shape classes");
  Rng rng(seed);
  const int S = spec.base_size;

  Image img;
  img.width = S;
  img.height = S;
  img.pixels.resize(size_t(3) * S * S);
  const int base = rng.uniform_int(70, 110);
  const int slope = rng.uniform_int(-20, 20);
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      const double shade = base + slope * (double(x + y) / (2 * S) - 0.5);
      for (int c = 0; c < 3; ++c) {
        const double v = shade + rng.uniform(-spec.noise, spec.noise);
        img.at(x, y, c) = uint8_t(std::clamp(v, 0.0, 255.0));
      }
    }

  const int n_objects = rng.uniform_int(1, spec.max_objects);
  for (int k = 0; k < n_objects; ++k) {
    const bool small = rng.uniform() < spec.small_band_frac;
    const double frac = small ? rng.uniform(spec.min_side_frac, spec.small_max_side)
                              : rng.uniform(spec.small_max_side, spec.max_side_frac);
    const int side = std::max(6, int(std::lround(frac * S)));
    const int half = side / 2;

    BBox box;
    bool placed = false;
    for (int attempt = 0; attempt < 12 && !placed; ++attempt) {
      const int cx = rng.uniform_int(half + 2, S - half - 3);
      const int cy = rng.uniform_int(half + 2, S - half - 3);
      box.cx = double(cx) / S;
      box.cy = double(cy) / S;
      box.w = double(2 * half + 1) / S;
      box.h = box.w;
      box.class_id = rng.uniform_int(0, int(spec.classes.size()) - 1);
      placed = true;
      for (const BBox& other : img.annotations)
        if (iou(box, other) > 0.2) {
          placed = false;
          break;
        }
      if (placed) {
        paint_shape(img, box.class_id, cx, cy, half, rng);
        img.annotations.push_back(box);
      }
    }
  }
  return img;
}

DatasetManifest build_synthetic_dataset(const SyntheticSpec& spec, uint64_t seed,
                                        const fs::path& dir) {
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "labels");

  DatasetManifest manifest;
  manifest.root = dir;
  manifest.class_names = spec.classes;

  std::vector<Image> rendered(static_cast<size_t>(spec.n_images));
  parallel_for(spec.n_images, [&](int64_t i) {
    rendered[size_t(i)] = render_synthetic_image(spec, derive_seed(seed, 0xDA7A, uint64_t(i)));
  });

  {
    std::ofstream os(dir / "classes.txt");
    for (const auto& name : spec.classes) os << name << "\n";
  }
  for (int i = 0; i < spec.n_images; ++i) {
    char stem[32];
    std::snprintf(stem, sizeof(stem), "img_%04d", i);
    const std::string image_rel = std::string("images/") + stem + ".png";
    const std::string label_rel = std::string("labels/") + stem + ".txt";
    write_png(dir / image_rel, rendered[size_t(i)]);
    std::ofstream os(dir / label_rel);
    os << serialize_labels(rendered[size_t(i)].annotations);
    manifest.entries.push_back({image_rel, label_rel, Split::none});
  }

  compute_class_counts(manifest);
  split_dataset(manifest, {0.8, 0.1, 0.1}, derive_seed(seed, 0x5B117));
  save_manifest(manifest, dir / "manifest.yaml");
  return manifest;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

namespace {

ag::Var make_conv(std::vector<int> shape, Rng& rng) {
  const int fan_in = shape[1] * shape[2] * shape[3];
  return ag::param(Tensor::randn(std::move(shape), rng, std::sqrt(2.0f / float(fan_in))));
}

ag::Var make_bias(int n, float value = 0.0f) { return ag::param(Tensor::full({n}, value)); }

ag::Var rep_forward(const RepConv& rep, const ag::Var& x, bool merged) {
  if (!merged) return rep.forward(x);
  check(rep.merged.has_value(), "ToyModel: merged forward before merge_repconvs()");
  return ag::conv2d(x, ag::constant(rep.merged->first), ag::constant(rep.merged->second), 1, 1);
}

}  // namespace

ToyModel ToyModel::create(int num_classes, bool use_c2psa, uint64_t seed) {
  check(num_classes >= 1, "ToyModel: need at least one class");
  Rng rng(seed);
  ToyModel m;
  m.num_classes = num_classes;
  m.use_c2psa = use_c2psa;

  m.stem_w = make_conv({8, 3, 3, 3}, rng);
  m.stem_b = make_bias(8);
  m.ds1_w = make_conv({8, 8, 3, 3}, rng);
  m.ds1_b = make_bias(8);
  m.rep1 = RepConv::create(8, 8, true, rng);
  m.ds2_w = make_conv({16, 8, 3, 3}, rng);
  m.ds2_b = make_bias(16);
  m.gs2 = GsConv::create(16, 16, rng);
  m.ds3_w = make_conv({32, 16, 3, 3}, rng);
  m.ds3_b = make_bias(32);
  m.rep3 = RepConv::create(32, 32, true, rng);
  m.attn = C2psa::create(32, rng, 16, 7);
  m.lat_w = make_conv({16, 32, 1, 1}, rng);
  m.lat_b = make_bias(16);
  m.neck = PyramidNodes::create(2, 16);
  m.smooth3_w = make_conv({16, 16, 3, 3}, rng);
  m.smooth3_b = make_bias(16);
  m.smooth4_w = make_conv({16, 16, 3, 3}, rng);
  m.smooth4_b = make_bias(16);

  auto make_head = [&](Head& h) {
    h.cls_w1 = make_conv({16, 16, 3, 3}, rng);
    h.cls_b1 = make_bias(16);
    h.cls_w2 = make_conv({num_classes, 16, 1, 1}, rng);
    h.cls_b2 = make_bias(num_classes, -2.2f);  // start near p ~ 0.1
    h.reg_w1 = make_conv({16, 16, 3, 3}, rng);
    h.reg_b1 = make_bias(16);
    h.box_w = make_conv({4, 16, 1, 1}, rng);
    Tensor box_bias({4}, {0.0f, 0.0f, -1.5f, -1.5f});  // modest initial box size
    h.box_b = ag::param(std::move(box_bias));
    h.obj_w = make_conv({1, 16, 1, 1}, rng);
    h.obj_b = make_bias(1, -2.2f);
  };
  make_head(m.head3);
  make_head(m.head4);
  return m;
}

std::vector<ToyModel::LevelOut> ToyModel::forward(const ag::Var& x, bool merged) const {
  using namespace ag;
  Var t = relu(conv2d(x, stem_w, stem_b, 2, 1));
  t = relu(conv2d(t, ds1_w, ds1_b, 2, 1));
  t = relu(rep_forward(rep1, t, merged));
  t = relu(conv2d(t, ds2_w, ds2_b, 2, 1));
  Var p3 = relu(gs2.forward(t));
  t = relu(conv2d(p3, ds3_w, ds3_b, 2, 1));
  t = relu(rep_forward(rep3, t, merged));
  if (use_c2psa) t = attn.forward(t);
  Var p4 = conv2d(t, lat_w, lat_b);

  std::vector<Var> fused = pyramid_fuse(std::vector<Var>{p4, p3}, neck);
  Var n4 = relu(conv2d(fused[0], smooth4_w, smooth4_b, 1, 1));
  Var n3 = relu(conv2d(fused[1], smooth3_w, smooth3_b, 1, 1));

  auto head_out = [](const Head& h, const Var& n, int stride) {
    Var hc = relu(conv2d(n, h.cls_w1, h.cls_b1, 1, 1));
    Var cls = conv2d(hc, h.cls_w2, h.cls_b2);
    Var hr = relu(conv2d(n, h.reg_w1, h.reg_b1, 1, 1));
    Var box = conv2d(hr, h.box_w, h.box_b);
    Var obj = conv2d(hr, h.obj_w, h.obj_b);
    return LevelOut{cls, box, obj, stride};
  };
  return {head_out(head3, n3, 8), head_out(head4, n4, 16)};
}

std::vector<std::pair<std::string, ag::Var>> ToyModel::named_params() {
  std::vector<std::pair<std::string, ag::Var>> out = {
      {"stem.w", stem_w},       {"stem.b", stem_b},       {"ds1.w", ds1_w},
      {"ds1.b", ds1_b},         {"ds2.w", ds2_w},         {"ds2.b", ds2_b},
      {"ds3.w", ds3_w},         {"ds3.b", ds3_b},         {"lat.w", lat_w},
      {"lat.b", lat_b},         {"smooth3.w", smooth3_w}, {"smooth3.b", smooth3_b},
      {"smooth4.w", smooth4_w}, {"smooth4.b", smooth4_b}};
  auto add_all = [&out](const std::string& prefix, std::vector<ag::Var> vars,
                        const std::vector<std::string>& names) {
    for (size_t i = 0; i < vars.size(); ++i) out.emplace_back(prefix + names[i], vars[i]);
  };
  add_all("rep1.", rep1.params(), {"w3", "b3", "w1", "b1", "b_id"});
  add_all("rep3.", rep3.params(), {"w3", "b3", "w1", "b1", "b_id"});
  add_all("gs2.", gs2.params(), {"wd", "bd", "wp", "bp"});
  add_all("attn.", attn.params(),
          {"se.w1", "se.b1", "se.w2", "se.b2", "sp.w", "sp.b", "fuse.w", "fuse.b"});
  add_all("neck.td0.", {neck.top_down[0].alpha, neck.top_down[0].beta}, {"alpha", "beta"});
  add_all("neck.bu0.", {neck.bottom_up[0].alpha, neck.bottom_up[0].beta}, {"alpha", "beta"});
  auto add_head = [&](const std::string& prefix, Head& h) {
    add_all(prefix,
            {h.cls_w1, h.cls_b1, h.cls_w2, h.cls_b2, h.reg_w1, h.reg_b1, h.box_w, h.box_b,
             h.obj_w, h.obj_b},
            {"cls.w1", "cls.b1", "cls.w2", "cls.b2", "reg.w1", "reg.b1", "box.w", "box.b",
             "obj.w", "obj.b"});
  };
  add_head("head3.", head3);
  add_head("head4.", head4);
  return out;
}

std::vector<ag::Var> ToyModel::params() {
  std::vector<ag::Var> out;
  for (auto& [name, var] : named_params()) out.push_back(var);
  return out;
}

void ToyModel::merge_repconvs() {
  rep1.merge();
  rep3.merge();
}

void ToyModel::save(const fs::path& dir) {
  fs::create_directories(dir / "tensors");
  json names = json::array();
  for (auto& [name, var] : named_params()) {
    save_tensor(dir / "tensors" / (name + ".ssdt"), var.value());
    names.push_back(name);
  }
  json descriptor{{"format", "smallspot-checkpoint"},
                  {"num_classes", num_classes},
                  {"use_c2psa", use_c2psa},
                  {"params", names}};
  std::ofstream os(dir / "model.json");
  check(os.good(), "ToyModel::save: cannot write ", (dir / "model.json").string());
  os << descriptor.dump(2) << "\n";
}

ToyModel ToyModel::load(const fs::path& dir) {
  std::ifstream is(dir / "model.json");
  check(is.good(), "ToyModel::load: cannot open ", (dir / "model.json").string());
  json descriptor = json::parse(is);
  ToyModel m = ToyModel::create(descriptor.at("num_classes"), descriptor.at("use_c2psa"), 0);
  for (auto& [name, var] : m.named_params()) {
    Tensor t = load_tensor(dir / "tensors" / (name + ".ssdt"));
    check(t.same_shape(var.value()), "ToyModel::load: shape mismatch for ", name);
    var.mutable_value() = std::move(t);
  }
  return m;
}

// ---------------------------------------------------------------------------
// SGD
// ---------------------------------------------------------------------------

Sgd::Sgd(std::vector<ag::Var> params_in, double momentum_in, double weight_decay_in)
    : params(std::move(params_in)), momentum(momentum_in), weight_decay(weight_decay_in) {
  velocity.reserve(params.size());
  for (auto& p : params) velocity.push_back(Tensor::zeros(p.value().shape()));
}

void Sgd::step(double lr) {
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& w = params[i].mutable_value();
    const Tensor& g = params[i].grad();
    Tensor& v = velocity[i];
    if (g.empty()) continue;
    for (int64_t k = 0; k < w.size(); ++k) {
      const float grad = g[k] + float(weight_decay) * w[k];
      v[k] = float(momentum) * v[k] - float(lr) * grad;
      w[k] += v[k];
    }
  }
}

void Sgd::zero_grad() {
  for (auto& p : params) p.zero_grad();
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

namespace {

struct DecodedMaps {
  ag::Var cx, cy, w, h;  // (B,1,h,w) each, normalized to the canvas
};

Tensor grid_tensor(int batch, int h, int w, bool x_axis) {
  Tensor t({batch, 1, h, w});
  for (int n = 0; n < batch; ++n)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) t.at(n, 0, y, x) = float(x_axis ? x : y);
  return t;
}

DecodedMaps decode_maps(const ToyModel::LevelOut& lv, int img_size) {
  using namespace ag;
  const Tensor& bv = lv.box.value();
  const int B = bv.extent(0), h = bv.extent(2), w = bv.extent(3);
  const float cell = float(lv.stride) / float(img_size);
  DecodedMaps maps;
  maps.cx = mul_scalar(add(sigmoid(slice_channels(lv.box, 0, 1)),
                           constant(grid_tensor(B, h, w, true))),
                       cell);
  maps.cy = mul_scalar(add(sigmoid(slice_channels(lv.box, 1, 2)),
                           constant(grid_tensor(B, h, w, false))),
                       cell);
  maps.w = sigmoid(slice_channels(lv.box, 2, 3));
  maps.h = sigmoid(slice_channels(lv.box, 3, 4));
  return maps;
}

}  // namespace

std::vector<BBox> predict(const ToyModel& model, const Image& img, int img_size,
                          double conf_thr, double nms_thr, bool merged) {
  const Image boxed = letterbox(img, img_size);
  const ag::Var x = ag::constant(image_to_tensor(boxed));
  const auto levels = model.forward(x, merged);

  std::vector<BBox> raw;
  for (const auto& lv : levels) {
    const DecodedMaps maps = decode_maps(lv, img_size);
    const Tensor cls = ssd::sigmoid(lv.cls.value());
    const Tensor obj = ssd::sigmoid(lv.obj.value());
    const int h = obj.extent(2), w = obj.extent(3);
    for (int y = 0; y < h; ++y)
      for (int xw = 0; xw < w; ++xw) {
        const double o = obj.at(0, 0, y, xw);
        int best_c = 0;
        for (int c = 1; c < model.num_classes; ++c)
          if (cls.at(0, c, y, xw) > cls.at(0, best_c, y, xw)) best_c = c;
        const double conf = o * double(cls.at(0, best_c, y, xw));
        if (conf < conf_thr) continue;
        BBox b;
        b.cx = maps.cx.value().at(0, 0, y, xw);
        b.cy = maps.cy.value().at(0, 0, y, xw);
        b.w = maps.w.value().at(0, 0, y, xw);
        b.h = maps.h.value().at(0, 0, y, xw);
        b.class_id = best_c;
        b.conf = conf;
        raw.push_back(b);
      }
  }

  std::vector<BBox> kept;
  for (int idx : non_max_suppression(raw, nms_thr, conf_thr)) {
    BBox b = unletterbox_box(raw[size_t(idx)], img.width, img.height, img_size);
    // Clamp into the unit square; discard degenerate leftovers.
    const double x1 = std::clamp(b.x1(), 0.0, 1.0), x2 = std::clamp(b.x2(), 0.0, 1.0);
    const double y1 = std::clamp(b.y1(), 0.0, 1.0), y2 = std::clamp(b.y2(), 0.0, 1.0);
    if (x2 - x1 < 1e-4 || y2 - y1 < 1e-4) continue;
    b.cx = (x1 + x2) / 2;
    b.cy = (y1 + y2) / 2;
    b.w = x2 - x1;
    b.h = y2 - y1;
    kept.push_back(b);
  }
  return kept;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

struct LoadedDataset {
  std::vector<Image> images;           // all entries, annotations attached
  std::vector<size_t> train, val, test;
  std::vector<double> sample_weight;   // mosaic sampling weight per image
  std::vector<double> cumulative;      // over train images
};

LoadedDataset load_into_memory(const DatasetManifest& manifest,
                               const std::vector<double>& mosaic_weights) {
  LoadedDataset ds;
  ds.images.resize(manifest.entries.size());
  parallel_for(int64_t(manifest.entries.size()), [&](int64_t i) {
    const auto& entry = manifest.entries[size_t(i)];
    Image img = read_png(manifest.root / entry.image);
    img.annotations = load_entry_labels(manifest, entry);
    ds.images[size_t(i)] = std::move(img);
  });
  double min_w = 1.0;
  for (double w : mosaic_weights) min_w = std::min(min_w, w);
  ds.sample_weight.resize(ds.images.size(), min_w);
  for (size_t i = 0; i < ds.images.size(); ++i) {
    double w = 0;
    for (const BBox& b : ds.images[i].annotations)
      w = std::max(w, mosaic_weights[size_t(b.class_id)]);
    if (w > 0) ds.sample_weight[i] = w;
    switch (manifest.entries[i].split) {
      case Split::train: ds.train.push_back(i); break;
      case Split::val: ds.val.push_back(i); break;
      case Split::test: ds.test.push_back(i); break;
      default: ds.train.push_back(i); break;
    }
  }
  double acc = 0;
  for (size_t idx : ds.train) {
    acc += ds.sample_weight[idx];
    ds.cumulative.push_back(acc);
  }
  return ds;
}

size_t weighted_pick(const LoadedDataset& ds, Rng& rng) {
  const double u = rng.uniform() * ds.cumulative.back();
  const auto it = std::lower_bound(ds.cumulative.begin(), ds.cumulative.end(), u);
  const size_t k = size_t(it - ds.cumulative.begin());
  return ds.train[std::min(k, ds.train.size() - 1)];
}

Image make_training_sample(const LoadedDataset& ds, size_t base_index, uint64_t seed,
                           double p_mosaic, double p_mixup, int size,
                           const AugSchedule& sched) {
  Rng rng(seed);
  auto compose = [&](size_t idx) -> Image {
    if (rng.uniform() < p_mosaic) {
      const int grid = sched.mosaic_grid == 9 ? 9 : 4;
      std::vector<Image> sources;
      sources.push_back(ds.images[idx]);
      for (int k = 1; k < grid; ++k) sources.push_back(ds.images[weighted_pick(ds, rng)]);
      return mosaic(sources, rng.next(), size);
    }
    return letterbox(ds.images[idx], size);
  };
  Image sample = compose(base_index);
  if (rng.uniform() < p_mixup) {
    Image other = compose(weighted_pick(ds, rng));
    sample = mixup(sample, other, rng.uniform(0.35, 0.65));
  }
  return color_jitter(sample, rng.next());
}

struct StepLoss {
  ag::Var total;
  double cls = 0, reg = 0, obj = 0;
  int positives = 0;
};

StepLoss build_loss(const ToyModel& model, const std::vector<ToyModel::LevelOut>& levels,
                    const std::vector<std::vector<BBox>>& gts_per_image, int img_size,
                    const FocalParams& focal, const LossWeights& lambdas,
                    const AlignmentParams& assigner, MetricForm form) {
  using namespace ag;
  const int B = int(gts_per_image.size());
  const int C = model.num_classes;

  struct LevelData {
    Var cls_prob, obj_prob;
    DecodedMaps maps;
    int h = 0, w = 0;
  };
  std::vector<LevelData> data;
  int64_t total_cells = 0;
  for (const auto& lv : levels) {
    LevelData d;
    d.cls_prob = sigmoid(lv.cls);
    d.obj_prob = sigmoid(lv.obj);
    d.maps = decode_maps(lv, img_size);
    d.h = lv.cls.value().extent(2);
    d.w = lv.cls.value().extent(3);
    data.push_back(d);
    total_cells += int64_t(B) * d.h * d.w;
  }

  // Per-image assignment over the decoded (detached) predictions.
  struct CellRef {
    int level, flat;  // flat index into the level's (B,1,h,w) maps
  };
  std::vector<Tensor> pos_mask, alpha_map, obj_target;
  for (const auto& d : data) {
    pos_mask.push_back(Tensor::zeros({B, C, d.h, d.w}));
    alpha_map.push_back(Tensor::full({B, C, d.h, d.w}, 1.0f));
    obj_target.push_back(Tensor::zeros({B, 1, d.h, d.w}));
  }
  std::vector<std::vector<int64_t>> reg_idx(data.size());
  std::vector<std::vector<float>> reg_gcx(data.size()), reg_gcy(data.size()),
      reg_gw(data.size()), reg_gh(data.size());
  int total_positives = 0;

  for (int b = 0; b < B; ++b) {
    const auto& gts = gts_per_image[size_t(b)];
    if (gts.empty()) continue;
    std::vector<Prediction> preds;
    std::vector<CellRef> refs;
    for (int l = 0; l < int(data.size()); ++l) {
      const auto& d = data[size_t(l)];
      for (int y = 0; y < d.h; ++y)
        for (int x = 0; x < d.w; ++x) {
          const int flat = (b * d.h + y) * d.w + x;
          Prediction p;
          p.box.cx = d.maps.cx.value()[flat];
          p.box.cy = d.maps.cy.value()[flat];
          p.box.w = std::max(1e-4f, d.maps.w.value()[flat]);
          p.box.h = std::max(1e-4f, d.maps.h.value()[flat]);
          p.box.conf = d.obj_prob.value()[flat];
          p.class_scores.resize(size_t(C));
          for (int c = 0; c < C; ++c)
            p.class_scores[size_t(c)] = d.cls_prob.value().at(b, c, y, x);
          preds.push_back(std::move(p));
          refs.push_back({l, flat});
        }
    }
    const AssignmentResult assignment = assign(preds, gts, assigner, form);
    for (size_t p = 0; p < preds.size(); ++p) {
      const auto& entry = assignment.preds[p];
      if (!entry.positive) continue;
      const CellRef ref = refs[p];
      const auto& d = data[size_t(ref.level)];
      const BBox& gt = gts[size_t(entry.matched_gt)];
      const int y = (ref.flat % (d.h * d.w)) / d.w;
      const int x = ref.flat % d.w;
      pos_mask[size_t(ref.level)].at(b, gt.class_id, y, x) = 1.0f;
      if (!focal.class_weights.empty())
        alpha_map[size_t(ref.level)].at(b, gt.class_id, y, x) =
            float(focal.class_weights[size_t(gt.class_id)]);
      obj_target[size_t(ref.level)][ref.flat] = 1.0f;
      reg_idx[size_t(ref.level)].push_back(ref.flat);
      reg_gcx[size_t(ref.level)].push_back(float(gt.cx));
      reg_gcy[size_t(ref.level)].push_back(float(gt.cy));
      reg_gw[size_t(ref.level)].push_back(float(gt.w));
      reg_gh[size_t(ref.level)].push_back(float(gt.h));
      ++total_positives;
    }
  }

  // Classification: focal terms over every (cell, class) pair.
  Var cls_sum;
  Var obj_sum;
  for (size_t l = 0; l < data.size(); ++l) {
    const auto& d = data[l];
    Var pos = constant(pos_mask[l]);
    Tensor neg_t = pos_mask[l];
    for (int64_t i = 0; i < neg_t.size(); ++i) neg_t[i] = 1.0f - neg_t[i];
    Var terms = add(mul(pos, focal_pos_terms(d.cls_prob, alpha_map[l], focal.gamma)),
                    mul(constant(neg_t), focal_neg_terms(d.cls_prob, focal.gamma)));
    Var s = sum(terms);
    cls_sum = cls_sum.defined() ? add(cls_sum, s) : s;

    Var o = sum(bce_terms(d.obj_prob, obj_target[l]));
    obj_sum = obj_sum.defined() ? add(obj_sum, o) : o;
  }
  Var cls_loss = mul_scalar(cls_sum, 1.0f / float(total_cells));
  Var obj_loss = mul_scalar(obj_sum, 1.0f / float(total_cells));

  // Regression over positives only.
  Var reg_loss;
  if (total_positives > 0) {
    std::vector<Var> parts;
    for (size_t l = 0; l < data.size(); ++l) {
      if (reg_idx[l].empty()) continue;
      const auto& d = data[l];
      const int n = int(reg_idx[l].size());
      Var pcx = gather(d.maps.cx, reg_idx[l]);
      Var pcy = gather(d.maps.cy, reg_idx[l]);
      Var pw = gather(d.maps.w, reg_idx[l]);
      Var ph = gather(d.maps.h, reg_idx[l]);
      parts.push_back(siou_terms(pcx, pcy, pw, ph, Tensor({n}, reg_gcx[l]),
                                 Tensor({n}, reg_gcy[l]), Tensor({n}, reg_gw[l]),
                                 Tensor({n}, reg_gh[l])));
    }
    reg_loss = mul_scalar(sum(concat_flat(parts)), 1.0f / float(total_positives));
  } else {
    reg_loss = constant(Tensor::scalar(0.0f));
  }

  StepLoss out;
  out.cls = cls_loss.item();
  out.reg = reg_loss.item();
  out.obj = obj_loss.item();
  out.positives = total_positives;
  out.total = add(add(mul_scalar(cls_loss, float(lambdas.cls)),
                      mul_scalar(reg_loss, float(lambdas.reg))),
                  mul_scalar(obj_loss, float(lambdas.obj)));
  return out;
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const SyntheticSpec& spec, const fs::path& out_dir) {
  cfg.validate();
  fs::create_directories(out_dir);

  TrainResult result;
  result.dataset_dir = out_dir / "dataset";
  DatasetManifest manifest = build_synthetic_dataset(spec, derive_seed(cfg.seed, 1),
                                                     result.dataset_dir);

  FocalParams focal;
  focal.gamma = 2.0;
  focal.class_weights = calculate_class_weights(manifest.class_counts);
  const std::vector<double> mosaic_weights = adjust_mosaic_weights(
      manifest.class_counts, cfg.boosted_classes, cfg.mosaic_class_boost);

  LoadedDataset ds = load_into_memory(manifest, mosaic_weights);
  check(!ds.train.empty(), "train: empty training split");

  ToyModel model = ToyModel::create(int(manifest.class_names.size()), cfg.use_c2psa,
                                    derive_seed(cfg.seed, 2));
  Sgd opt(model.params(), cfg.momentum, cfg.weight_decay);

  std::ofstream log_stream(out_dir / "train_log.jsonl");
  check(log_stream.good(), "train: cannot write log under ", out_dir.string());

  const int steps = std::max(1, int(ds.train.size()) / cfg.batch_size);
  double last_total = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_schedule(epoch, cfg);
    const int size = progressive_size(epoch, cfg);
    const auto [p_mosaic, p_mixup] = adjust_augmentation(epoch, cfg.epochs, cfg.aug);

    // Epoch-level shuffle of the training indices.
    std::vector<size_t> order = ds.train;
    Rng shuffle_rng(derive_seed(cfg.seed, 3, uint64_t(epoch)));
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[size_t(shuffle_rng.uniform_int(0, int(i - 1)))]);

    EpochLog entry;
    entry.epoch = epoch;
    entry.lr = lr;
    entry.img_size = size;
    entry.p_mosaic = p_mosaic;
    entry.p_mixup = p_mixup;
    entry.loss.weights = cfg.loss_weights;

    for (int step = 0; step < steps; ++step) {
      const int B = cfg.batch_size;
      std::vector<Image> batch(static_cast<size_t>(B));
      std::vector<size_t> batch_indices(static_cast<size_t>(B));
      parallel_for(B, [&](int64_t slot) {
        const size_t base = order[size_t((step * B + slot) % int(order.size()))];
        batch_indices[size_t(slot)] = base;
        batch[size_t(slot)] = make_training_sample(
            ds, base, derive_seed(cfg.seed, uint64_t(epoch) << 20 | uint64_t(step),
                                  uint64_t(slot) + 0x51),
            p_mosaic, p_mixup, size, cfg.aug);
      });

      Tensor input({B, 3, size, size});
      std::vector<std::vector<BBox>> gts(static_cast<size_t>(B));
      for (int b = 0; b < B; ++b) {
        const Tensor t = image_to_tensor(batch[size_t(b)]);
        std::copy_n(t.data(), t.size(), input.data() + int64_t(b) * t.size());
        gts[size_t(b)] = batch[size_t(b)].annotations;
      }

      const auto levels = model.forward(ag::constant(input), false);
      StepLoss loss = build_loss(model, levels, gts, size, focal, cfg.loss_weights,
                                 cfg.assigner, cfg.assigner_form);
      last_total = loss.total.item();
      if (!std::isfinite(last_total)) {
        json dump{{"epoch", epoch}, {"step", step},       {"lr", lr},
                  {"img_size", size}, {"cls", loss.cls},  {"reg", loss.reg},
                  {"obj", loss.obj},  {"batch", batch_indices}};
        std::ofstream diag(out_dir / "diagnostic.json");
        diag << dump.dump(2) << "\n";
        fail("train: non-finite loss at epoch ", epoch, " step ", step,
             "; diagnostic written to ", (out_dir / "diagnostic.json").string());
      }
      ag::backward(loss.total);
      opt.step(lr);
      opt.zero_grad();

      entry.loss.cls += loss.cls / steps;
      entry.loss.reg += loss.reg / steps;
      entry.loss.obj += loss.obj / steps;
    }
    entry.loss.total = cfg.loss_weights.cls * entry.loss.cls +
                       cfg.loss_weights.reg * entry.loss.reg +
                       cfg.loss_weights.obj * entry.loss.obj;
    result.log.push_back(entry);
    log_stream << json{{"epoch", entry.epoch},
                       {"lr", entry.lr},
                       {"img_size", entry.img_size},
                       {"p_mosaic", entry.p_mosaic},
                       {"p_mixup", entry.p_mixup},
                       {"cls", entry.loss.cls},
                       {"reg", entry.loss.reg},
                       {"obj", entry.loss.obj},
                       {"total", entry.loss.total}}
                       .dump()
               << "\n";
  }
  result.final_loss = last_total;

  // Held-out evaluation on the test split.
  BoxesByImage det_map, gt_map;
  std::vector<std::vector<BBox>> det_results(ds.test.size());
  parallel_for(int64_t(ds.test.size()), [&](int64_t i) {
    det_results[size_t(i)] =
        predict(model, ds.images[ds.test[size_t(i)]], cfg.img_size_end, 0.05, 0.5, false);
  });
  for (size_t i = 0; i < ds.test.size(); ++i) {
    const auto& entry = manifest.entries[ds.test[i]];
    det_map[entry.image] = det_results[i];
    gt_map[entry.image] = ds.images[ds.test[i]].annotations;
  }
  result.report = map_summary(det_map, gt_map, manifest.class_names);
  result.final_map50 = result.report.all.ap50;

  result.checkpoint_dir = out_dir / "checkpoint";
  model.save(result.checkpoint_dir);
  {
    std::ofstream os(out_dir / "report.txt");
    os << result.report.to_text();
    save_report_json(result.report, out_dir / "report.json");
    std::ofstream csv(out_dir / "report.csv");
    csv << result.report.to_csv();
  }
  return result;
}

}  // namespace ssd
