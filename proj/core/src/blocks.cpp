#include "ssd/blocks.hpp"

#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "ssd/rng.hpp"

namespace ssd {

namespace {

ag::Var conv_param(std::vector<int> shape, Rng& rng) {
  int fan_in = shape[1] * shape[2] * shape[3];
  float sd = std::sqrt(2.0f / float(fan_in));
  return ag::param(Tensor::randn(std::move(shape), rng, sd));
}

ag::Var zero_param(int n) { return ag::param(Tensor::zeros({n})); }

void check_finite(const Tensor& t, const char* who) {
  for (int64_t i = 0; i < t.size(); ++i)
    check(std::isfinite(t[i]), who, ": non-finite parameter");
}

}  // namespace

// ---------------------------------------------------------------------------
// RepConv
// ---------------------------------------------------------------------------

RepConv RepConv::create(int in_ch, int out_ch, bool identity, Rng& rng) {
  check(in_ch > 0 && out_ch > 0, "RepConv: channel counts must be positive");
  check(!identity || in_ch == out_ch, "RepConv: identity branch requires in_ch == out_ch, got ",
        in_ch, " vs ", out_ch);
  RepConv block;
  block.in_ch = in_ch;
  block.out_ch = out_ch;
  block.identity_enabled = identity;
  block.w3 = conv_param({out_ch, in_ch, 3, 3}, rng);
  block.b3 = zero_param(out_ch);
  block.w1 = conv_param({out_ch, in_ch, 1, 1}, rng);
  block.b1 = zero_param(out_ch);
  if (identity) block.b_id = zero_param(out_ch);
  return block;
}

ag::Var RepConv::forward(const ag::Var& x) const {
  check(x.value().extent(1) == in_ch, "RepConv: input has ", x.value().extent(1),
        " channels, block expects ", in_ch);
  ag::Var y = ag::add(ag::conv2d(x, w3, b3, 1, 1), ag::conv2d(x, w1, b1, 1, 0));
  if (identity_enabled) y = ag::add(y, ag::add_channel_bias(x, b_id));
  return y;
}

Tensor RepConv::forward(const Tensor& x, Mode mode) const {
  if (mode == Mode::train) return forward(ag::constant(x)).value();
  check(merged.has_value(), "RepConv: merged-mode forward before merge()");
  return conv2d(x, merged->first, merged->second, 1, 1);
}

void RepConv::merge() {
  check_finite(w3.value(), "RepConv::merge");
  check_finite(w1.value(), "RepConv::merge");
  check(!identity_enabled || in_ch == out_ch,
        "RepConv::merge: identity branch with channel mismatch ", in_ch, " vs ", out_ch);

  Tensor kernel = w3.value();
  for (int o = 0; o < out_ch; ++o)
    for (int i = 0; i < in_ch; ++i) kernel.at(o, i, 1, 1) += w1.value().at(o, i, 0, 0);
  if (identity_enabled)
    for (int c = 0; c < out_ch; ++c) kernel.at(c, c, 1, 1) += 1.0f;

  Tensor bias = b3.value();
  for (int o = 0; o < out_ch; ++o) {
    bias[o] += b1.value()[o];
    if (identity_enabled) bias[o] += b_id.value()[o];
  }
  merged = {std::move(kernel), std::move(bias)};
}

std::vector<ag::Var> RepConv::params() {
  std::vector<ag::Var> out = {w3, b3, w1, b1};
  if (identity_enabled) out.push_back(b_id);
  return out;
}

// ---------------------------------------------------------------------------
// SeAttention
// ---------------------------------------------------------------------------

SeAttention SeAttention::create(int channels, int reduction, Rng& rng) {
  check(channels > 0 && reduction > 0, "SeAttention: channels and reduction must be positive");
  SeAttention block;
  block.channels = channels;
  block.reduction = reduction;
  block.bottleneck = std::max(1, channels / reduction);
  block.w1 = conv_param({block.bottleneck, channels, 1, 1}, rng);
  block.b1 = zero_param(block.bottleneck);
  block.w2 = conv_param({channels, block.bottleneck, 1, 1}, rng);
  block.b2 = zero_param(channels);
  return block;
}

ag::Var SeAttention::forward(const ag::Var& x) const {
  check(x.value().extent(1) == channels, "SeAttention: input has ", x.value().extent(1),
        " channels, block expects ", channels);
  ag::Var squeezed = ag::global_avg_pool(x);
  ag::Var hidden = ag::relu(ag::conv2d(squeezed, w1, b1));
  ag::Var scale = ag::sigmoid(ag::conv2d(hidden, w2, b2));
  return ag::scale_per_channel(x, scale);
}

Tensor SeAttention::forward(const Tensor& x) const { return forward(ag::constant(x)).value(); }

std::vector<ag::Var> SeAttention::params() { return {w1, b1, w2, b2}; }

// ---------------------------------------------------------------------------
// CbamSpatial
// ---------------------------------------------------------------------------

CbamSpatial CbamSpatial::create(int kernel, Rng& rng) {
  check(kernel > 0 && kernel % 2 == 1, "CbamSpatial: spatial kernel must be odd, got ", kernel);
  CbamSpatial block;
  block.kernel = kernel;
  block.w = conv_param({1, 2, kernel, kernel}, rng);
  block.b = zero_param(1);
  return block;
}

ag::Var CbamSpatial::forward(const ag::Var& x) const {
  ag::Var stats = ag::concat_channels(ag::channel_mean(x), ag::channel_max(x));
  ag::Var mask = ag::sigmoid(ag::conv2d(stats, w, b, 1, kernel / 2));
  return ag::mul_spatial(x, mask);
}

Tensor CbamSpatial::forward(const Tensor& x) const { return forward(ag::constant(x)).value(); }

std::vector<ag::Var> CbamSpatial::params() { return {w, b}; }

// ---------------------------------------------------------------------------
// C2psa
// ---------------------------------------------------------------------------

C2psa C2psa::create(int channels, Rng& rng, int reduction, int spatial_kernel) {
  check(channels > 0 && channels % 2 == 0, "C2psa: channel count must be even, got ", channels);
  C2psa block;
  block.channels = channels;
  block.se = SeAttention::create(channels / 2, reduction, rng);
  block.spatial = CbamSpatial::create(spatial_kernel, rng);
  block.w_fuse = conv_param({channels, channels, 1, 1}, rng);
  block.b_fuse = zero_param(channels);
  return block;
}

ag::Var C2psa::forward(const ag::Var& x) const {
  check(x.value().extent(1) == channels, "C2psa: input has ", x.value().extent(1),
        " channels, block expects ", channels);
  const int half = channels / 2;
  ag::Var xa = ag::slice_channels(x, 0, half);
  ag::Var xb = ag::slice_channels(x, half, channels);
  ag::Var attended = spatial.forward(se.forward(xb));
  ag::Var yb = ag::add(attended, xb);  // residual on the attended branch
  return ag::conv2d(ag::concat_channels(xa, yb), w_fuse, b_fuse);
}

Tensor C2psa::forward(const Tensor& x) const { return forward(ag::constant(x)).value(); }

std::vector<ag::Var> C2psa::params() {
  std::vector<ag::Var> out = se.params();
  for (auto& p : spatial.params()) out.push_back(p);
  out.push_back(w_fuse);
  out.push_back(b_fuse);
  return out;
}

// ---------------------------------------------------------------------------
// GhostConv
// ---------------------------------------------------------------------------

GhostConv GhostConv::create(int in_ch, int out_ch, double primary_ratio, Rng& rng) {
  check(in_ch > 0 && out_ch > 0, "GhostConv: channel counts must be positive");
  check(primary_ratio > 0 && primary_ratio <= 1, "GhostConv: primary_ratio must lie in (0,1]");
  GhostConv block;
  block.in_ch = in_ch;
  block.out_ch = out_ch;
  block.primary_ratio = primary_ratio;
  block.primary_ch = int(std::ceil(double(out_ch) * primary_ratio));
  check(block.primary_ch >= 1, "GhostConv: out_ch * primary_ratio must be >= 1");
  block.wp = conv_param({block.primary_ch, in_ch, 1, 1}, rng);
  block.bp = zero_param(block.primary_ch);
  const int ghost = out_ch - block.primary_ch;
  if (ghost > 0) {
    block.wc = conv_param({ghost, 1, 3, 3}, rng);
    block.bc = zero_param(ghost);
  }
  return block;
}

ag::Var GhostConv::forward(const ag::Var& x) const {
  check(x.value().extent(1) == in_ch, "GhostConv: input has ", x.value().extent(1),
        " channels, block expects ", in_ch);
  ag::Var primary = ag::conv2d(x, wp, bp);
  const int ghost = out_ch - primary_ch;
  if (ghost == 0) return primary;
  // Ghost channel j reads primary channel j % primary_ch.
  ag::Var source;
  int remaining = ghost;
  while (remaining > 0) {
    const int take = std::min(remaining, primary_ch);
    ag::Var part = take == primary_ch ? primary : ag::slice_channels(primary, 0, take);
    source = source.defined() ? ag::concat_channels(source, part) : part;
    remaining -= take;
  }
  ag::Var cheap = ag::depthwise_conv2d(source, wc, bc, 1, 1);
  return ag::concat_channels(primary, cheap);
}

Tensor GhostConv::forward(const Tensor& x) const { return forward(ag::constant(x)).value(); }

int64_t GhostConv::param_count() const {
  int64_t n = wp.value().size() + bp.value().size();
  if (wc.defined()) n += wc.value().size() + bc.value().size();
  return n;
}

std::vector<ag::Var> GhostConv::params() {
  std::vector<ag::Var> out = {wp, bp};
  if (wc.defined()) {
    out.push_back(wc);
    out.push_back(bc);
  }
  return out;
}

// ---------------------------------------------------------------------------
// GsConv
// ---------------------------------------------------------------------------

GsConv GsConv::create(int in_ch, int out_ch, Rng& rng) {
  check(in_ch > 0 && out_ch > 0, "GsConv: channel counts must be positive");
  check(out_ch % 2 == 0, "GsConv: output channels must be even for the 2-group shuffle, got ",
        out_ch);
  GsConv block;
  block.in_ch = in_ch;
  block.out_ch = out_ch;
  block.wd = conv_param({in_ch, 1, 3, 3}, rng);
  block.bd = zero_param(in_ch);
  block.wp = conv_param({out_ch, in_ch, 1, 1}, rng);
  block.bp = zero_param(out_ch);
  return block;
}

ag::Var GsConv::forward(const ag::Var& x) const {
  check(x.value().extent(1) == in_ch, "GsConv: input has ", x.value().extent(1),
        " channels, block expects ", in_ch);
  ag::Var mixed = ag::conv2d(ag::depthwise_conv2d(x, wd, bd, 1, 1), wp, bp);
  // Interleave the two channel groups: [0, C/2, 1, C/2+1, ...].
  std::vector<int> perm(static_cast<size_t>(out_ch));
  for (int k = 0; k < out_ch / 2; ++k) {
    perm[size_t(2 * k)] = k;
    perm[size_t(2 * k + 1)] = out_ch / 2 + k;
  }
  return ag::permute_channels(mixed, perm);
}

Tensor GsConv::forward(const Tensor& x) const { return forward(ag::constant(x)).value(); }

std::vector<ag::Var> GsConv::params() { return {wd, bd, wp, bp}; }

// ---------------------------------------------------------------------------
// Save / load
// ---------------------------------------------------------------------------

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

void save_named(const fs::path& dir, const std::string& name,
                const std::vector<std::pair<std::string, const ag::Var*>>& tensors,
                json descriptor) {
  json files = json::object();
  for (const auto& [key, var] : tensors) {
    if (!var->defined()) continue;
    const std::string file = name + "." + key + ".ssdt";
    save_tensor(dir / file, var->value());
    files[key] = file;
  }
  descriptor["tensors"] = files;
  std::ofstream os(dir / (name + ".json"));
  check(os.good(), "save_block: cannot open ", (dir / (name + ".json")).string());
  os << descriptor.dump(2) << "\n";
}

void load_named(const fs::path& dir, const json& descriptor,
                const std::vector<std::pair<std::string, ag::Var*>>& tensors) {
  const auto& files = descriptor.at("tensors");
  for (const auto& [key, var] : tensors) {
    if (!files.contains(key)) continue;
    Tensor t = load_tensor(dir / files.at(key).get<std::string>());
    check(var->defined() && t.same_shape(var->value()), "load_block: tensor ", key,
          " has shape ", t.shape_str(), ", expected ", var->value().shape_str());
    var->mutable_value() = std::move(t);
  }
}

}  // namespace

void save_block(const fs::path& dir, const std::string& name, const Block& block) {
  fs::create_directories(dir);
  std::visit(
      [&](const auto& b) {
        using T = std::decay_t<decltype(b)>;
        if constexpr (std::is_same_v<T, RepConv>) {
          save_named(dir, name,
                     {{"w3", &b.w3}, {"b3", &b.b3}, {"w1", &b.w1}, {"b1", &b.b1}, {"b_id", &b.b_id}},
                     json{{"kind", "repconv"},
                          {"in_ch", b.in_ch},
                          {"out_ch", b.out_ch},
                          {"identity", b.identity_enabled}});
        } else if constexpr (std::is_same_v<T, SeAttention>) {
          save_named(dir, name, {{"w1", &b.w1}, {"b1", &b.b1}, {"w2", &b.w2}, {"b2", &b.b2}},
                     json{{"kind", "se"}, {"channels", b.channels}, {"reduction", b.reduction}});
        } else if constexpr (std::is_same_v<T, CbamSpatial>) {
          save_named(dir, name, {{"w", &b.w}, {"b", &b.b}},
                     json{{"kind", "cbam_spatial"}, {"kernel", b.kernel}});
        } else if constexpr (std::is_same_v<T, C2psa>) {
          save_named(dir, name,
                     {{"se.w1", &b.se.w1},
                      {"se.b1", &b.se.b1},
                      {"se.w2", &b.se.w2},
                      {"se.b2", &b.se.b2},
                      {"sp.w", &b.spatial.w},
                      {"sp.b", &b.spatial.b},
                      {"w_fuse", &b.w_fuse},
                      {"b_fuse", &b.b_fuse}},
                     json{{"kind", "c2psa"},
                          {"channels", b.channels},
                          {"reduction", b.se.reduction},
                          {"spatial_kernel", b.spatial.kernel}});
        } else if constexpr (std::is_same_v<T, GhostConv>) {
          save_named(dir, name, {{"wp", &b.wp}, {"bp", &b.bp}, {"wc", &b.wc}, {"bc", &b.bc}},
                     json{{"kind", "ghost"},
                          {"in_ch", b.in_ch},
                          {"out_ch", b.out_ch},
                          {"primary_ratio", b.primary_ratio}});
        } else if constexpr (std::is_same_v<T, GsConv>) {
          save_named(dir, name, {{"wd", &b.wd}, {"bd", &b.bd}, {"wp", &b.wp}, {"bp", &b.bp}},
                     json{{"kind", "gsconv"}, {"in_ch", b.in_ch}, {"out_ch", b.out_ch}});
        }
      },
      block);
}

Block load_block(const fs::path& dir, const std::string& name) {
  std::ifstream is(dir / (name + ".json"));
  check(is.good(), "load_block: cannot open ", (dir / (name + ".json")).string());
  json descriptor = json::parse(is);
  const std::string kind = descriptor.at("kind").get<std::string>();
  Rng rng(0);

  if (kind == "repconv") {
    RepConv b = RepConv::create(descriptor.at("in_ch"), descriptor.at("out_ch"),
                                descriptor.at("identity"), rng);
    load_named(dir, descriptor,
               {{"w3", &b.w3}, {"b3", &b.b3}, {"w1", &b.w1}, {"b1", &b.b1}, {"b_id", &b.b_id}});
    return b;
  }
  if (kind == "se") {
    SeAttention b = SeAttention::create(descriptor.at("channels"), descriptor.at("reduction"), rng);
    load_named(dir, descriptor, {{"w1", &b.w1}, {"b1", &b.b1}, {"w2", &b.w2}, {"b2", &b.b2}});
    return b;
  }
  if (kind == "cbam_spatial") {
    CbamSpatial b = CbamSpatial::create(descriptor.at("kernel"), rng);
    load_named(dir, descriptor, {{"w", &b.w}, {"b", &b.b}});
    return b;
  }
  if (kind == "c2psa") {
    C2psa b = C2psa::create(descriptor.at("channels"), rng, descriptor.at("reduction"),
                            descriptor.at("spatial_kernel"));
    load_named(dir, descriptor,
               {{"se.w1", &b.se.w1},
                {"se.b1", &b.se.b1},
                {"se.w2", &b.se.w2},
                {"se.b2", &b.se.b2},
                {"sp.w", &b.spatial.w},
                {"sp.b", &b.spatial.b},
                {"w_fuse", &b.w_fuse},
                {"b_fuse", &b.b_fuse}});
    return b;
  }
  if (kind == "ghost") {
    GhostConv b = GhostConv::create(descriptor.at("in_ch"), descriptor.at("out_ch"),
                                    descriptor.at("primary_ratio"), rng);
    load_named(dir, descriptor, {{"wp", &b.wp}, {"bp", &b.bp}, {"wc", &b.wc}, {"bc", &b.bc}});
    return b;
  }
  if (kind == "gsconv") {
    GsConv b = GsConv::create(descriptor.at("in_ch"), descriptor.at("out_ch"), rng);
    load_named(dir, descriptor, {{"wd", &b.wd}, {"bd", &b.bd}, {"wp", &b.wp}, {"bp", &b.bp}});
    return b;
  }
  fail("load_block: unknown kind '", kind, "'");
}

}  // namespace ssd
