#include "ssd/augment.hpp"

#include <algorithm>
#include <cmath>

#include "ssd/losses.hpp"
#include "ssd/rng.hpp"

namespace ssd {

namespace {

uint8_t to_byte(double v) { return uint8_t(std::clamp(std::floor(v + 0.5), 0.0, 255.0)); }

// Bilinear resample with half-pixel centers.
Image resize_bilinear(const Image& src, int dst_w, int dst_h) {
  Image dst;
  dst.width = dst_w;
  dst.height = dst_h;
  dst.pixels.resize(size_t(3) * dst_w * dst_h);
  const double sx_ratio = double(src.width) / dst_w;
  const double sy_ratio = double(src.height) / dst_h;
  for (int y = 0; y < dst_h; ++y) {
    double sy = (y + 0.5) * sy_ratio - 0.5;
    sy = std::clamp(sy, 0.0, double(src.height - 1));
    const int y0 = int(sy);
    const int y1 = std::min(y0 + 1, src.height - 1);
    const double fy = sy - y0;
    for (int x = 0; x < dst_w; ++x) {
      double sx = (x + 0.5) * sx_ratio - 0.5;
      sx = std::clamp(sx, 0.0, double(src.width - 1));
      const int x0 = int(sx);
      const int x1 = std::min(x0 + 1, src.width - 1);
      const double fx = sx - x0;
      for (int c = 0; c < 3; ++c) {
        const double top = src.at(x0, y0, c) * (1 - fx) + src.at(x1, y0, c) * fx;
        const double bot = src.at(x0, y1, c) * (1 - fx) + src.at(x1, y1, c) * fx;
        dst.at(x, y, c) = to_byte(top * (1 - fy) + bot * fy);
      }
    }
  }
  return dst;
}

struct LetterboxGeometry {
  double scale;
  int content_w, content_h;
  int pad_x, pad_y;
};

LetterboxGeometry letterbox_geometry(int w, int h, int target_w, int target_h) {
  LetterboxGeometry g;
  g.scale = std::min(double(target_w) / w, double(target_h) / h);
  g.content_w = std::max(1, int(std::lround(w * g.scale)));
  g.content_h = std::max(1, int(std::lround(h * g.scale)));
  g.pad_x = (target_w - g.content_w) / 2;
  g.pad_y = (target_h - g.content_h) / 2;
  return g;
}

}  // namespace

Image letterbox_rect(const Image& img, int target_w, int target_h, uint8_t pad_value) {
  check(img.width > 0 && img.height > 0, "letterbox: empty image");
  check(target_w > 0 && target_h > 0, "letterbox: target must be positive");
  const LetterboxGeometry g = letterbox_geometry(img.width, img.height, target_w, target_h);

  Image out = Image::solid(target_w, target_h, pad_value, pad_value, pad_value);
  Image content = (g.content_w == img.width && g.content_h == img.height)
                      ? img
                      : resize_bilinear(img, g.content_w, g.content_h);
  for (int y = 0; y < g.content_h; ++y)
    for (int x = 0; x < g.content_w; ++x)
      for (int c = 0; c < 3; ++c) out.at(g.pad_x + x, g.pad_y + y, c) = content.at(x, y, c);

  out.annotations.reserve(img.annotations.size());
  for (const BBox& b : img.annotations) {
    BBox nb = b;
    nb.cx = (b.cx * img.width * g.scale + g.pad_x) / target_w;
    nb.cy = (b.cy * img.height * g.scale + g.pad_y) / target_h;
    nb.w = b.w * img.width * g.scale / target_w;
    nb.h = b.h * img.height * g.scale / target_h;
    out.annotations.push_back(nb);
  }
  return out;
}

Image letterbox(const Image& img, int target, uint8_t pad_value) {
  return letterbox_rect(img, target, target, pad_value);
}

BBox unletterbox_box(const BBox& box, int orig_w, int orig_h, int target) {
  const LetterboxGeometry g = letterbox_geometry(orig_w, orig_h, target, target);
  BBox out = box;
  out.cx = (box.cx * target - g.pad_x) / (orig_w * g.scale);
  out.cy = (box.cy * target - g.pad_y) / (orig_h * g.scale);
  out.w = box.w * target / (orig_w * g.scale);
  out.h = box.h * target / (orig_h * g.scale);
  return out;
}

namespace {

struct TilePlacement {
  const Image* src;
  int x0, y0;          // tile origin in canvas coords (may be negative)
  int tile_w, tile_h;  // tile extent before cropping
};

void blit_tile(Image& canvas, const TilePlacement& tile) {
  Image content = letterbox_rect(*tile.src, tile.tile_w, tile.tile_h);
  const int vx0 = std::max(tile.x0, 0), vy0 = std::max(tile.y0, 0);
  const int vx1 = std::min(tile.x0 + tile.tile_w, canvas.width);
  const int vy1 = std::min(tile.y0 + tile.tile_h, canvas.height);
  for (int y = vy0; y < vy1; ++y)
    for (int x = vx0; x < vx1; ++x)
      for (int c = 0; c < 3; ++c)
        canvas.at(x, y, c) = content.at(x - tile.x0, y - tile.y0, c);

  // Boxes: tile-normalized -> canvas pixels, clipped to the visible rect.
  for (const BBox& b : content.annotations) {
    const double cx = tile.x0 + b.cx * tile.tile_w;
    const double cy = tile.y0 + b.cy * tile.tile_h;
    const double w = b.w * tile.tile_w;
    const double h = b.h * tile.tile_h;
    const double x1 = std::max(cx - w / 2, double(vx0));
    const double y1 = std::max(cy - h / 2, double(vy0));
    const double x2 = std::min(cx + w / 2, double(vx1));
    const double y2 = std::min(cy + h / 2, double(vy1));
    if (x2 <= x1 || y2 <= y1) continue;
    const double clipped = (x2 - x1) * (y2 - y1);
    if (clipped < 0.1 * (w * h)) continue;  // drop slivers
    BBox nb = b;
    nb.cx = (x1 + x2) / 2 / canvas.width;
    nb.cy = (y1 + y2) / 2 / canvas.height;
    nb.w = (x2 - x1) / canvas.width;
    nb.h = (y2 - y1) / canvas.height;
    canvas.annotations.push_back(nb);
  }
}

}  // namespace

std::pair<int, int> mosaic4_center(uint64_t seed, int target) {
  Rng rng(seed);
  const int mx = rng.uniform_int(target / 4, 3 * target / 4);
  const int my = rng.uniform_int(target / 4, 3 * target / 4);
  return {mx, my};
}

Image mosaic(const std::vector<Image>& imgs, uint64_t seed, int target) {
  check(imgs.size() == 4 || imgs.size() == 9, "mosaic: expected 4 or 9 images, got ",
        imgs.size());
  check(target >= 8, "mosaic: target too small");
  Image canvas = Image::solid(target, target, 114, 114, 114);

  if (imgs.size() == 4) {
    const auto [mx, my] = mosaic4_center(seed, target);
    const int half = target / 2;
    const TilePlacement tiles[4] = {
        {&imgs[0], mx - half, my - half, half, half},  // top-left
        {&imgs[1], mx, my - half, half, half},         // top-right
        {&imgs[2], mx - half, my, half, half},         // bottom-left
        {&imgs[3], mx, my, half, half},                // bottom-right
    };
    for (const auto& tile : tiles) blit_tile(canvas, tile);
  } else {
    // 3x3 equal cells (no jitter); boundaries rounded to the nearest pixel.
    int bounds[4];
    for (int i = 0; i <= 3; ++i) bounds[i] = int(std::lround(double(i) * target / 3.0));
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) {
        const TilePlacement tile = {&imgs[size_t(3 * r + c)], bounds[c], bounds[r],
                                    bounds[c + 1] - bounds[c], bounds[r + 1] - bounds[r]};
        blit_tile(canvas, tile);
      }
  }
  return canvas;
}

Image mixup(const Image& a, const Image& b, double lambda) {
  check(a.width == b.width && a.height == b.height, "mixup: dimension mismatch ", a.width, "x",
        a.height, " vs ", b.width, "x", b.height);
  check(lambda >= 0 && lambda <= 1, "mixup: lambda must lie in [0,1], got ", lambda);
  Image out;
  out.width = a.width;
  out.height = a.height;
  out.pixels.resize(a.pixels.size());
  for (size_t i = 0; i < a.pixels.size(); ++i)
    out.pixels[i] = to_byte(lambda * a.pixels[i] + (1.0 - lambda) * b.pixels[i]);
  out.annotations = a.annotations;
  out.annotations.insert(out.annotations.end(), b.annotations.begin(), b.annotations.end());
  return out;
}

std::pair<double, double> adjust_augmentation(int epoch, int total_epochs,
                                              const AugSchedule& sched) {
  check(total_epochs > 0, "adjust_augmentation: total_epochs must be positive");
  check(epoch >= 0 && epoch <= total_epochs, "adjust_augmentation: epoch ", epoch,
        " outside [0, ", total_epochs, "]");
  check(sched.decay_start_frac > 0 && sched.decay_start_frac < 1,
        "adjust_augmentation: decay_start_frac must lie in (0,1)");
  const double decay_start = sched.decay_start_frac * total_epochs;
  if (double(epoch) < decay_start) return {sched.p_mosaic0, sched.p_mixup0};
  const double keep = double(total_epochs - epoch) / (total_epochs - decay_start);
  return {sched.p_mosaic0 * keep, sched.p_mixup0 * keep};
}

std::vector<double> adjust_mosaic_weights(const std::vector<int64_t>& class_counts,
                                          const std::set<int>& boosted_classes, double boost) {
  check(!class_counts.empty(), "adjust_mosaic_weights: empty counts");
  check(boost >= 1.0, "adjust_mosaic_weights: boost must be >= 1, got ", boost);
  std::vector<double> weights = calculate_class_weights(class_counts);
  for (int c : boosted_classes) {
    check(c >= 0 && size_t(c) < weights.size(), "adjust_mosaic_weights: boosted class ", c,
          " outside ", weights.size(), " classes");
    weights[size_t(c)] *= boost;
  }
  double total = 0;
  for (double w : weights) total += w;
  for (double& w : weights) w /= total;
  return weights;
}

namespace {

void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
  const double mx = std::max({r, g, b});
  const double mn = std::min({r, g, b});
  const double d = mx - mn;
  v = mx;
  s = mx == 0 ? 0 : d / mx;
  if (d == 0) {
    h = 0;
  } else if (mx == r) {
    h = 60.0 * std::fmod((g - b) / d, 6.0);
  } else if (mx == g) {
    h = 60.0 * ((b - r) / d + 2.0);
  } else {
    h = 60.0 * ((r - g) / d + 4.0);
  }
  if (h < 0) h += 360.0;
}

void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
  const double c = v * s;
  const double hp = h / 60.0;
  const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
  double r1 = 0, g1 = 0, b1 = 0;
  if (hp < 1) {
    r1 = c; g1 = x;
  } else if (hp < 2) {
    r1 = x; g1 = c;
  } else if (hp < 3) {
    g1 = c; b1 = x;
  } else if (hp < 4) {
    g1 = x; b1 = c;
  } else if (hp < 5) {
    r1 = x; b1 = c;
  } else {
    r1 = c; b1 = x;
  }
  const double m = v - c;
  r = r1 + m;
  g = g1 + m;
  b = b1 + m;
}

}  // namespace

Image color_jitter(const Image& img, uint64_t seed, const JitterGains& gains) {
  if (gains.h == 0 && gains.s == 0 && gains.v == 0) return img;
  Rng rng(seed);
  const double gh = 1.0 + rng.uniform(-1.0, 1.0) * gains.h;
  const double gs = 1.0 + rng.uniform(-1.0, 1.0) * gains.s;
  const double gv = 1.0 + rng.uniform(-1.0, 1.0) * gains.v;

  Image out = img;
  for (int64_t i = 0; i < int64_t(img.width) * img.height; ++i) {
    const double r = img.pixels[size_t(3 * i)] / 255.0;
    const double g = img.pixels[size_t(3 * i + 1)] / 255.0;
    const double b = img.pixels[size_t(3 * i + 2)] / 255.0;
    double h, s, v;
    rgb_to_hsv(r, g, b, h, s, v);
    h = std::fmod(h * gh, 360.0);
    if (h < 0) h += 360.0;
    s = std::clamp(s * gs, 0.0, 1.0);
    v = std::clamp(v * gv, 0.0, 1.0);
    double nr, ng, nb;
    hsv_to_rgb(h, s, v, nr, ng, nb);
    out.pixels[size_t(3 * i)] = to_byte(nr * 255.0);
    out.pixels[size_t(3 * i + 1)] = to_byte(ng * 255.0);
    out.pixels[size_t(3 * i + 2)] = to_byte(nb * 255.0);
  }
  return out;
}

}  // namespace ssd
