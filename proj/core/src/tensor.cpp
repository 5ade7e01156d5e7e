#include "ssd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "ssd/rng.hpp"

namespace ssd {

namespace {

int64_t product(const std::vector<int>& shape) {
  int64_t p = 1;
  for (int e : shape) p *= e;
  return p;
}

void check_positive_extents(const std::vector<int>& shape) {
  for (int e : shape) check(e > 0, "tensor extent must be positive, got ", e);
}

// Stable sigmoid, clamped into the open interval (0,1) of float32 so the
// output stays strictly between 0 and 1 even where double underflows.
float sigmoid_scalar(float x) {
  double v;
  if (x >= 0) {
    v = 1.0 / (1.0 + std::exp(-double(x)));
  } else {
    double e = std::exp(double(x));
    v = e / (1.0 + e);
  }
  float f = float(v);
  const float lo = std::numeric_limits<float>::denorm_min();
  const float hi = 1.0f - std::numeric_limits<float>::epsilon() / 2;
  return std::min(std::max(f, lo), hi);
}

}  // namespace

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
  check_positive_extents(shape_);
  data_.assign(size_t(product(shape_)), 0.0f);
}

Tensor::Tensor(std::vector<int> shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_positive_extents(shape_);
  check(product(shape_) == int64_t(data_.size()), "tensor shape ", shape_str(),
        " implies ", product(shape_), " elements but ", data_.size(), " given");
}

Tensor Tensor::full(std::vector<int> shape, float value) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), value);
  return t;
}

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, float stddev) {
  Tensor t(std::move(shape));
  for (auto& v : t.data_) v = float(rng.normal() * stddev);
  return t;
}

Tensor Tensor::uniform(std::vector<int> shape, Rng& rng, float lo, float hi) {
  Tensor t(std::move(shape));
  for (auto& v : t.data_) v = float(rng.uniform(lo, hi));
  return t;
}

int Tensor::extent(int axis) const {
  check(axis >= 0 && axis < rank(), "axis ", axis, " out of range for rank ", rank());
  return shape_[size_t(axis)];
}

int64_t Tensor::index4(int n, int c, int h, int w) const {
  const int C = shape_[1], H = shape_[2], W = shape_[3];
  return ((int64_t(n) * C + c) * H + h) * W + w;
}

std::string Tensor::shape_str() const {
  std::string s;
  for (size_t i = 0; i < shape_.size(); ++i) {
    if (i) s += 'x';
    s += std::to_string(shape_[i]);
  }
  return s.empty() ? "scalar" : s;
}

Tensor Tensor::reshaped(std::vector<int> new_shape) const {
  check(product(new_shape) == size(), "reshape from ", shape_str(), " to ",
        Tensor(std::vector<int>(new_shape)).shape_str(), " changes element count");
  return Tensor(std::move(new_shape), data_);
}

// ---------------------------------------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              int stride, int pad) {
  check(input.rank() == 4, "conv2d: input must be NCHW, got ", input.shape_str());
  check(kernel.rank() == 4, "conv2d: kernel must be OIkhkw, got ", kernel.shape_str());
  const int N = input.extent(0), I = input.extent(1), H = input.extent(2), W = input.extent(3);
  const int O = kernel.extent(0), KI = kernel.extent(1), KH = kernel.extent(2), KW = kernel.extent(3);
  check(I == KI, "conv2d: input channel count ", I, " does not match kernel input channels ",
        KI, " (input ", input.shape_str(), ", kernel ", kernel.shape_str(), ")");
  check(KH % 2 == 1 && KW % 2 == 1, "conv2d: kernel spatial extent must be odd, got ",
        kernel.shape_str());
  check(stride >= 1, "conv2d: stride must be >= 1, got ", stride);
  check(pad >= 0, "conv2d: pad must be >= 0, got ", pad);
  if (!bias.empty())
    check(bias.rank() == 1 && bias.extent(0) == O, "conv2d: bias shape ", bias.shape_str(),
          " does not match ", O, " output channels");
  const int HO = (H + 2 * pad - KH) / stride + 1;
  const int WO = (W + 2 * pad - KW) / stride + 1;
  check(HO > 0 && WO > 0, "conv2d: output would be empty for input ", input.shape_str(),
        ", kernel ", kernel.shape_str(), ", stride ", stride, ", pad ", pad);

  Tensor out({N, O, HO, WO});
  if (!bias.empty()) {
    for (int n = 0; n < N; ++n)
      for (int o = 0; o < O; ++o)
        std::fill_n(&out.at(n, o, 0, 0), size_t(HO) * WO, bias[o]);
  }
  for (int n = 0; n < N; ++n) {
    for (int o = 0; o < O; ++o) {
      float* out_plane = &out.at(n, o, 0, 0);
      for (int i = 0; i < I; ++i) {
        const float* in_plane = &input.at(n, i, 0, 0);
        for (int ky = 0; ky < KH; ++ky) {
          for (int kx = 0; kx < KW; ++kx) {
            const float wgt = kernel.at(o, i, ky, kx);
            if (wgt == 0.0f) continue;
            for (int y = 0; y < HO; ++y) {
              const int iy = y * stride + ky - pad;
              if (iy < 0 || iy >= H) continue;
              const float* in_row = in_plane + int64_t(iy) * W;
              float* out_row = out_plane + int64_t(y) * WO;
              for (int x = 0; x < WO; ++x) {
                const int ix = x * stride + kx - pad;
                if (ix < 0 || ix >= W) continue;
                out_row[x] += wgt * in_row[ix];
              }
            }
          }
        }
      }
    }
  }
  return out;
}

Tensor depthwise_conv2d(const Tensor& input, const Tensor& kernel,
                        const Tensor& bias, int stride, int pad) {
  check(input.rank() == 4, "depthwise_conv2d: input must be NCHW, got ", input.shape_str());
  check(kernel.rank() == 4 && kernel.extent(1) == 1,
        "depthwise_conv2d: kernel must be Cx1xkhxkw, got ", kernel.shape_str());
  const int N = input.extent(0), C = input.extent(1), H = input.extent(2), W = input.extent(3);
  const int KC = kernel.extent(0), KH = kernel.extent(2), KW = kernel.extent(3);
  check(C == KC, "depthwise_conv2d: channel count ", C, " does not match kernel channels ",
        KC, " (input ", input.shape_str(), ", kernel ", kernel.shape_str(), ")");
  check(KH % 2 == 1 && KW % 2 == 1, "depthwise_conv2d: kernel spatial extent must be odd");
  if (!bias.empty())
    check(bias.rank() == 1 && bias.extent(0) == C, "depthwise_conv2d: bias shape ",
          bias.shape_str(), " does not match ", C, " channels");
  const int HO = (H + 2 * pad - KH) / stride + 1;
  const int WO = (W + 2 * pad - KW) / stride + 1;
  check(HO > 0 && WO > 0, "depthwise_conv2d: output would be empty");

  Tensor out({N, C, HO, WO});
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      float* out_plane = &out.at(n, c, 0, 0);
      if (!bias.empty()) std::fill_n(out_plane, size_t(HO) * WO, bias[c]);
      const float* in_plane = &input.at(n, c, 0, 0);
      for (int ky = 0; ky < KH; ++ky) {
        for (int kx = 0; kx < KW; ++kx) {
          const float wgt = kernel.at(c, 0, ky, kx);
          if (wgt == 0.0f) continue;
          for (int y = 0; y < HO; ++y) {
            const int iy = y * stride + ky - pad;
            if (iy < 0 || iy >= H) continue;
            const float* in_row = in_plane + int64_t(iy) * W;
            float* out_row = out_plane + int64_t(y) * WO;
            for (int x = 0; x < WO; ++x) {
              const int ix = x * stride + kx - pad;
              if (ix < 0 || ix >= W) continue;
              out_row[x] += wgt * in_row[ix];
            }
          }
        }
      }
    }
  }
  return out;
}

Tensor sigmoid(const Tensor& x) {
  Tensor out = x;
  for (int64_t i = 0; i < out.size(); ++i) out[i] = sigmoid_scalar(out[i]);
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out = x;
  for (int64_t i = 0; i < out.size(); ++i) out[i] = out[i] > 0 ? out[i] : 0.0f;
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  check(a.same_shape(b), "add: shape mismatch ", a.shape_str(), " vs ", b.shape_str());
  Tensor out = a;
  for (int64_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check(a.same_shape(b), "mul: shape mismatch ", a.shape_str(), " vs ", b.shape_str());
  Tensor out = a;
  for (int64_t i = 0; i < out.size(); ++i) out[i] *= b[i];
  return out;
}

Tensor scale(const Tensor& x, float s) {
  Tensor out = x;
  for (int64_t i = 0; i < out.size(); ++i) out[i] *= s;
  return out;
}

Tensor global_avg_pool(const Tensor& x) {
  check(x.rank() == 4, "global_avg_pool: input must be NCHW, got ", x.shape_str());
  const int N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  Tensor out({N, C, 1, 1});
  const int64_t plane = int64_t(H) * W;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const float* p = &x.at(n, c, 0, 0);
      double sum = 0.0;
      for (int64_t i = 0; i < plane; ++i) sum += p[i];
      out.at(n, c, 0, 0) = float(sum / double(plane));
    }
  return out;
}

Tensor global_max_pool(const Tensor& x) {
  check(x.rank() == 4, "global_max_pool: input must be NCHW, got ", x.shape_str());
  const int N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  Tensor out({N, C, 1, 1});
  const int64_t plane = int64_t(H) * W;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const float* p = &x.at(n, c, 0, 0);
      float m = p[0];
      for (int64_t i = 1; i < plane; ++i) m = std::max(m, p[i]);
      out.at(n, c, 0, 0) = m;
    }
  return out;
}

Tensor upsample_nearest2x(const Tensor& x) {
  check(x.rank() == 4, "upsample_nearest2x: input must be NCHW, got ", x.shape_str());
  const int N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  Tensor out({N, C, 2 * H, 2 * W});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H; ++y)
        for (int xw = 0; xw < W; ++xw) {
          const float v = x.at(n, c, y, xw);
          out.at(n, c, 2 * y, 2 * xw) = v;
          out.at(n, c, 2 * y, 2 * xw + 1) = v;
          out.at(n, c, 2 * y + 1, 2 * xw) = v;
          out.at(n, c, 2 * y + 1, 2 * xw + 1) = v;
        }
  return out;
}

Tensor avg_pool2(const Tensor& x) {
  check(x.rank() == 4, "avg_pool2: input must be NCHW, got ", x.shape_str());
  const int N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  check(H % 2 == 0 && W % 2 == 0, "avg_pool2: spatial size must be even, got ", x.shape_str());
  Tensor out({N, C, H / 2, W / 2});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H / 2; ++y)
        for (int xw = 0; xw < W / 2; ++xw) {
          const float v = x.at(n, c, 2 * y, 2 * xw) + x.at(n, c, 2 * y, 2 * xw + 1) +
                          x.at(n, c, 2 * y + 1, 2 * xw) + x.at(n, c, 2 * y + 1, 2 * xw + 1);
          out.at(n, c, y, xw) = v * 0.25f;
        }
  return out;
}

Tensor channel_mean(const Tensor& x) {
  check(x.rank() == 4, "channel_mean: input must be NCHW, got ", x.shape_str());
  const int N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  Tensor out({N, 1, H, W});
  for (int n = 0; n < N; ++n)
    for (int y = 0; y < H; ++y)
      for (int xw = 0; xw < W; ++xw) {
        double sum = 0.0;
        for (int c = 0; c < C; ++c) sum += x.at(n, c, y, xw);
        out.at(n, 0, y, xw) = float(sum / C);
      }
  return out;
}

Tensor channel_max(const Tensor& x) {
  check(x.rank() == 4, "channel_max: input must be NCHW, got ", x.shape_str());
  const int N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  Tensor out({N, 1, H, W});
  for (int n = 0; n < N; ++n)
    for (int y = 0; y < H; ++y)
      for (int xw = 0; xw < W; ++xw) {
        float m = x.at(n, 0, y, xw);
        for (int c = 1; c < C; ++c) m = std::max(m, x.at(n, c, y, xw));
        out.at(n, 0, y, xw) = m;
      }
  return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  check(a.rank() == 4 && b.rank() == 4, "concat_channels: inputs must be NCHW");
  check(a.extent(0) == b.extent(0) && a.extent(2) == b.extent(2) && a.extent(3) == b.extent(3),
        "concat_channels: shape mismatch ", a.shape_str(), " vs ", b.shape_str());
  const int N = a.extent(0), CA = a.extent(1), CB = b.extent(1), H = a.extent(2), W = a.extent(3);
  Tensor out({N, CA + CB, H, W});
  const int64_t plane = int64_t(H) * W;
  for (int n = 0; n < N; ++n) {
    std::memcpy(&out.at(n, 0, 0, 0), &a.at(n, 0, 0, 0), size_t(CA) * plane * sizeof(float));
    std::memcpy(&out.at(n, CA, 0, 0), &b.at(n, 0, 0, 0), size_t(CB) * plane * sizeof(float));
  }
  return out;
}

Tensor slice_channels(const Tensor& x, int c_begin, int c_end) {
  check(x.rank() == 4, "slice_channels: input must be NCHW, got ", x.shape_str());
  const int N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  check(0 <= c_begin && c_begin < c_end && c_end <= C, "slice_channels: range [", c_begin,
        ", ", c_end, ") invalid for ", C, " channels");
  Tensor out({N, c_end - c_begin, H, W});
  const int64_t plane = int64_t(H) * W;
  for (int n = 0; n < N; ++n)
    std::memcpy(&out.at(n, 0, 0, 0), &x.at(n, c_begin, 0, 0),
                size_t(c_end - c_begin) * plane * sizeof(float));
  return out;
}

// ---------------------------------------------------------------------------

namespace {
void put_u16(std::ofstream& os, uint16_t v) {
  char b[2] = {char(v & 0xff), char(v >> 8)};
  os.write(b, 2);
}
void put_u32(std::ofstream& os, uint32_t v) {
  char b[4] = {char(v & 0xff), char((v >> 8) & 0xff), char((v >> 16) & 0xff), char(v >> 24)};
  os.write(b, 4);
}
uint16_t get_u16(std::ifstream& is) {
  unsigned char b[2];
  is.read(reinterpret_cast<char*>(b), 2);
  return uint16_t(b[0] | (b[1] << 8));
}
uint32_t get_u32(std::ifstream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) | (uint32_t(b[3]) << 24);
}
}  // namespace

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  check(t.rank() >= 1 && t.rank() <= 4, "save_tensor: rank must be in [1,4], got ", t.rank());
  for (int a = 0; a < t.rank(); ++a)
    check(t.extent(a) < 65536, "save_tensor: extent ", t.extent(a), " exceeds format limit 65535");
  std::ofstream os(path, std::ios::binary);
  check(os.good(), "save_tensor: cannot open ", path.string());
  os.write("SSDT", 4);
  put_u32(os, uint32_t(t.rank()));
  for (int a = 0; a < 4; ++a) put_u16(os, a < t.rank() ? uint16_t(t.extent(a)) : 0);
  static_assert(sizeof(float) == 4);
  // Little-endian hosts write the payload directly.
  os.write(reinterpret_cast<const char*>(t.data()), std::streamsize(t.size() * 4));
  check(os.good(), "save_tensor: write failed for ", path.string());
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  check(is.good(), "load_tensor: cannot open ", path.string());
  char magic[4];
  is.read(magic, 4);
  check(is.good() && std::memcmp(magic, "SSDT", 4) == 0, "load_tensor: bad magic in ",
        path.string());
  const uint32_t rank = get_u32(is);
  check(rank >= 1 && rank <= 4, "load_tensor: bad rank ", rank, " in ", path.string());
  std::vector<int> shape;
  for (uint32_t a = 0; a < 4; ++a) {
    const uint16_t e = get_u16(is);
    if (a < rank) {
      check(e > 0, "load_tensor: zero extent in ", path.string());
      shape.push_back(int(e));
    }
  }
  Tensor t(shape);
  is.read(reinterpret_cast<char*>(t.data()), std::streamsize(t.size() * 4));
  check(is.good(), "load_tensor: truncated payload in ", path.string());
  return t;
}

}  // namespace ssd
