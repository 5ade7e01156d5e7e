#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ssd/common.hpp"

namespace ssd {

class Rng;

/// Dense float32 tensor, C-contiguous, NCHW order for image data.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape);
  Tensor(std::vector<int> shape, std::vector<float> data);

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int> shape, float value);
  static Tensor scalar(float value) { return Tensor({1}, {value}); }
  static Tensor randn(std::vector<int> shape, Rng& rng, float stddev = 1.0f);
  static Tensor uniform(std::vector<int> shape, Rng& rng, float lo, float hi);

  int rank() const { return int(shape_.size()); }
  int extent(int axis) const;
  const std::vector<int>& shape() const { return shape_; }
  int64_t size() const { return int64_t(data_.size()); }
  bool empty() const { return data_.empty(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::vector<float>& storage() { return data_; }
  const std::vector<float>& storage() const { return data_; }

  float& operator[](int64_t i) { return data_[size_t(i)]; }
  float operator[](int64_t i) const { return data_[size_t(i)]; }

  // NCHW access; valid for rank-4 tensors only.
  float& at(int n, int c, int h, int w) { return data_[size_t(index4(n, c, h, w))]; }
  const float& at(int n, int c, int h, int w) const {
    return data_[size_t(index4(n, c, h, w))];
  }
  int64_t index4(int n, int c, int h, int w) const;

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  std::string shape_str() const;  // e.g. "2x3x8x8"

  Tensor reshaped(std::vector<int> new_shape) const;

 private:
  std::vector<int> shape_;
  std::vector<float> data_;
};

// ---------------------------------------------------------------------------
// Forward kernels. Pure functions; inputs validated, errors name the shapes.
// ---------------------------------------------------------------------------

/// Cross-correlation (no kernel flip) with zero padding.
/// input (N,I,H,W), kernel (O,I,kh,kw) with odd kh/kw, bias (O) or empty.
/// Output spatial size: floor((H + 2*pad - kh)/stride) + 1.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              int stride = 1, int pad = 0);

/// Per-channel 2-D convolution. kernel (C,1,kh,kw), bias (C) or empty.
Tensor depthwise_conv2d(const Tensor& input, const Tensor& kernel,
                        const Tensor& bias, int stride = 1, int pad = 0);

Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float s);

Tensor global_avg_pool(const Tensor& x);  // (N,C,H,W) -> (N,C,1,1)
Tensor global_max_pool(const Tensor& x);  // (N,C,H,W) -> (N,C,1,1)
Tensor upsample_nearest2x(const Tensor& x);
Tensor avg_pool2(const Tensor& x);  // 2x2 window, stride 2; requires even H,W

Tensor channel_mean(const Tensor& x);  // (N,C,H,W) -> (N,1,H,W)
Tensor channel_max(const Tensor& x);
Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor slice_channels(const Tensor& x, int c_begin, int c_end);

// ---------------------------------------------------------------------------
// Dump format: 16-byte header = "SSDT" magic, u32 rank (LE), 4 x u16 extents
// (LE, zero-padded past rank), then float32 payload little-endian. Rank <= 4,
// each extent < 65536.
// ---------------------------------------------------------------------------
void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

}  // namespace ssd
