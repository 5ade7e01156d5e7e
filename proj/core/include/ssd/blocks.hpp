#pragma once

#include <filesystem>
#include <optional>
#include <utility>
#include <variant>
#include <vector>

#include "ssd/autograd.hpp"

namespace ssd {

class Rng;

/// Three-branch convolution (3x3 + 1x1 + optional identity) used at training
/// time; merge() folds the branches into one 3x3 kernel for inference. The
/// identity branch exists only when in_ch == out_ch and contributes x plus a
/// per-channel bias.
struct RepConv {
  int in_ch = 0, out_ch = 0;
  bool identity_enabled = false;
  ag::Var w3, b3;   // (O,I,3,3), (O)
  ag::Var w1, b1;   // (O,I,1,1), (O)
  ag::Var b_id;     // (O), defined only when identity_enabled
  std::optional<std::pair<Tensor, Tensor>> merged;  // kernel (O,I,3,3), bias (O)

  enum class Mode { train, merged };

  static RepConv create(int in_ch, int out_ch, bool identity, Rng& rng);

  ag::Var forward(const ag::Var& x) const;  // train-mode branches
  Tensor forward(const Tensor& x, Mode mode) const;

  /// Folds 3x3 + center-embedded 1x1 + identity into merged kernel/bias.
  void merge();

  std::vector<ag::Var> params();
};

/// Channel attention: x scaled per channel by
/// sigmoid(FC2(relu(FC1(GAP(x))))); bottleneck width max(1, C/reduction).
struct SeAttention {
  int channels = 0, reduction = 16, bottleneck = 1;
  ag::Var w1, b1;  // (B,C,1,1), (B)
  ag::Var w2, b2;  // (C,B,1,1), (C)

  static SeAttention create(int channels, int reduction, Rng& rng);
  ag::Var forward(const ag::Var& x) const;
  Tensor forward(const Tensor& x) const;
  std::vector<ag::Var> params();
};

/// Spatial attention: mask = sigmoid(conv_kxk(concat(channel mean, channel
/// max))), multiplied onto x. Kernel size must be odd.
struct CbamSpatial {
  int kernel = 7;
  ag::Var w, b;  // (1,2,k,k), (1)

  static CbamSpatial create(int kernel, Rng& rng);
  ag::Var forward(const ag::Var& x) const;
  Tensor forward(const Tensor& x) const;
  std::vector<ag::Var> params();
};

/// Two-branch partial attention: split channels in half, run SE then spatial
/// attention on the second half with a residual, concat and fuse with a 1x1
/// conv. Requires an even channel count.
struct C2psa {
  int channels = 0;
  SeAttention se;
  CbamSpatial spatial;
  ag::Var w_fuse, b_fuse;  // (C,C,1,1), (C)

  static C2psa create(int channels, Rng& rng, int reduction = 16, int spatial_kernel = 7);
  ag::Var forward(const ag::Var& x) const;
  Tensor forward(const Tensor& x) const;
  std::vector<ag::Var> params();
};

/// Cheap convolution: ceil(out*primary_ratio) channels from an ordinary 1x1
/// conv, the rest from depthwise 3x3 over the primary channels (cycled when
/// there are more ghosts than primaries), concatenated.
struct GhostConv {
  int in_ch = 0, out_ch = 0, primary_ch = 0;
  double primary_ratio = 0.5;
  ag::Var wp, bp;  // (P,I,1,1), (P)
  ag::Var wc, bc;  // (G,1,3,3), (G); empty when out == primary

  static GhostConv create(int in_ch, int out_ch, double primary_ratio, Rng& rng);
  ag::Var forward(const ag::Var& x) const;
  Tensor forward(const Tensor& x) const;
  int64_t param_count() const;
  std::vector<ag::Var> params();
};

/// Depthwise 3x3 followed by 1x1 pointwise, then a two-group channel
/// shuffle (interleave). Output channels must be even.
struct GsConv {
  int in_ch = 0, out_ch = 0;
  ag::Var wd, bd;  // (I,1,3,3), (I)
  ag::Var wp, bp;  // (O,I,1,1), (O)

  static GsConv create(int in_ch, int out_ch, Rng& rng);
  ag::Var forward(const ag::Var& x) const;
  Tensor forward(const Tensor& x) const;
  std::vector<ag::Var> params();
};

using Block = std::variant<RepConv, SeAttention, CbamSpatial, C2psa, GhostConv, GsConv>;

/// Persists a block as <name>.json (kind + hyperparameters) plus one tensor
/// dump per parameter alongside it.
void save_block(const std::filesystem::path& dir, const std::string& name, const Block& block);
Block load_block(const std::filesystem::path& dir, const std::string& name);

}  // namespace ssd
