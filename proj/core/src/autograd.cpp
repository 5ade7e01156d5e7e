#include "ssd/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace ssd::ag {

namespace {

Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backprop) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  bool req = false;
  for (const auto& p : parents) req = req || p.requires_grad();
  node->requires_grad = req;
  if (req) {
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backprop = std::move(backprop);
  }
  return Var(std::move(node));
}

// Elementwise unary helper: out[i] = fwd(x[i]); dx[i] += g[i] * dfn(x[i], y[i]).
template <class Fwd, class Dfn>
Var unary_op(const Var& x, Fwd fwd, Dfn dfn) {
  Tensor out = x.value();
  for (int64_t i = 0; i < out.size(); ++i) out[i] = fwd(out[i]);
  return make_node(std::move(out), {x}, [dfn](Node& self) {
    Node& px = *self.parents[0];
    if (!px.requires_grad) return;
    Tensor& dx = px.grad_buf();
    const Tensor& g = self.grad;
    for (int64_t i = 0; i < g.size(); ++i) dx[i] += g[i] * dfn(px.value[i], self.value[i]);
  });
}

}  // namespace

double Var::item() const {
  check(defined() && node_->value.size() == 1, "Var::item: not a scalar");
  return double(node_->value[0]);
}

Var constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = false;
  return Var(std::move(node));
}

Var param(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(std::move(node));
}

void backward(const Var& root) {
  check(root.defined() && root.value().size() == 1, "backward: root must be a scalar");
  if (!root.requires_grad()) return;

  // Reverse topological order via iterative post-order DFS.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second)
        stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad_buf()[0] = 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backprop && !node->grad.empty()) node->backprop(*node);
  }
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

namespace {

void conv2d_backward(Node& self, int stride, int pad, bool depthwise) {
  Node& px = *self.parents[0];
  Node& pk = *self.parents[1];
  Node* pb = self.parents.size() > 2 ? self.parents[2].get() : nullptr;
  const Tensor& in = px.value;
  const Tensor& k = pk.value;
  const Tensor& g = self.grad;
  const int N = in.extent(0), I = in.extent(1), H = in.extent(2), W = in.extent(3);
  const int O = g.extent(1), HO = g.extent(2), WO = g.extent(3);
  const int KH = k.extent(2), KW = k.extent(3);

  Tensor* dx = px.requires_grad ? &px.grad_buf() : nullptr;
  Tensor* dk = pk.requires_grad ? &pk.grad_buf() : nullptr;
  Tensor* db = (pb && pb->requires_grad) ? &pb->grad_buf() : nullptr;

  for (int n = 0; n < N; ++n) {
    for (int o = 0; o < O; ++o) {
      const float* g_plane = &g.at(n, o, 0, 0);
      if (db) {
        double s = 0.0;
        for (int64_t i = 0; i < int64_t(HO) * WO; ++i) s += g_plane[i];
        (*db)[o] += float(s);
      }
      const int i_begin = depthwise ? o : 0;
      const int i_end = depthwise ? o + 1 : I;
      for (int i = i_begin; i < i_end; ++i) {
        const float* in_plane = &in.at(n, i, 0, 0);
        float* dx_plane = dx ? &dx->at(n, i, 0, 0) : nullptr;
        const int ki = depthwise ? 0 : i;
        for (int ky = 0; ky < KH; ++ky) {
          for (int kx = 0; kx < KW; ++kx) {
            const float wgt = k.at(o, ki, ky, kx);
            double dk_acc = 0.0;
            for (int y = 0; y < HO; ++y) {
              const int iy = y * stride + ky - pad;
              if (iy < 0 || iy >= H) continue;
              const float* g_row = g_plane + int64_t(y) * WO;
              const float* in_row = in_plane + int64_t(iy) * W;
              float* dx_row = dx_plane ? dx_plane + int64_t(iy) * W : nullptr;
              for (int x = 0; x < WO; ++x) {
                const int ix = x * stride + kx - pad;
                if (ix < 0 || ix >= W) continue;
                const float gv = g_row[x];
                if (dx_row) dx_row[ix] += gv * wgt;
                if (dk) dk_acc += double(gv) * in_row[ix];
              }
            }
            if (dk) dk->at(o, ki, ky, kx) += float(dk_acc);
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& kernel, const Var& bias, int stride, int pad) {
  Tensor out = ssd::conv2d(x.value(), kernel.value(), bias.defined() ? bias.value() : Tensor(),
                           stride, pad);
  std::vector<Var> parents = {x, kernel};
  if (bias.defined()) parents.push_back(bias);
  return make_node(std::move(out), std::move(parents),
                   [stride, pad](Node& self) { conv2d_backward(self, stride, pad, false); });
}

Var depthwise_conv2d(const Var& x, const Var& kernel, const Var& bias, int stride, int pad) {
  Tensor out = ssd::depthwise_conv2d(x.value(), kernel.value(),
                                     bias.defined() ? bias.value() : Tensor(), stride, pad);
  std::vector<Var> parents = {x, kernel};
  if (bias.defined()) parents.push_back(bias);
  return make_node(std::move(out), std::move(parents),
                   [stride, pad](Node& self) { conv2d_backward(self, stride, pad, true); });
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

Var relu(const Var& x) {
  return unary_op(
      x, [](float v) { return v > 0 ? v : 0.0f; },
      [](float xv, float) { return xv > 0 ? 1.0f : 0.0f; });
}

Var sigmoid(const Var& x) {
  Tensor out = ssd::sigmoid(x.value());
  return make_node(std::move(out), {x}, [](Node& self) {
    Node& px = *self.parents[0];
    if (!px.requires_grad) return;
    Tensor& dx = px.grad_buf();
    for (int64_t i = 0; i < self.grad.size(); ++i) {
      const float y = self.value[i];
      dx[i] += self.grad[i] * y * (1.0f - y);
    }
  });
}

Var exp(const Var& x) {
  return unary_op(
      x, [](float v) { return std::exp(v); }, [](float, float y) { return y; });
}

Var log(const Var& x) {
  for (int64_t i = 0; i < x.value().size(); ++i)
    check(x.value()[i] > 0, "log: non-positive input ", x.value()[i]);
  return unary_op(
      x, [](float v) { return std::log(v); }, [](float xv, float) { return 1.0f / xv; });
}

Var sqrt(const Var& x) {
  for (int64_t i = 0; i < x.value().size(); ++i)
    check(x.value()[i] >= 0, "sqrt: negative input ", x.value()[i]);
  return unary_op(
      x, [](float v) { return std::sqrt(v); },
      [](float, float y) { return y > 0 ? 0.5f / y : 0.0f; });
}

Var abs(const Var& x) {
  return unary_op(
      x, [](float v) { return std::fabs(v); },
      [](float xv, float) { return xv > 0 ? 1.0f : (xv < 0 ? -1.0f : 0.0f); });
}

Var neg(const Var& x) {
  return unary_op(
      x, [](float v) { return -v; }, [](float, float) { return -1.0f; });
}

Var clamp(const Var& x, float lo, float hi) {
  check(lo < hi, "clamp: lo must be < hi");
  return unary_op(
      x, [lo, hi](float v) { return std::clamp(v, lo, hi); },
      [lo, hi](float xv, float) { return (xv >= lo && xv <= hi) ? 1.0f : 0.0f; });
}

Var pow_scalar(const Var& x, float p) {
  for (int64_t i = 0; i < x.value().size(); ++i)
    check(x.value()[i] >= 0, "pow_scalar: negative base ", x.value()[i]);
  return unary_op(
      x, [p](float v) { return std::pow(v, p); },
      [p](float xv, float) {
        if (xv == 0.0f) return p > 1.0f ? 0.0f : (p == 1.0f ? 1.0f : 0.0f);
        return p * std::pow(xv, p - 1.0f);
      });
}

Var add_scalar(const Var& x, float c) {
  return unary_op(
      x, [c](float v) { return v + c; }, [](float, float) { return 1.0f; });
}

Var mul_scalar(const Var& x, float c) {
  return unary_op(
      x, [c](float v) { return v * c; }, [c](float, float) { return c; });
}

namespace {

template <class Fwd, class DA, class DB>
Var binary_op(const Var& a, const Var& b, const char* name, Fwd fwd, DA da, DB db) {
  check(a.value().same_shape(b.value()), name, ": shape mismatch ", a.value().shape_str(),
        " vs ", b.value().shape_str());
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (int64_t i = 0; i < out.size(); ++i) out[i] = fwd(out[i], bv[i]);
  return make_node(std::move(out), {a, b}, [da, db](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const Tensor& g = self.grad;
    if (pa.requires_grad) {
      Tensor& dx = pa.grad_buf();
      for (int64_t i = 0; i < g.size(); ++i) dx[i] += g[i] * da(pa.value[i], pb.value[i]);
    }
    if (pb.requires_grad) {
      Tensor& dx = pb.grad_buf();
      for (int64_t i = 0; i < g.size(); ++i) dx[i] += g[i] * db(pa.value[i], pb.value[i]);
    }
  });
}

}  // namespace

Var add(const Var& a, const Var& b) {
  return binary_op(
      a, b, "add", [](float x, float y) { return x + y; },
      [](float, float) { return 1.0f; }, [](float, float) { return 1.0f; });
}

Var sub(const Var& a, const Var& b) {
  return binary_op(
      a, b, "sub", [](float x, float y) { return x - y; },
      [](float, float) { return 1.0f; }, [](float, float) { return -1.0f; });
}

Var mul(const Var& a, const Var& b) {
  return binary_op(
      a, b, "mul", [](float x, float y) { return x * y; },
      [](float, float y) { return y; }, [](float x, float) { return x; });
}

Var div(const Var& a, const Var& b) {
  for (int64_t i = 0; i < b.value().size(); ++i)
    check(b.value()[i] != 0, "div: zero denominator");
  return binary_op(
      a, b, "div", [](float x, float y) { return x / y; },
      [](float, float y) { return 1.0f / y; },
      [](float x, float y) { return -x / (y * y); });
}

Var emax(const Var& a, const Var& b) {
  return binary_op(
      a, b, "emax", [](float x, float y) { return x >= y ? x : y; },
      [](float x, float y) { return x >= y ? 1.0f : 0.0f; },
      [](float x, float y) { return x >= y ? 0.0f : 1.0f; });
}

Var emin(const Var& a, const Var& b) {
  return binary_op(
      a, b, "emin", [](float x, float y) { return x <= y ? x : y; },
      [](float x, float y) { return x <= y ? 1.0f : 0.0f; },
      [](float x, float y) { return x <= y ? 0.0f : 1.0f; });
}

// ---------------------------------------------------------------------------
// Broadcast helpers
// ---------------------------------------------------------------------------

Var scale_by(const Var& x, const Var& s) {
  check(s.value().size() == 1, "scale_by: scale must be a scalar, got ",
        s.value().shape_str());
  Tensor out = ssd::scale(x.value(), s.value()[0]);
  return make_node(std::move(out), {x, s}, [](Node& self) {
    Node& px = *self.parents[0];
    Node& ps = *self.parents[1];
    const Tensor& g = self.grad;
    const float sv = ps.value[0];
    if (px.requires_grad) {
      Tensor& dx = px.grad_buf();
      for (int64_t i = 0; i < g.size(); ++i) dx[i] += g[i] * sv;
    }
    if (ps.requires_grad) {
      double acc = 0.0;
      for (int64_t i = 0; i < g.size(); ++i) acc += double(g[i]) * px.value[i];
      ps.grad_buf()[0] += float(acc);
    }
  });
}

Var scale_per_channel(const Var& x, const Var& s) {
  const Tensor& xv = x.value();
  const Tensor& sv = s.value();
  check(xv.rank() == 4 && sv.rank() == 4 && sv.extent(2) == 1 && sv.extent(3) == 1 &&
            sv.extent(0) == xv.extent(0) && sv.extent(1) == xv.extent(1),
        "scale_per_channel: scale shape ", sv.shape_str(), " incompatible with ",
        xv.shape_str());
  const int N = xv.extent(0), C = xv.extent(1);
  const int64_t plane = int64_t(xv.extent(2)) * xv.extent(3);
  Tensor out = xv;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      float* p = &out.at(n, c, 0, 0);
      const float f = sv.at(n, c, 0, 0);
      for (int64_t i = 0; i < plane; ++i) p[i] *= f;
    }
  return make_node(std::move(out), {x, s}, [](Node& self) {
    Node& px = *self.parents[0];
    Node& ps = *self.parents[1];
    const Tensor& g = self.grad;
    const int N = g.extent(0), C = g.extent(1);
    const int64_t plane = int64_t(g.extent(2)) * g.extent(3);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const float* gp = &g.at(n, c, 0, 0);
        const float* xp = &px.value.at(n, c, 0, 0);
        const float f = ps.value.at(n, c, 0, 0);
        if (px.requires_grad) {
          float* dxp = &px.grad_buf().at(n, c, 0, 0);
          for (int64_t i = 0; i < plane; ++i) dxp[i] += gp[i] * f;
        }
        if (ps.requires_grad) {
          double acc = 0.0;
          for (int64_t i = 0; i < plane; ++i) acc += double(gp[i]) * xp[i];
          ps.grad_buf().at(n, c, 0, 0) += float(acc);
        }
      }
  });
}

Var mul_spatial(const Var& x, const Var& m) {
  const Tensor& xv = x.value();
  const Tensor& mv = m.value();
  check(xv.rank() == 4 && mv.rank() == 4 && mv.extent(1) == 1 &&
            mv.extent(0) == xv.extent(0) && mv.extent(2) == xv.extent(2) &&
            mv.extent(3) == xv.extent(3),
        "mul_spatial: mask shape ", mv.shape_str(), " incompatible with ", xv.shape_str());
  const int N = xv.extent(0), C = xv.extent(1);
  const int64_t plane = int64_t(xv.extent(2)) * xv.extent(3);
  Tensor out = xv;
  for (int n = 0; n < N; ++n) {
    const float* mp = &mv.at(n, 0, 0, 0);
    for (int c = 0; c < C; ++c) {
      float* p = &out.at(n, c, 0, 0);
      for (int64_t i = 0; i < plane; ++i) p[i] *= mp[i];
    }
  }
  return make_node(std::move(out), {x, m}, [](Node& self) {
    Node& px = *self.parents[0];
    Node& pm = *self.parents[1];
    const Tensor& g = self.grad;
    const int N = g.extent(0), C = g.extent(1);
    const int64_t plane = int64_t(g.extent(2)) * g.extent(3);
    for (int n = 0; n < N; ++n) {
      const float* mp = &pm.value.at(n, 0, 0, 0);
      float* dmp = pm.requires_grad ? &pm.grad_buf().at(n, 0, 0, 0) : nullptr;
      for (int c = 0; c < C; ++c) {
        const float* gp = &g.at(n, c, 0, 0);
        const float* xp = &px.value.at(n, c, 0, 0);
        if (px.requires_grad) {
          float* dxp = &px.grad_buf().at(n, c, 0, 0);
          for (int64_t i = 0; i < plane; ++i) dxp[i] += gp[i] * mp[i];
        }
        if (dmp)
          for (int64_t i = 0; i < plane; ++i) dmp[i] += gp[i] * xp[i];
      }
    }
  });
}

Var add_channel_bias(const Var& x, const Var& b) {
  const Tensor& xv = x.value();
  const Tensor& bv = b.value();
  check(xv.rank() == 4 && bv.rank() == 1 && bv.extent(0) == xv.extent(1),
        "add_channel_bias: bias shape ", bv.shape_str(), " incompatible with ", xv.shape_str());
  const int N = xv.extent(0), C = xv.extent(1);
  const int64_t plane = int64_t(xv.extent(2)) * xv.extent(3);
  Tensor out = xv;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      float* p = &out.at(n, c, 0, 0);
      const float bias = bv[c];
      for (int64_t i = 0; i < plane; ++i) p[i] += bias;
    }
  return make_node(std::move(out), {x, b}, [](Node& self) {
    Node& px = *self.parents[0];
    Node& pb = *self.parents[1];
    const Tensor& g = self.grad;
    const int N = g.extent(0), C = g.extent(1);
    const int64_t plane = int64_t(g.extent(2)) * g.extent(3);
    if (px.requires_grad) {
      Tensor& dx = px.grad_buf();
      for (int64_t i = 0; i < g.size(); ++i) dx[i] += g[i];
    }
    if (pb.requires_grad) {
      Tensor& db = pb.grad_buf();
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const float* gp = &g.at(n, c, 0, 0);
          double acc = 0.0;
          for (int64_t i = 0; i < plane; ++i) acc += gp[i];
          db[c] += float(acc);
        }
    }
  });
}

// ---------------------------------------------------------------------------
// Pooling / resampling
// ---------------------------------------------------------------------------

Var global_avg_pool(const Var& x) {
  Tensor out = ssd::global_avg_pool(x.value());
  return make_node(std::move(out), {x}, [](Node& self) {
    Node& px = *self.parents[0];
    if (!px.requires_grad) return;
    Tensor& dx = px.grad_buf();
    const int N = px.value.extent(0), C = px.value.extent(1);
    const int64_t plane = int64_t(px.value.extent(2)) * px.value.extent(3);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const float gv = self.grad.at(n, c, 0, 0) / float(plane);
        float* dp = &dx.at(n, c, 0, 0);
        for (int64_t i = 0; i < plane; ++i) dp[i] += gv;
      }
  });
}

Var global_max_pool(const Var& x) {
  Tensor out = ssd::global_max_pool(x.value());
  return make_node(std::move(out), {x}, [](Node& self) {
    Node& px = *self.parents[0];
    if (!px.requires_grad) return;
    Tensor& dx = px.grad_buf();
    const int N = px.value.extent(0), C = px.value.extent(1);
    const int64_t plane = int64_t(px.value.extent(2)) * px.value.extent(3);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const float* p = &px.value.at(n, c, 0, 0);
        int64_t arg = 0;
        for (int64_t i = 1; i < plane; ++i)
          if (p[i] > p[arg]) arg = i;
        (&dx.at(n, c, 0, 0))[arg] += self.grad.at(n, c, 0, 0);
      }
  });
}

Var avg_pool2(const Var& x) {
  Tensor out = ssd::avg_pool2(x.value());
  return make_node(std::move(out), {x}, [](Node& self) {
    Node& px = *self.parents[0];
    if (!px.requires_grad) return;
    Tensor& dx = px.grad_buf();
    const Tensor& g = self.grad;
    const int N = g.extent(0), C = g.extent(1), HO = g.extent(2), WO = g.extent(3);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < HO; ++y)
          for (int xw = 0; xw < WO; ++xw) {
            const float gv = 0.25f * g.at(n, c, y, xw);
            dx.at(n, c, 2 * y, 2 * xw) += gv;
            dx.at(n, c, 2 * y, 2 * xw + 1) += gv;
            dx.at(n, c, 2 * y + 1, 2 * xw) += gv;
            dx.at(n, c, 2 * y + 1, 2 * xw + 1) += gv;
          }
  });
}

Var upsample_nearest2x(const Var& x) {
  Tensor out = ssd::upsample_nearest2x(x.value());
  return make_node(std::move(out), {x}, [](Node& self) {
    Node& px = *self.parents[0];
    if (!px.requires_grad) return;
    Tensor& dx = px.grad_buf();
    const Tensor& g = self.grad;
    const int N = dx.extent(0), C = dx.extent(1), H = dx.extent(2), W = dx.extent(3);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
          for (int xw = 0; xw < W; ++xw)
            dx.at(n, c, y, xw) += g.at(n, c, 2 * y, 2 * xw) + g.at(n, c, 2 * y, 2 * xw + 1) +
                                  g.at(n, c, 2 * y + 1, 2 * xw) +
                                  g.at(n, c, 2 * y + 1, 2 * xw + 1);
  });
}

Var channel_mean(const Var& x) {
  Tensor out = ssd::channel_mean(x.value());
  return make_node(std::move(out), {x}, [](Node& self) {
    Node& px = *self.parents[0];
    if (!px.requires_grad) return;
    Tensor& dx = px.grad_buf();
    const Tensor& g = self.grad;
    const int N = dx.extent(0), C = dx.extent(1), H = dx.extent(2), W = dx.extent(3);
    for (int n = 0; n < N; ++n)
      for (int y = 0; y < H; ++y)
        for (int xw = 0; xw < W; ++xw) {
          const float gv = g.at(n, 0, y, xw) / float(C);
          for (int c = 0; c < C; ++c) dx.at(n, c, y, xw) += gv;
        }
  });
}

Var channel_max(const Var& x) {
  Tensor out = ssd::channel_max(x.value());
  return make_node(std::move(out), {x}, [](Node& self) {
    Node& px = *self.parents[0];
    if (!px.requires_grad) return;
    Tensor& dx = px.grad_buf();
    const Tensor& g = self.grad;
    const int N = dx.extent(0), C = dx.extent(1), H = dx.extent(2), W = dx.extent(3);
    for (int n = 0; n < N; ++n)
      for (int y = 0; y < H; ++y)
        for (int xw = 0; xw < W; ++xw) {
          int arg = 0;
          for (int c = 1; c < C; ++c)
            if (px.value.at(n, c, y, xw) > px.value.at(n, arg, y, xw)) arg = c;
          dx.at(n, arg, y, xw) += g.at(n, 0, y, xw);
        }
  });
}

// ---------------------------------------------------------------------------
// Structure
// ---------------------------------------------------------------------------

Var reshape(const Var& x, std::vector<int> shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return make_node(std::move(out), {x}, [](Node& self) {
    Node& px = *self.parents[0];
    if (!px.requires_grad) return;
    Tensor& dx = px.grad_buf();
    for (int64_t i = 0; i < self.grad.size(); ++i) dx[i] += self.grad[i];
  });
}

Var concat_channels(const Var& a, const Var& b) {
  Tensor out = ssd::concat_channels(a.value(), b.value());
  return make_node(std::move(out), {a, b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const Tensor& g = self.grad;
    const int N = g.extent(0), CA = pa.value.extent(1), CB = pb.value.extent(1);
    const int64_t plane = int64_t(g.extent(2)) * g.extent(3);
    for (int n = 0; n < N; ++n) {
      if (pa.requires_grad) {
        Tensor& dx = pa.grad_buf();
        const float* gp = &g.at(n, 0, 0, 0);
        float* dp = &dx.at(n, 0, 0, 0);
        for (int64_t i = 0; i < int64_t(CA) * plane; ++i) dp[i] += gp[i];
      }
      if (pb.requires_grad) {
        Tensor& dx = pb.grad_buf();
        const float* gp = &g.at(n, CA, 0, 0);
        float* dp = &dx.at(n, 0, 0, 0);
        for (int64_t i = 0; i < int64_t(CB) * plane; ++i) dp[i] += gp[i];
      }
    }
  });
}

Var slice_channels(const Var& x, int c_begin, int c_end) {
  Tensor out = ssd::slice_channels(x.value(), c_begin, c_end);
  return make_node(std::move(out), {x}, [c_begin, c_end](Node& self) {
    Node& px = *self.parents[0];
    if (!px.requires_grad) return;
    Tensor& dx = px.grad_buf();
    const Tensor& g = self.grad;
    const int N = g.extent(0);
    const int64_t plane = int64_t(g.extent(2)) * g.extent(3);
    for (int n = 0; n < N; ++n) {
      const float* gp = &g.at(n, 0, 0, 0);
      float* dp = &dx.at(n, c_begin, 0, 0);
      for (int64_t i = 0; i < int64_t(c_end - c_begin) * plane; ++i) dp[i] += gp[i];
    }
  });
}

Var permute_channels(const Var& x, const std::vector<int>& perm) {
  const Tensor& xv = x.value();
  check(xv.rank() == 4, "permute_channels: input must be NCHW");
  const int N = xv.extent(0), C = xv.extent(1);
  check(int(perm.size()) == C, "permute_channels: permutation size ", perm.size(),
        " does not match ", C, " channels");
  const int64_t plane = int64_t(xv.extent(2)) * xv.extent(3);
  Tensor out(xv.shape());
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      check(perm[c] >= 0 && perm[c] < C, "permute_channels: index out of range");
      std::copy_n(&xv.at(n, perm[c], 0, 0), plane, &out.at(n, c, 0, 0));
    }
  return make_node(std::move(out), {x}, [perm, plane](Node& self) {
    Node& px = *self.parents[0];
    if (!px.requires_grad) return;
    Tensor& dx = px.grad_buf();
    const Tensor& g = self.grad;
    const int N = g.extent(0), C = g.extent(1);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const float* gp = &g.at(n, c, 0, 0);
        float* dp = &dx.at(n, perm[c], 0, 0);
        for (int64_t i = 0; i < plane; ++i) dp[i] += gp[i];
      }
  });
}

Var gather(const Var& x, std::vector<int64_t> flat_indices) {
  const Tensor& xv = x.value();
  Tensor out({int(flat_indices.size())});
  for (size_t i = 0; i < flat_indices.size(); ++i) {
    check(flat_indices[i] >= 0 && flat_indices[i] < xv.size(), "gather: index ",
          flat_indices[i], " out of range for ", xv.size(), " elements");
    out[int64_t(i)] = xv[flat_indices[i]];
  }
  return make_node(std::move(out), {x}, [idx = std::move(flat_indices)](Node& self) {
    Node& px = *self.parents[0];
    if (!px.requires_grad) return;
    Tensor& dx = px.grad_buf();
    for (size_t i = 0; i < idx.size(); ++i) dx[idx[i]] += self.grad[int64_t(i)];
  });
}

Var concat_flat(const std::vector<Var>& parts) {
  check(!parts.empty(), "concat_flat: no inputs");
  int64_t total = 0;
  for (const auto& p : parts) total += p.value().size();
  Tensor out({int(total)});
  int64_t off = 0;
  for (const auto& p : parts) {
    std::copy_n(p.value().data(), p.value().size(), out.data() + off);
    off += p.value().size();
  }
  return make_node(std::move(out), parts, [](Node& self) {
    int64_t off = 0;
    for (auto& parent : self.parents) {
      const int64_t n = parent->value.size();
      if (parent->requires_grad) {
        Tensor& dx = parent->grad_buf();
        for (int64_t i = 0; i < n; ++i) dx[i] += self.grad[off + i];
      }
      off += n;
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

Var sum(const Var& x) {
  double acc = 0.0;
  for (int64_t i = 0; i < x.value().size(); ++i) acc += x.value()[i];
  return make_node(Tensor::scalar(float(acc)), {x}, [](Node& self) {
    Node& px = *self.parents[0];
    if (!px.requires_grad) return;
    Tensor& dx = px.grad_buf();
    const float g = self.grad[0];
    for (int64_t i = 0; i < dx.size(); ++i) dx[i] += g;
  });
}

Var mean(const Var& x) {
  const int64_t n = x.value().size();
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) acc += x.value()[i];
  return make_node(Tensor::scalar(float(acc / double(n))), {x}, [n](Node& self) {
    Node& px = *self.parents[0];
    if (!px.requires_grad) return;
    Tensor& dx = px.grad_buf();
    const float g = self.grad[0] / float(n);
    for (int64_t i = 0; i < dx.size(); ++i) dx[i] += g;
  });
}

// ---------------------------------------------------------------------------

double grad_check(const std::function<Var(const Var&)>& f, const Tensor& x, double eps) {
  check(eps >= 1e-4 && eps <= 1e-2, "grad_check: eps must lie in [1e-4, 1e-2], got ", eps);

  Var vx = param(x);
  Var y = f(vx);
  check(y.value().size() == 1, "grad_check: f must return a scalar");
  check(std::isfinite(y.item()), "grad_check: f(x) is not finite");
  backward(y);
  Tensor analytic = vx.grad().empty() ? Tensor::zeros(x.shape()) : vx.grad();

  double max_err = 0.0;
  Tensor probe = x;
  for (int64_t i = 0; i < x.size(); ++i) {
    const float orig = probe[i];
    probe[i] = float(double(orig) + eps);
    const double fp = f(constant(probe)).item();
    probe[i] = float(double(orig) - eps);
    const double fm = f(constant(probe)).item();
    probe[i] = orig;
    check(std::isfinite(fp) && std::isfinite(fm), "grad_check: non-finite value at coordinate ", i);
    const double fd = (fp - fm) / (2.0 * eps);
    const double a = double(analytic[i]);
    check(std::isfinite(a), "grad_check: non-finite analytic gradient at coordinate ", i);
    const double err = std::fabs(a - fd) / std::max(1.0, std::fabs(a));
    max_err = std::max(max_err, err);
  }
  return max_err;
}

}  // namespace ssd::ag
