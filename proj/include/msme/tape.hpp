#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "msme/tensor.hpp"

namespace msme {

using NodeId = int32_t;
constexpr NodeId kNoNode = -1;

// Define-by-run tape. Every op appends a node holding the forward value and
// a closure that routes the node's gradient to its parents; creation order is
// a topological order, so backward() is a single reverse sweep. Nodes whose
// gradient was never touched are skipped (no gradient flowed through them).
template <class T>
class Tape {
 public:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // allocated on demand during backward
    bool needs_grad = false;
    bool grad_alloc = false;
    std::function<void(Tape&)> backward;
  };

  NodeId leaf(Tensor<T> v, bool needs_grad = false) {
    Node n;
    n.value = std::move(v);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  NodeId emplace(Tensor<T> value, bool needs_grad) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  void set_backward(NodeId id, std::function<void(Tape&)> fn) {
    if (nodes_[id].needs_grad) nodes_[id].backward = std::move(fn);
  }

  const Tensor<T>& value(NodeId id) const { return nodes_[id].value; }
  bool needs_grad(NodeId id) const { return id != kNoNode && nodes_[id].needs_grad; }

  Tensor<T>& grad(NodeId id) {
    Node& n = nodes_[id];
    if (!n.grad_alloc) {
      n.grad = Tensor<T>::zeros(n.value.shape);
      n.grad_alloc = true;
    }
    return n.grad;
  }

  bool grad_touched(NodeId id) const { return nodes_[id].grad_alloc; }

  void accumulate(NodeId id, const Tensor<T>& g) {
    Tensor<T>& dst = grad(id);
    for (size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += g.data[i];
  }

  // Reverse sweep from a scalar loss node.
  void backward(NodeId loss) {
    if (value(loss).numel() != 1) throw ContractError("backward: loss must be a scalar");
    grad(loss).data[0] = T{1};
    for (NodeId id = loss; id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.needs_grad || !n.grad_alloc) continue;
      if (n.backward) n.backward(*this);
    }
  }

  size_t size() const { return nodes_.size(); }

  size_t bytes() const {
    size_t total = 0;
    for (const Node& n : nodes_) {
      total += n.value.numel() * sizeof(T);
      if (n.grad_alloc) total += n.grad.numel() * sizeof(T);
    }
    return total;
  }

  void clear() { nodes_.clear(); }

 private:
  std::vector<Node> nodes_;
};

namespace detail {

template <class T>
inline void expect_rank(const Tensor<T>& t, size_t r, const char* op) {
  if (t.rank() != r)
    throw DimError(strprintf("%s: expected rank-%zu tensor, got shape %s", op, r,
                             shape_str(t.shape).c_str()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d_valid: input [Ci,H,W], kernel [Co,Ci,kh,kw], bias [Co]
//   -> [Co, H-kh+1, W-kw+1]
// ---------------------------------------------------------------------------
template <class T>
NodeId conv2d_valid(Tape<T>& t, NodeId input, NodeId kernel, NodeId bias) {
  const Tensor<T>& in = t.value(input);
  const Tensor<T>& k = t.value(kernel);
  const Tensor<T>& b = t.value(bias);
  detail::expect_rank(in, 3, "conv2d_valid input");
  detail::expect_rank(k, 4, "conv2d_valid kernel");
  detail::expect_rank(b, 1, "conv2d_valid bias");
  const size_t Ci = in.dim(0), H = in.dim(1), W = in.dim(2);
  const size_t Co = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  if (k.dim(1) != Ci)
    throw DimError(strprintf("conv2d_valid: kernel expects %zu input channels, input has %zu",
                             k.dim(1), Ci));
  if (b.dim(0) != Co)
    throw DimError(strprintf("conv2d_valid: bias has %zu entries for %zu output channels",
                             b.dim(0), Co));
  if (kh > H || kw > W)
    throw DimError(
        strprintf("conv2d_valid: kernel %zux%zu larger than input %zux%zu", kh, kw, H, W));
  const size_t OH = H - kh + 1, OW = W - kw + 1;

  Tensor<T> out({Co, OH, OW});
  {
    const T* ip = in.ptr();
    const T* kp = k.ptr();
    T* op = out.ptr();
    for (size_t o = 0; o < Co; ++o) {
      T* oc = op + o * OH * OW;
      std::fill(oc, oc + OH * OW, b.data[o]);
      for (size_t c = 0; c < Ci; ++c) {
        const T* icp = ip + c * H * W;
        const T* kc = kp + (o * Ci + c) * kh * kw;
        for (size_t i = 0; i < kh; ++i) {
          for (size_t j = 0; j < kw; ++j) {
            T kv = kc[i * kw + j];
            for (size_t y = 0; y < OH; ++y) {
              const T* irow = icp + (y + i) * W + j;
              T* orow = oc + y * OW;
              for (size_t x = 0; x < OW; ++x) orow[x] += kv * irow[x];
            }
          }
        }
      }
    }
  }

  bool ng = t.needs_grad(input) || t.needs_grad(kernel) || t.needs_grad(bias);
  NodeId id = t.emplace(std::move(out), ng);
  t.set_backward(id, [=](Tape<T>& tp) {
    const Tensor<T>& g = tp.grad(id);
    const Tensor<T>& inv = tp.value(input);
    const Tensor<T>& kv = tp.value(kernel);
    if (tp.needs_grad(bias)) {
      Tensor<T>& gb = tp.grad(bias);
      for (size_t o = 0; o < Co; ++o) {
        const T* gc = g.ptr() + o * OH * OW;
        T s{};
        for (size_t i = 0; i < OH * OW; ++i) s += gc[i];
        gb.data[o] += s;
      }
    }
    if (tp.needs_grad(kernel)) {
      Tensor<T>& gk = tp.grad(kernel);
      for (size_t o = 0; o < Co; ++o) {
        const T* gc = g.ptr() + o * OH * OW;
        for (size_t c = 0; c < Ci; ++c) {
          const T* icp = inv.ptr() + c * H * W;
          T* gkc = gk.ptr() + (o * Ci + c) * kh * kw;
          for (size_t i = 0; i < kh; ++i) {
            for (size_t j = 0; j < kw; ++j) {
              T s{};
              for (size_t y = 0; y < OH; ++y) {
                const T* irow = icp + (y + i) * W + j;
                const T* grow = gc + y * OW;
                for (size_t x = 0; x < OW; ++x) s += grow[x] * irow[x];
              }
              gkc[i * kw + j] += s;
            }
          }
        }
      }
    }
    if (tp.needs_grad(input)) {
      Tensor<T>& gi = tp.grad(input);
      for (size_t o = 0; o < Co; ++o) {
        const T* gc = g.ptr() + o * OH * OW;
        for (size_t c = 0; c < Ci; ++c) {
          T* gic = gi.ptr() + c * H * W;
          const T* kc = kv.ptr() + (o * Ci + c) * kh * kw;
          for (size_t i = 0; i < kh; ++i) {
            for (size_t j = 0; j < kw; ++j) {
              T kk = kc[i * kw + j];
              for (size_t y = 0; y < OH; ++y) {
                T* irow = gic + (y + i) * W + j;
                const T* grow = gc + y * OW;
                for (size_t x = 0; x < OW; ++x) irow[x] += kk * grow[x];
              }
            }
          }
        }
      }
    }
  });
  return id;
}

// ---------------------------------------------------------------------------
// maxpool2: [C,H,W] -> [C,H/2,W/2], H and W even. Ties go to the first
// element of the window in row-major order so the backward route is unique.
// ---------------------------------------------------------------------------
template <class T>
NodeId maxpool2(Tape<T>& t, NodeId input) {
  const Tensor<T>& in = t.value(input);
  detail::expect_rank(in, 3, "maxpool2 input");
  const size_t C = in.dim(0), H = in.dim(1), W = in.dim(2);
  if (H % 2 != 0 || W % 2 != 0)
    throw DimError(strprintf("maxpool2: spatial extents must be even, got %zux%zu", H, W));
  const size_t OH = H / 2, OW = W / 2;

  Tensor<T> out({C, OH, OW});
  auto argmax = std::make_shared<std::vector<uint32_t>>(C * OH * OW);
  {
    const T* ip = in.ptr();
    T* op = out.ptr();
    uint32_t* ap = argmax->data();
    for (size_t c = 0; c < C; ++c) {
      const T* icp = ip + c * H * W;
      for (size_t y = 0; y < OH; ++y) {
        for (size_t x = 0; x < OW; ++x) {
          size_t base = (2 * y) * W + 2 * x;
          size_t best = base;
          T bv = icp[base];
          const size_t cand[3] = {base + 1, base + W, base + W + 1};
          for (size_t q = 0; q < 3; ++q) {
            if (icp[cand[q]] > bv) {
              bv = icp[cand[q]];
              best = cand[q];
            }
          }
          op[(c * OH + y) * OW + x] = bv;
          ap[(c * OH + y) * OW + x] = static_cast<uint32_t>(c * H * W + best);
        }
      }
    }
  }

  bool ng = t.needs_grad(input);
  NodeId id = t.emplace(std::move(out), ng);
  t.set_backward(id, [=](Tape<T>& tp) {
    const Tensor<T>& g = tp.grad(id);
    Tensor<T>& gi = tp.grad(input);
    const uint32_t* ap = argmax->data();
    for (size_t i = 0; i < g.numel(); ++i) gi.data[ap[i]] += g.data[i];
  });
  return id;
}

// Pool argmax indices for callers that need the routing record.
template <class T>
std::vector<uint32_t> maxpool2_indices(const Tensor<T>& in) {
  const size_t C = in.dim(0), H = in.dim(1), W = in.dim(2);
  if (H % 2 != 0 || W % 2 != 0)
    throw DimError(strprintf("maxpool2: spatial extents must be even, got %zux%zu", H, W));
  std::vector<uint32_t> idx(C * (H / 2) * (W / 2));
  const T* ip = in.ptr();
  size_t n = 0;
  for (size_t c = 0; c < C; ++c) {
    const T* icp = ip + c * H * W;
    for (size_t y = 0; y < H / 2; ++y) {
      for (size_t x = 0; x < W / 2; ++x) {
        size_t base = (2 * y) * W + 2 * x;
        size_t best = base;
        T bv = icp[base];
        const size_t cand[3] = {base + 1, base + W, base + W + 1};
        for (size_t q = 0; q < 3; ++q)
          if (icp[cand[q]] > bv) bv = icp[cand[q]], best = cand[q];
        idx[n++] = static_cast<uint32_t>(c * H * W + best);
      }
    }
  }
  return idx;
}

// ---------------------------------------------------------------------------
// upconv2: transposed convolution, stride 2, 2x2 kernel, no overlap.
// input [Ci,H,W], kernel [Ci,Co,2,2], bias [Co] -> [Co,2H,2W]
// ---------------------------------------------------------------------------
template <class T>
NodeId upconv2(Tape<T>& t, NodeId input, NodeId kernel, NodeId bias) {
  const Tensor<T>& in = t.value(input);
  const Tensor<T>& k = t.value(kernel);
  const Tensor<T>& b = t.value(bias);
  detail::expect_rank(in, 3, "upconv2 input");
  detail::expect_rank(k, 4, "upconv2 kernel");
  detail::expect_rank(b, 1, "upconv2 bias");
  const size_t Ci = in.dim(0), H = in.dim(1), W = in.dim(2);
  const size_t Co = k.dim(1);
  if (k.dim(0) != Ci)
    throw DimError(strprintf("upconv2: kernel expects %zu input channels, input has %zu", k.dim(0),
                             Ci));
  if (k.dim(2) != 2 || k.dim(3) != 2) throw DimError("upconv2: kernel spatial extent must be 2x2");
  if (b.dim(0) != Co)
    throw DimError(
        strprintf("upconv2: bias has %zu entries for %zu output channels", b.dim(0), Co));
  const size_t OH = 2 * H, OW = 2 * W;

  Tensor<T> out({Co, OH, OW});
  {
    const T* ip = in.ptr();
    const T* kp = k.ptr();
    T* op = out.ptr();
    for (size_t o = 0; o < Co; ++o) {
      T* oc = op + o * OH * OW;
      std::fill(oc, oc + OH * OW, b.data[o]);
      for (size_t c = 0; c < Ci; ++c) {
        const T* icp = ip + c * H * W;
        const T* kc = kp + (c * Co + o) * 4;
        for (size_t i = 0; i < 2; ++i) {
          for (size_t j = 0; j < 2; ++j) {
            T kv = kc[i * 2 + j];
            for (size_t y = 0; y < H; ++y) {
              const T* irow = icp + y * W;
              T* orow = oc + (2 * y + i) * OW + j;
              for (size_t x = 0; x < W; ++x) orow[2 * x] += kv * irow[x];
            }
          }
        }
      }
    }
  }

  bool ng = t.needs_grad(input) || t.needs_grad(kernel) || t.needs_grad(bias);
  NodeId id = t.emplace(std::move(out), ng);
  t.set_backward(id, [=](Tape<T>& tp) {
    const Tensor<T>& g = tp.grad(id);
    const Tensor<T>& inv = tp.value(input);
    const Tensor<T>& kv = tp.value(kernel);
    if (tp.needs_grad(bias)) {
      Tensor<T>& gb = tp.grad(bias);
      for (size_t o = 0; o < Co; ++o) {
        const T* gc = g.ptr() + o * OH * OW;
        T s{};
        for (size_t i = 0; i < OH * OW; ++i) s += gc[i];
        gb.data[o] += s;
      }
    }
    if (tp.needs_grad(kernel)) {
      Tensor<T>& gk = tp.grad(kernel);
      for (size_t c = 0; c < Ci; ++c) {
        const T* icp = inv.ptr() + c * H * W;
        for (size_t o = 0; o < Co; ++o) {
          const T* gc = g.ptr() + o * OH * OW;
          T* gkc = gk.ptr() + (c * Co + o) * 4;
          for (size_t i = 0; i < 2; ++i) {
            for (size_t j = 0; j < 2; ++j) {
              T s{};
              for (size_t y = 0; y < H; ++y) {
                const T* irow = icp + y * W;
                const T* grow = gc + (2 * y + i) * OW + j;
                for (size_t x = 0; x < W; ++x) s += irow[x] * grow[2 * x];
              }
              gkc[i * 2 + j] += s;
            }
          }
        }
      }
    }
    if (tp.needs_grad(input)) {
      Tensor<T>& gi = tp.grad(input);
      for (size_t c = 0; c < Ci; ++c) {
        T* gic = gi.ptr() + c * H * W;
        for (size_t o = 0; o < Co; ++o) {
          const T* gc = g.ptr() + o * OH * OW;
          const T* kc = kv.ptr() + (c * Co + o) * 4;
          for (size_t i = 0; i < 2; ++i) {
            for (size_t j = 0; j < 2; ++j) {
              T kk = kc[i * 2 + j];
              for (size_t y = 0; y < H; ++y) {
                T* irow = gic + y * W;
                const T* grow = gc + (2 * y + i) * OW + j;
                for (size_t x = 0; x < W; ++x) irow[x] += kk * grow[2 * x];
              }
            }
          }
        }
      }
    }
  });
  return id;
}

// ---------------------------------------------------------------------------
// crop_center: [C,H,W] -> [C,h,w], symmetric crop (floor on odd remainders).
// ---------------------------------------------------------------------------
template <class T>
NodeId crop_center(Tape<T>& t, NodeId input, size_t h, size_t w) {
  const Tensor<T>& in = t.value(input);
  detail::expect_rank(in, 3, "crop_center input");
  const size_t C = in.dim(0), H = in.dim(1), W = in.dim(2);
  if (h > H || w > W)
    throw DimError(strprintf("crop_center: target %zux%zu exceeds input %zux%zu", h, w, H, W));
  const size_t oy = (H - h) / 2, ox = (W - w) / 2;

  Tensor<T> out({C, h, w});
  for (size_t c = 0; c < C; ++c)
    for (size_t y = 0; y < h; ++y) {
      const T* src = in.ptr() + (c * H + y + oy) * W + ox;
      T* dst = out.ptr() + (c * h + y) * w;
      std::copy(src, src + w, dst);
    }

  bool ng = t.needs_grad(input);
  NodeId id = t.emplace(std::move(out), ng);
  t.set_backward(id, [=](Tape<T>& tp) {
    const Tensor<T>& g = tp.grad(id);
    Tensor<T>& gi = tp.grad(input);
    for (size_t c = 0; c < C; ++c)
      for (size_t y = 0; y < h; ++y) {
        const T* src = g.ptr() + (c * h + y) * w;
        T* dst = gi.ptr() + (c * H + y + oy) * W + ox;
        for (size_t x = 0; x < w; ++x) dst[x] += src[x];
      }
  });
  return id;
}

// ---------------------------------------------------------------------------
// concat_channels: [C1,H,W] + [C2,H,W] -> [C1+C2,H,W], a's channels first.
// ---------------------------------------------------------------------------
template <class T>
NodeId concat_channels(Tape<T>& t, NodeId a, NodeId b) {
  const Tensor<T>& av = t.value(a);
  const Tensor<T>& bv = t.value(b);
  detail::expect_rank(av, 3, "concat_channels a");
  detail::expect_rank(bv, 3, "concat_channels b");
  if (av.dim(1) != bv.dim(1) || av.dim(2) != bv.dim(2))
    throw DimError(strprintf("concat_channels: spatial extents differ, %zux%zu vs %zux%zu",
                             av.dim(1), av.dim(2), bv.dim(1), bv.dim(2)));
  const size_t C1 = av.dim(0), C2 = bv.dim(0), H = av.dim(1), W = av.dim(2);

  Tensor<T> out({C1 + C2, H, W});
  std::copy(av.data.begin(), av.data.end(), out.data.begin());
  std::copy(bv.data.begin(), bv.data.end(), out.data.begin() + av.numel());

  bool ng = t.needs_grad(a) || t.needs_grad(b);
  NodeId id = t.emplace(std::move(out), ng);
  t.set_backward(id, [=, na = av.numel(), nb = bv.numel()](Tape<T>& tp) {
    const Tensor<T>& g = tp.grad(id);
    if (tp.needs_grad(a)) {
      Tensor<T>& ga = tp.grad(a);
      for (size_t i = 0; i < na; ++i) ga.data[i] += g.data[i];
    }
    if (tp.needs_grad(b)) {
      Tensor<T>& gb = tp.grad(b);
      for (size_t i = 0; i < nb; ++i) gb.data[i] += g.data[na + i];
    }
  });
  return id;
}

// ---------------------------------------------------------------------------
// slice_channels: [C,H,W] -> [c1-c0,H,W]
// ---------------------------------------------------------------------------
template <class T>
NodeId slice_channels(Tape<T>& t, NodeId input, size_t c0, size_t c1) {
  const Tensor<T>& in = t.value(input);
  detail::expect_rank(in, 3, "slice_channels input");
  const size_t C = in.dim(0), H = in.dim(1), W = in.dim(2);
  if (c0 >= c1 || c1 > C)
    throw DimError(strprintf("slice_channels: range [%zu,%zu) invalid for %zu channels", c0, c1, C));

  Tensor<T> out({c1 - c0, H, W});
  std::copy(in.data.begin() + c0 * H * W, in.data.begin() + c1 * H * W, out.data.begin());

  bool ng = t.needs_grad(input);
  NodeId id = t.emplace(std::move(out), ng);
  t.set_backward(id, [=](Tape<T>& tp) {
    const Tensor<T>& g = tp.grad(id);
    Tensor<T>& gi = tp.grad(input);
    size_t off = c0 * H * W;
    for (size_t i = 0; i < g.numel(); ++i) gi.data[off + i] += g.data[i];
  });
  return id;
}

// ---------------------------------------------------------------------------
// dense: x [Fin], weight [Fout,Fin], optional bias [Fout] -> [Fout]
// ---------------------------------------------------------------------------
template <class T>
NodeId dense(Tape<T>& t, NodeId x, NodeId weight, NodeId bias = kNoNode) {
  const Tensor<T>& xv = t.value(x);
  const Tensor<T>& wv = t.value(weight);
  detail::expect_rank(xv, 1, "dense input");
  detail::expect_rank(wv, 2, "dense weight");
  const size_t Fin = xv.dim(0), Fout = wv.dim(0);
  if (wv.dim(1) != Fin)
    throw DimError(
        strprintf("dense: weight expects %zu inputs, vector has %zu", wv.dim(1), Fin));
  if (bias != kNoNode && t.value(bias).dim(0) != Fout)
    throw DimError(strprintf("dense: bias has %zu entries for %zu outputs",
                             t.value(bias).dim(0), Fout));

  Tensor<T> out({Fout});
  for (size_t i = 0; i < Fout; ++i) {
    T s = bias != kNoNode ? t.value(bias).data[i] : T{};
    const T* wr = wv.ptr() + i * Fin;
    for (size_t j = 0; j < Fin; ++j) s += wr[j] * xv.data[j];
    out.data[i] = s;
  }

  bool ng = t.needs_grad(x) || t.needs_grad(weight) || (bias != kNoNode && t.needs_grad(bias));
  NodeId id = t.emplace(std::move(out), ng);
  t.set_backward(id, [=](Tape<T>& tp) {
    const Tensor<T>& g = tp.grad(id);
    const Tensor<T>& xvv = tp.value(x);
    const Tensor<T>& wvv = tp.value(weight);
    if (bias != kNoNode && tp.needs_grad(bias)) {
      Tensor<T>& gb = tp.grad(bias);
      for (size_t i = 0; i < Fout; ++i) gb.data[i] += g.data[i];
    }
    if (tp.needs_grad(weight)) {
      Tensor<T>& gw = tp.grad(weight);
      for (size_t i = 0; i < Fout; ++i)
        for (size_t j = 0; j < Fin; ++j) gw.data[i * Fin + j] += g.data[i] * xvv.data[j];
    }
    if (tp.needs_grad(x)) {
      Tensor<T>& gx = tp.grad(x);
      for (size_t i = 0; i < Fout; ++i)
        for (size_t j = 0; j < Fin; ++j) gx.data[j] += g.data[i] * wvv.data[i * Fin + j];
    }
  });
  return id;
}

namespace detail {

// Branch-stable sigmoid; never exponentiates a positive argument.
template <class T>
inline T sigmoid_stable(T x) {
  if (x >= T{0}) {
    return T{1} / (T{1} + std::exp(-x));
  }
  T e = std::exp(x);
  return e / (T{1} + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// pointwise relu / sigmoid (any shape)
// ---------------------------------------------------------------------------
template <class T>
NodeId relu(Tape<T>& t, NodeId x) {
  const Tensor<T>& xv = t.value(x);
  Tensor<T> out;
  out.shape = xv.shape;
  out.data.resize(xv.numel());
  for (size_t i = 0; i < xv.numel(); ++i) out.data[i] = xv.data[i] > T{0} ? xv.data[i] : T{0};

  bool ng = t.needs_grad(x);
  NodeId id = t.emplace(std::move(out), ng);
  t.set_backward(id, [=](Tape<T>& tp) {
    const Tensor<T>& g = tp.grad(id);
    const Tensor<T>& xp = tp.value(x);
    Tensor<T>& gx = tp.grad(x);
    for (size_t i = 0; i < g.numel(); ++i)
      if (xp.data[i] > T{0}) gx.data[i] += g.data[i];
  });
  return id;
}

template <class T>
NodeId sigmoid(Tape<T>& t, NodeId x) {
  const Tensor<T>& xv = t.value(x);
  Tensor<T> out;
  out.shape = xv.shape;
  out.data.resize(xv.numel());
  for (size_t i = 0; i < xv.numel(); ++i) out.data[i] = detail::sigmoid_stable(xv.data[i]);

  bool ng = t.needs_grad(x);
  NodeId id = t.emplace(std::move(out), ng);
  t.set_backward(id, [=](Tape<T>& tp) {
    const Tensor<T>& g = tp.grad(id);
    const Tensor<T>& s = tp.value(id);
    Tensor<T>& gx = tp.grad(x);
    for (size_t i = 0; i < g.numel(); ++i) gx.data[i] += g.data[i] * s.data[i] * (T{1} - s.data[i]);
  });
  return id;
}

// ---------------------------------------------------------------------------
// channel_mean: [F,H,W] -> [F] spatial means (the SE "squeeze").
// ---------------------------------------------------------------------------
template <class T>
NodeId channel_mean(Tape<T>& t, NodeId x) {
  const Tensor<T>& xv = t.value(x);
  detail::expect_rank(xv, 3, "channel_mean input");
  const size_t F = xv.dim(0), HW = xv.dim(1) * xv.dim(2);

  Tensor<T> out({F});
  for (size_t f = 0; f < F; ++f) {
    T s{};
    const T* p = xv.ptr() + f * HW;
    for (size_t i = 0; i < HW; ++i) s += p[i];
    out.data[f] = s / static_cast<T>(HW);
  }

  bool ng = t.needs_grad(x);
  NodeId id = t.emplace(std::move(out), ng);
  t.set_backward(id, [=](Tape<T>& tp) {
    const Tensor<T>& g = tp.grad(id);
    Tensor<T>& gx = tp.grad(x);
    for (size_t f = 0; f < F; ++f) {
      T gv = g.data[f] / static_cast<T>(HW);
      T* p = gx.ptr() + f * HW;
      for (size_t i = 0; i < HW; ++i) p[i] += gv;
    }
  });
  return id;
}

// ---------------------------------------------------------------------------
// channel_scale: out[f,:,:] = w[f] * x[f,:,:] (the SE/ME "excite").
// ---------------------------------------------------------------------------
template <class T>
NodeId channel_scale(Tape<T>& t, NodeId x, NodeId w) {
  const Tensor<T>& xv = t.value(x);
  const Tensor<T>& wv = t.value(w);
  detail::expect_rank(xv, 3, "channel_scale input");
  detail::expect_rank(wv, 1, "channel_scale weights");
  const size_t F = xv.dim(0), HW = xv.dim(1) * xv.dim(2);
  if (wv.dim(0) != F)
    throw DimError(
        strprintf("channel_scale: %zu weights for %zu channels", wv.dim(0), F));

  Tensor<T> out;
  out.shape = xv.shape;
  out.data.resize(xv.numel());
  for (size_t f = 0; f < F; ++f) {
    T s = wv.data[f];
    const T* p = xv.ptr() + f * HW;
    T* q = out.ptr() + f * HW;
    for (size_t i = 0; i < HW; ++i) q[i] = s * p[i];
  }

  bool ng = t.needs_grad(x) || t.needs_grad(w);
  NodeId id = t.emplace(std::move(out), ng);
  t.set_backward(id, [=](Tape<T>& tp) {
    const Tensor<T>& g = tp.grad(id);
    const Tensor<T>& xp = tp.value(x);
    const Tensor<T>& wp = tp.value(w);
    if (tp.needs_grad(w)) {
      Tensor<T>& gw = tp.grad(w);
      for (size_t f = 0; f < F; ++f) {
        T s{};
        const T* gp = g.ptr() + f * HW;
        const T* p = xp.ptr() + f * HW;
        for (size_t i = 0; i < HW; ++i) s += gp[i] * p[i];
        gw.data[f] += s;
      }
    }
    if (tp.needs_grad(x)) {
      Tensor<T>& gx = tp.grad(x);
      for (size_t f = 0; f < F; ++f) {
        T s = wp.data[f];
        const T* gp = g.ptr() + f * HW;
        T* p = gx.ptr() + f * HW;
        for (size_t i = 0; i < HW; ++i) p[i] += s * gp[i];
      }
    }
  });
  return id;
}

// ---------------------------------------------------------------------------
// stack_mean_std: n feature maps [F,h,w] -> [2F,h,w]; first block elementwise
// mean, second block population standard deviation (exactly zero for n=1).
// ---------------------------------------------------------------------------
template <class T>
NodeId stack_mean_std(Tape<T>& t, const std::vector<NodeId>& inputs) {
  if (inputs.empty()) throw ContractError("stack_mean_std: empty input list");
  const Tensor<T>& first = t.value(inputs[0]);
  detail::expect_rank(first, 3, "stack_mean_std input");
  for (NodeId nid : inputs)
    if (!t.value(nid).same_shape(first))
      throw DimError("stack_mean_std: all feature maps must share a shape");
  const size_t F = first.dim(0), H = first.dim(1), W = first.dim(2);
  const size_t N = F * H * W;
  const T n = static_cast<T>(inputs.size());

  Tensor<T> out({2 * F, H, W});
  T* mp = out.ptr();
  T* sp = out.ptr() + N;
  for (size_t i = 0; i < N; ++i) {
    T s{};
    for (NodeId nid : inputs) s += t.value(nid).data[i];
    mp[i] = s / n;
  }
  if (inputs.size() == 1) {
    std::fill(sp, sp + N, T{0});
  } else {
    for (size_t i = 0; i < N; ++i) {
      T acc{};
      for (NodeId nid : inputs) {
        T d = t.value(nid).data[i] - mp[i];
        acc += d * d;
      }
      sp[i] = std::sqrt(acc / n);
    }
  }

  bool ng = false;
  for (NodeId nid : inputs) ng = ng || t.needs_grad(nid);
  NodeId id = t.emplace(std::move(out), ng);
  t.set_backward(id, [=](Tape<T>& tp) {
    const Tensor<T>& g = tp.grad(id);
    const Tensor<T>& v = tp.value(id);
    const T* gm = g.ptr();
    const T* gs = g.ptr() + N;
    const T* mu = v.ptr();
    const T* sd = v.ptr() + N;
    const T tiny = static_cast<T>(1e-12);
    for (NodeId nid : inputs) {
      if (!tp.needs_grad(nid)) continue;
      Tensor<T>& gi = tp.grad(nid);
      const Tensor<T>& xi = tp.value(nid);
      for (size_t i = 0; i < N; ++i) {
        T d = gm[i] / n;
        if (sd[i] > tiny) d += gs[i] * (xi.data[i] - mu[i]) / (n * sd[i]);
        gi.data[i] += d;
      }
    }
  });
  return id;
}

// flatten to rank 1; gradient passes through unchanged.
template <class T>
NodeId flatten(Tape<T>& t, NodeId x) {
  const Tensor<T>& xv = t.value(x);
  Tensor<T> out;
  out.shape = {xv.numel()};
  out.data = xv.data;

  bool ng = t.needs_grad(x);
  NodeId id = t.emplace(std::move(out), ng);
  t.set_backward(id, [=](Tape<T>& tp) {
    const Tensor<T>& g = tp.grad(id);
    Tensor<T>& gx = tp.grad(x);
    for (size_t i = 0; i < g.numel(); ++i) gx.data[i] += g.data[i];
  });
  return id;
}

// ---------------------------------------------------------------------------
// reductions and arithmetic glue
// ---------------------------------------------------------------------------
template <class T>
NodeId sum_all(Tape<T>& t, NodeId x) {
  const Tensor<T>& xv = t.value(x);
  T s{};
  for (const T& v : xv.data) s += v;

  bool ng = t.needs_grad(x);
  NodeId id = t.emplace(Tensor<T>::scalar(s), ng);
  t.set_backward(id, [=](Tape<T>& tp) {
    T gv = tp.grad(id).data[0];
    Tensor<T>& gx = tp.grad(x);
    for (auto& v : gx.data) v += gv;
  });
  return id;
}

template <class T>
NodeId add(Tape<T>& t, NodeId a, NodeId b) {
  const Tensor<T>& av = t.value(a);
  const Tensor<T>& bv = t.value(b);
  if (!av.same_shape(bv)) throw DimError("add: shape mismatch");
  Tensor<T> out;
  out.shape = av.shape;
  out.data.resize(av.numel());
  for (size_t i = 0; i < av.numel(); ++i) out.data[i] = av.data[i] + bv.data[i];

  bool ng = t.needs_grad(a) || t.needs_grad(b);
  NodeId id = t.emplace(std::move(out), ng);
  t.set_backward(id, [=](Tape<T>& tp) {
    const Tensor<T>& g = tp.grad(id);
    if (tp.needs_grad(a)) tp.accumulate(a, g);
    if (tp.needs_grad(b)) tp.accumulate(b, g);
  });
  return id;
}

template <class T>
NodeId mul(Tape<T>& t, NodeId a, NodeId b) {
  const Tensor<T>& av = t.value(a);
  const Tensor<T>& bv = t.value(b);
  if (!av.same_shape(bv)) throw DimError("mul: shape mismatch");
  Tensor<T> out;
  out.shape = av.shape;
  out.data.resize(av.numel());
  for (size_t i = 0; i < av.numel(); ++i) out.data[i] = av.data[i] * bv.data[i];

  bool ng = t.needs_grad(a) || t.needs_grad(b);
  NodeId id = t.emplace(std::move(out), ng);
  t.set_backward(id, [=](Tape<T>& tp) {
    const Tensor<T>& g = tp.grad(id);
    if (tp.needs_grad(a)) {
      Tensor<T>& ga = tp.grad(a);
      const Tensor<T>& bb = tp.value(b);
      for (size_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i] * bb.data[i];
    }
    if (tp.needs_grad(b)) {
      Tensor<T>& gb = tp.grad(b);
      const Tensor<T>& aa = tp.value(a);
      for (size_t i = 0; i < g.numel(); ++i) gb.data[i] += g.data[i] * aa.data[i];
    }
  });
  return id;
}

template <class T>
NodeId scale(Tape<T>& t, NodeId x, T factor) {
  const Tensor<T>& xv = t.value(x);
  Tensor<T> out;
  out.shape = xv.shape;
  out.data.resize(xv.numel());
  for (size_t i = 0; i < xv.numel(); ++i) out.data[i] = factor * xv.data[i];

  bool ng = t.needs_grad(x);
  NodeId id = t.emplace(std::move(out), ng);
  t.set_backward(id, [=](Tape<T>& tp) {
    const Tensor<T>& g = tp.grad(id);
    Tensor<T>& gx = tp.grad(x);
    for (size_t i = 0; i < g.numel(); ++i) gx.data[i] += factor * g.data[i];
  });
  return id;
}

}  // namespace msme
