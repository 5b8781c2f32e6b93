#pragma once

#include "msme/sampling.hpp"
#include "msme/tape.hpp"

namespace msme {

// Squeeze-and-Excitation: weights each feature channel by a learned function
// of its own spatial mean. Two dense layers F -> floor(F/2) -> F, no biases.
template <class T>
struct SEModule {
  Tensor<T> w1;  // [F/2, F]
  Tensor<T> w2;  // [F, F/2]

  static SEModule zeros(size_t f) {
    SEModule m;
    m.w1 = Tensor<T>::zeros({f / 2, f});
    m.w2 = Tensor<T>::zeros({f, f / 2});
    return m;
  }
  size_t features() const { return w2.dim(0); }
};

// Marker Excite: weights each feature channel by a learned function of the
// binary availability vector. Hidden width is 2^K - 1, one node per possible
// marker combination; biases in both layers unless ablated.
template <class T>
struct MEModule {
  Tensor<T> w1;  // [2^K-1, K]
  Tensor<T> b1;  // [2^K-1]
  Tensor<T> w2;  // [F, 2^K-1]
  Tensor<T> b2;  // [F]
  bool use_bias = true;

  static MEModule zeros(int k, size_t f, bool use_bias = true) {
    size_t hidden = (1u << k) - 1u;
    MEModule m;
    m.w1 = Tensor<T>::zeros({hidden, static_cast<size_t>(k)});
    m.b1 = Tensor<T>::zeros({hidden});
    m.w2 = Tensor<T>::zeros({f, hidden});
    m.b2 = Tensor<T>::zeros({f});
    m.use_bias = use_bias;
    return m;
  }
  size_t features() const { return w2.dim(0); }
  int markers() const { return static_cast<int>(w1.dim(1)); }
};

// Tape-level appliers used inside models. w/b arguments are tape nodes so
// gradients reach the module parameters.

template <class T>
NodeId se_apply(Tape<T>& t, NodeId x, NodeId w1, NodeId w2) {
  NodeId s = channel_mean(t, x);
  NodeId h = relu(t, dense(t, s, w1));
  NodeId w = sigmoid(t, dense(t, h, w2));
  return channel_scale(t, x, w);
}

template <class T>
NodeId me_weights(Tape<T>& t, const MarkerAvailability& v, NodeId w1, NodeId b1, NodeId w2,
                  NodeId b2, bool use_bias) {
  NodeId vin = t.leaf(v.to_vector<T>(), false);
  NodeId h = relu(t, dense(t, vin, w1, use_bias ? b1 : kNoNode));
  return sigmoid(t, dense(t, h, w2, use_bias ? b2 : kNoNode));
}

template <class T>
NodeId me_apply(Tape<T>& t, NodeId x, const MarkerAvailability& v, NodeId w1, NodeId b1,
                NodeId w2, NodeId b2, bool use_bias) {
  return channel_scale(t, x, me_weights(t, v, w1, b1, w2, b2, use_bias));
}

// Standalone forward passes matching the module-level contracts; these wrap
// a throwaway tape so tests and analysis code can call them on plain tensors.

template <class T>
Tensor<T> se_forward(const Tensor<T>& x, const SEModule<T>& m) {
  if (x.rank() != 3 || x.dim(0) != m.features())
    throw DimError(strprintf("se_forward: input %s does not match module with F=%zu",
                             shape_str(x.shape).c_str(), m.features()));
  Tape<T> t;
  NodeId xin = t.leaf(x, false);
  NodeId out = se_apply(t, xin, t.leaf(m.w1, false), t.leaf(m.w2, false));
  return t.value(out);
}

template <class T>
Tensor<T> me_forward(const Tensor<T>& x, const MarkerAvailability& v, const MEModule<T>& m) {
  if (v.k != m.markers())
    throw DimError(strprintf("me_forward: availability has K=%d, module expects K=%d", v.k,
                             m.markers()));
  if (x.rank() != 3 || x.dim(0) != m.features())
    throw DimError(strprintf("me_forward: input %s does not match module with F=%zu",
                             shape_str(x.shape).c_str(), m.features()));
  Tape<T> t;
  NodeId xin = t.leaf(x, false);
  NodeId out = me_apply(t, xin, v, t.leaf(m.w1, false), t.leaf(m.b1, false), t.leaf(m.w2, false),
                        t.leaf(m.b2, false), m.use_bias);
  return t.value(out);
}

// omega(v) alone, without applying it to a feature map; the recalibration
// analysis enumerates this over the whole combination lattice.
template <class T>
Tensor<T> excitation_vector(const MarkerAvailability& v, const MEModule<T>& m) {
  if (v.k != m.markers())
    throw DimError(strprintf("excitation_vector: availability has K=%d, module expects K=%d", v.k,
                             m.markers()));
  Tape<T> t;
  NodeId w = me_weights(t, v, t.leaf(m.w1, false), t.leaf(m.b1, false), t.leaf(m.w2, false),
                        t.leaf(m.b2, false), m.use_bias);
  return t.value(w);
}

}  // namespace msme
