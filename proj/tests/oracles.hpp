#pragma once

// Independent reference implementations used to pin expected values. These
// deliberately re-derive each result with the most literal loops possible and
// never call into the library's op implementations.

#include <algorithm>
#include <cmath>
#include <vector>

#include "msme/tensor.hpp"

namespace oracle {

using msme::Tensor;

// Direct convolution sum, one output cell at a time.
template <class T>
Tensor<T> conv2d(const Tensor<T>& in, const Tensor<T>& k, const Tensor<T>& b) {
  size_t Ci = in.dim(0), H = in.dim(1), W = in.dim(2);
  size_t Co = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  Tensor<T> out({Co, H - kh + 1, W - kw + 1});
  for (size_t o = 0; o < Co; ++o)
    for (size_t y = 0; y + kh <= H; ++y)
      for (size_t x = 0; x + kw <= W; ++x) {
        double s = b.data[o];
        for (size_t c = 0; c < Ci; ++c)
          for (size_t i = 0; i < kh; ++i)
            for (size_t j = 0; j < kw; ++j)
              s += static_cast<double>(in(c, y + i, x + j)) * static_cast<double>(k(o, c, i, j));
        out(o, y, x) = static_cast<T>(s);
      }
  return out;
}

// Exhaustive window scan.
template <class T>
Tensor<T> maxpool2(const Tensor<T>& in) {
  size_t C = in.dim(0), H = in.dim(1), W = in.dim(2);
  Tensor<T> out({C, H / 2, W / 2});
  for (size_t c = 0; c < C; ++c)
    for (size_t y = 0; y < H / 2; ++y)
      for (size_t x = 0; x < W / 2; ++x) {
        T m = in(c, 2 * y, 2 * x);
        for (size_t i = 0; i < 2; ++i)
          for (size_t j = 0; j < 2; ++j) m = std::max(m, in(c, 2 * y + i, 2 * x + j));
        out(c, y, x) = m;
      }
  return out;
}

// Explicit scatter loop for the stride-2 transposed convolution.
template <class T>
Tensor<T> upconv2(const Tensor<T>& in, const Tensor<T>& k, const Tensor<T>& b) {
  size_t Ci = in.dim(0), H = in.dim(1), W = in.dim(2);
  size_t Co = k.dim(1);
  Tensor<T> out({Co, 2 * H, 2 * W});
  for (size_t o = 0; o < Co; ++o)
    for (size_t y = 0; y < 2 * H; ++y)
      for (size_t x = 0; x < 2 * W; ++x) out(o, y, x) = b.data[o];
  for (size_t c = 0; c < Ci; ++c)
    for (size_t y = 0; y < H; ++y)
      for (size_t x = 0; x < W; ++x)
        for (size_t o = 0; o < Co; ++o)
          for (size_t i = 0; i < 2; ++i)
            for (size_t j = 0; j < 2; ++j)
              out(o, 2 * y + i, 2 * x + j) += in(c, y, x) * k(c, o, i, j);
  return out;
}

template <class T>
std::vector<T> dense(const std::vector<T>& x, const Tensor<T>& w, const std::vector<T>& b) {
  std::vector<T> out(w.dim(0));
  for (size_t i = 0; i < w.dim(0); ++i) {
    double s = b.empty() ? 0.0 : b[i];
    for (size_t j = 0; j < w.dim(1); ++j) s += static_cast<double>(w(i, j)) * x[j];
    out[i] = static_cast<T>(s);
  }
  return out;
}

// Two-pass elementwise mean / population std over a list of maps.
template <class T>
void mean_std(const std::vector<Tensor<T>>& maps, Tensor<T>& mean_out, Tensor<T>& std_out) {
  size_t n = maps[0].numel();
  mean_out = maps[0];
  std_out = maps[0];
  for (size_t i = 0; i < n; ++i) {
    double s = 0;
    for (const auto& m : maps) s += m.data[i];
    double mu = s / maps.size();
    double var = 0;
    for (const auto& m : maps) var += (m.data[i] - mu) * (m.data[i] - mu);
    mean_out.data[i] = static_cast<T>(mu);
    std_out.data[i] = static_cast<T>(std::sqrt(var / maps.size()));
  }
}

}  // namespace oracle
