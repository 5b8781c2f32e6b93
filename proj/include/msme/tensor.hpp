#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "msme/common.hpp"

namespace msme {

// Dense row-major N-d array. Plain value type: ops that participate in
// autodiff live on the Tape, this is just storage.
template <class T>
struct Tensor {
  std::vector<size_t> shape;
  std::vector<T> data;

  Tensor() = default;

  explicit Tensor(std::vector<size_t> s, T fill = T{})
      : shape(std::move(s)), data(count(shape), fill) {}

  Tensor(std::vector<size_t> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != count(shape)) throw DimError("tensor data does not match shape product");
  }

  static size_t count(const std::vector<size_t>& s) {
    size_t n = 1;
    for (size_t d : s) n *= d;
    return n;
  }

  static Tensor zeros(std::vector<size_t> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<size_t> s, T v) { return Tensor(std::move(s), v); }

  static Tensor scalar(T v) {
    Tensor t{std::vector<size_t>{}};
    t.data.assign(1, v);
    return t;
  }

  size_t numel() const { return data.size(); }
  size_t rank() const { return shape.size(); }
  size_t dim(size_t i) const { return shape[i]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  template <class... Ix>
  T& operator()(Ix... ix) {
    return data[offset(ix...)];
  }
  template <class... Ix>
  const T& operator()(Ix... ix) const {
    return data[offset(ix...)];
  }

  template <class... Ix>
  size_t offset(Ix... ix) const {
    assert(sizeof...(ix) == shape.size());
    size_t idx[] = {static_cast<size_t>(ix)...};
    size_t off = 0;
    for (size_t a = 0; a < sizeof...(ix); ++a) {
      assert(idx[a] < shape[a]);
      off = off * shape[a] + idx[a];
    }
    return off;
  }

  bool all_finite() const {
    for (const T& v : data) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

inline std::string shape_str(const std::vector<size_t>& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

template <class T>
Tensor<T> random_uniform(std::vector<size_t> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

template <class T>
Tensor<T> random_normal(std::vector<size_t> shape, Rng& rng, double sigma = 1.0) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data) v = static_cast<T>(sigma * rng.normal());
  return t;
}

}  // namespace msme
