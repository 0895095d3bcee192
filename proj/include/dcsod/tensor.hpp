#pragma once

// Dense row-major tensor. Activations use NCHW; matrices use (rows, cols).
// Float for training, double for gradient-check oracles.

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "dcsod/common.hpp"

namespace dcsod {

template <class S>
struct Tensor {
  std::vector<int> shape;
  std::vector<S> v;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)), v(size_t(count(shape)), S(0)) {}

  static int64_t count(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) {
      if (d <= 0) throw internal_error("tensor dimension must be positive");
      n *= d;
    }
    return n;
  }

  int64_t size() const { return int64_t(v.size()); }
  int ndim() const { return int(shape.size()); }
  int dim(int i) const { return shape[size_t(i)]; }

  S* data() { return v.data(); }
  const S* data() const { return v.data(); }

  // Slow-path accessors for tests and small code paths.
  S& at(int n, int c, int h, int w) {
    return v[size_t(((int64_t(n) * shape[1] + c) * shape[2] + h) * shape[3] + w)];
  }
  S at(int n, int c, int h, int w) const {
    return v[size_t(((int64_t(n) * shape[1] + c) * shape[2] + h) * shape[3] + w)];
  }
  S& at(int r, int c) { return v[size_t(int64_t(r) * shape[1] + c)]; }
  S at(int r, int c) const { return v[size_t(int64_t(r) * shape[1] + c)]; }

  void fill(S x) { std::fill(v.begin(), v.end(), x); }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }

  std::string shape_str() const {
    std::string s = "(";
    for (size_t i = 0; i < shape.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape[i]);
    }
    return s + ")";
  }

  template <class T>
  Tensor<T> cast() const {
    Tensor<T> out;
    out.shape = shape;
    out.v.resize(v.size());
    for (size_t i = 0; i < v.size(); ++i) out.v[i] = T(v[i]);
    return out;
  }
};

template <class S>
inline void require_shape(const Tensor<S>& t, const std::vector<int>& shape, const char* context) {
  if (t.shape != shape) {
    throw internal_error(std::string("shape mismatch in ") + context + ": got " + t.shape_str());
  }
}

}  // namespace dcsod
