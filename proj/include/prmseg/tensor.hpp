#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "prmseg/common.hpp"

namespace prmseg {

// Dense row-major N-axis array. Feature maps are (H, W, D, M); correlation
// volumes are (s^3, H, W, D); scalars have shape {}.
template <typename T>
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
    data.assign(size_t(numel_of(shape)), T(0));
  }
  Tensor(std::vector<int64_t> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (int64_t(data.size()) != numel_of(shape))
      throw ShapeError("tensor data length does not match shape");
  }

  static int64_t numel_of(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (int64_t d : s) {
      if (d < 1) throw ShapeError("axis length must be >= 1");
      n *= d;
    }
    return n;
  }

  int64_t numel() const { return int64_t(data.size()); }
  bool is_scalar() const { return shape.empty() && data.size() == 1; }

  static Tensor scalar(T v) {
    Tensor t;
    t.data.assign(1, v);
    return t;
  }
  static Tensor full(std::vector<int64_t> s, T v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  // 4-axis accessors (the common case throughout the network).
  T& at4(int64_t i, int64_t j, int64_t k, int64_t c) {
    return data[size_t(((i * shape[1] + j) * shape[2] + k) * shape[3] + c)];
  }
  T at4(int64_t i, int64_t j, int64_t k, int64_t c) const {
    return data[size_t(((i * shape[1] + j) * shape[2] + k) * shape[3] + c)];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(double(v))) return false;
    return true;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << '(';
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ')';
    return os.str();
  }
};

template <typename T>
inline void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* who) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(who) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

}  // namespace prmseg
