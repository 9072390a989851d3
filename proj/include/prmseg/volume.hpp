#pragma once

#include <cstdint>
#include <vector>

#include "prmseg/common.hpp"
#include "prmseg/tensor.hpp"

namespace prmseg {

// Cubic intensity volume, values in [0,1], isotropic unit spacing.
struct Volume {
  int64_t grid = 0;
  std::vector<float> data;

  Volume() = default;
  explicit Volume(int64_t g) : grid(g), data(size_t(g * g * g), 0.0f) {}
  int64_t numel() const { return grid * grid * grid; }
  float& at(int64_t i, int64_t j, int64_t k) { return data[size_t((i * grid + j) * grid + k)]; }
  float at(int64_t i, int64_t j, int64_t k) const {
    return data[size_t((i * grid + j) * grid + k)];
  }
};

// Binary labels aligned with a Volume of the same grid.
struct MaskVolume {
  int64_t grid = 0;
  std::vector<uint8_t> data;

  MaskVolume() = default;
  explicit MaskVolume(int64_t g) : grid(g), data(size_t(g * g * g), 0) {}
  int64_t numel() const { return grid * grid * grid; }
  uint8_t& at(int64_t i, int64_t j, int64_t k) { return data[size_t((i * grid + j) * grid + k)]; }
  uint8_t at(int64_t i, int64_t j, int64_t k) const {
    return data[size_t((i * grid + j) * grid + k)];
  }
  int64_t foreground() const {
    int64_t n = 0;
    for (uint8_t v : data) n += v;
    return n;
  }
};

template <typename T>
Tensor<T> to_tensor(const Volume& v) {
  Tensor<T> t({v.grid, v.grid, v.grid, 1});
  for (size_t i = 0; i < v.data.size(); ++i) t.data[i] = T(v.data[i]);
  return t;
}

template <typename T>
Tensor<T> to_tensor(const MaskVolume& m) {
  Tensor<T> t({m.grid, m.grid, m.grid, 1});
  for (size_t i = 0; i < m.data.size(); ++i) t.data[i] = T(m.data[i]);
  return t;
}

inline void check_binary(const MaskVolume& m, const char* who) {
  for (uint8_t v : m.data)
    if (v > 1) throw ContractError(std::string(who) + ": mask labels must be in {0,1}");
}

}  // namespace prmseg
