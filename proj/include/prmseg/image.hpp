#pragma once

#include <array>
#include <filesystem>
#include <vector>

#include "prmseg/volume.hpp"

namespace prmseg {

struct Image {
  int64_t rows = 0, cols = 0;
  std::vector<std::array<uint8_t, 3>> px;

  Image() = default;
  Image(int64_t r, int64_t c) : rows(r), cols(c), px(size_t(r * c), {0, 0, 0}) {}
  std::array<uint8_t, 3>& at(int64_t r, int64_t c) { return px[size_t(r * cols + c)]; }
  const std::array<uint8_t, 3>& at(int64_t r, int64_t c) const { return px[size_t(r * cols + c)]; }
};

// Binary PPM (P6).
void write_ppm(const std::filesystem::path& path, const Image& img);

// Axial slice of the target with ground-truth contours in red and
// predicted contours in blue.
Image slice_overlay(const Volume& target, const MaskVolume& gt, const MaskVolume& pred,
                    int64_t slice_k);

// Block-mean downsampling by 2^level, used to draw anchor context at a
// pyramid level's resolution.
Volume downsample_mean(const Volume& v, int level);

// One anchor slice at level resolution with the s x s weight patch around
// (center_i, center_j) rendered as a red overlay; `weights` holds the s^2
// weights of this dk-slice scaled by the caller.
Image heatmap_slice(const Volume& anchor_level, int64_t slice_k, int64_t center_i,
                    int64_t center_j, int s, const std::vector<double>& weights, double w_max);

}  // namespace prmseg
