#include "prmseg/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace prmseg {

void write_ppm(const std::filesystem::path& path, const Image& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write image " + path.string());
  f << "P6\n" << img.cols << " " << img.rows << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.px.data()), std::streamsize(img.px.size() * 3));
  if (!f) throw ConfigError("short write to " + path.string());
}

namespace {

uint8_t gray_of(float v) {
  return uint8_t(std::clamp(std::lround(double(v) * 255.0), 0l, 255l));
}

// In-slice 4-neighborhood boundary of a mask.
bool is_contour(const MaskVolume& m, int64_t i, int64_t j, int64_t k) {
  if (!m.at(i, j, k)) return false;
  const int64_t g = m.grid;
  const int64_t di[4] = {-1, 1, 0, 0}, dj[4] = {0, 0, -1, 1};
  for (int n = 0; n < 4; ++n) {
    const int64_t ii = i + di[n], jj = j + dj[n];
    if (ii < 0 || ii >= g || jj < 0 || jj >= g) return true;
    if (!m.at(ii, jj, k)) return true;
  }
  return false;
}

}  // namespace

Image slice_overlay(const Volume& target, const MaskVolume& gt, const MaskVolume& pred,
                    int64_t slice_k) {
  const int64_t g = target.grid;
  if (gt.grid != g || pred.grid != g) throw ShapeError("slice_overlay: grid mismatch");
  if (slice_k < 0 || slice_k >= g) throw ContractError("slice_overlay: slice out of bounds");
  Image img(g, g);
  for (int64_t i = 0; i < g; ++i)
    for (int64_t j = 0; j < g; ++j) {
      const uint8_t v = gray_of(target.at(i, j, slice_k));
      auto& px = img.at(i, j);
      px = {v, v, v};
      if (is_contour(gt, i, j, slice_k)) px = {255, 40, 40};
      if (is_contour(pred, i, j, slice_k)) px = {40, 80, 255};
    }
  return img;
}

Volume downsample_mean(const Volume& v, int level) {
  Volume out = v;
  for (int l = 0; l < level; ++l) {
    const int64_t g = out.grid / 2;
    Volume next(g);
    for (int64_t i = 0; i < g; ++i)
      for (int64_t j = 0; j < g; ++j)
        for (int64_t k = 0; k < g; ++k) {
          float s = 0;
          for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b)
              for (int c = 0; c < 2; ++c) s += out.at(2 * i + a, 2 * j + b, 2 * k + c);
          next.at(i, j, k) = s / 8.0f;
        }
    out = std::move(next);
  }
  return out;
}

Image heatmap_slice(const Volume& anchor_level, int64_t slice_k, int64_t center_i,
                    int64_t center_j, int s, const std::vector<double>& weights, double w_max) {
  const int64_t g = anchor_level.grid;
  if (slice_k < 0 || slice_k >= g) throw ContractError("heatmap_slice: slice out of bounds");
  if (int(weights.size()) != s * s) throw ContractError("heatmap_slice: need s*s weights");
  Image img(g, g);
  for (int64_t i = 0; i < g; ++i)
    for (int64_t j = 0; j < g; ++j) {
      const uint8_t v = gray_of(anchor_level.at(i, j, slice_k));
      img.at(i, j) = {v, v, v};
    }
  const int r = s / 2;
  for (int di = -r; di <= r; ++di)
    for (int dj = -r; dj <= r; ++dj) {
      const int64_t i = center_i + di, j = center_j + dj;
      if (i < 0 || i >= g || j < 0 || j >= g) continue;
      const double w = weights[size_t((di + r) + (dj + r) * s)];
      const double heat = w_max > 0 ? w / w_max : 0;
      auto& px = img.at(i, j);
      px[0] = uint8_t(std::clamp(std::lround(double(px[0]) * 0.35 + 255.0 * heat), 0l, 255l));
      px[1] = uint8_t(double(px[1]) * 0.35);
      px[2] = uint8_t(double(px[2]) * 0.35);
    }
  return img;
}

}  // namespace prmseg
