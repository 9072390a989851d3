#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "prmseg/rng.hpp"
#include "prmseg/volume.hpp"

namespace prmseg {

struct Range {
  double lo = 0, hi = 0;
  double sample(Rng& rng) const { return rng.uniform(lo, hi); }
};

// Parameter ranges for one synthetic "organ" class: a superellipsoid with a
// characteristic position, size, exponent and brightness, plus per-sample
// jitter. Every generated volume renders the blobs of all classes (the
// scene), while the sample's mask marks only its own class's blob, so the
// class identity is not recoverable from the image alone.
struct ShapeClass {
  int class_id = 0;
  std::array<double, 3> center{0.5, 0.5, 0.5};  // fraction of grid
  std::array<Range, 3> semi_axes;               // fraction of grid
  Range exponent{2.0, 3.0};
  Range intensity_offset{0.25, 0.4};
  double rotate_max = 0.26;     // radians
  double translate_max = 0.06;  // fraction of grid
  Range scale{0.96, 1.08};
};

enum class Split { kTrain, kVal };

inline const char* split_name(Split s) { return s == Split::kTrain ? "train" : "val"; }

struct Sample {
  Volume vol;
  MaskVolume mask;
};

struct ClassPool {
  int class_id = 0;
  ShapeClass params;
  std::vector<Sample> samples;
  std::vector<Split> splits;  // parallel to samples; 80/20 train/val

  std::vector<int> indices_with(Split s) const {
    std::vector<int> out;
    for (size_t i = 0; i < splits.size(); ++i)
      if (splits[i] == s) out.push_back(int(i));
    return out;
  }
};

// One one-shot unit: the anchor pair is already aligned to the target.
struct Episode {
  Volume anchor;
  MaskVolume anchor_mask;
  Volume target;
  MaskVolume target_mask;
  int class_id = 0;
  bool align_fallback = false;
};

struct AlignResult {
  Volume vol;
  MaskVolume mask;
  std::array<int, 3> shift{0, 0, 0};
  bool fallback = false;  // empty-above-threshold input, identity used
};

// Deterministic class layouts for a corpus seed.
std::vector<ShapeClass> default_classes(int n_classes, uint64_t seed);

// Renders one sample of `class_id` with all classes' blobs in the scene.
Sample generate_sample(const std::vector<ShapeClass>& classes, int class_id, int64_t grid,
                       uint64_t sample_seed);

// Full corpus; per-sample sub-seeds come from derive_seed(seed, class, index)
// so the result is a pure function of the arguments.
std::vector<ClassPool> generate_corpus(const std::vector<ShapeClass>& classes, int n_per_class,
                                       int64_t grid, uint64_t seed);
std::vector<ClassPool> generate_corpus(int n_classes, int n_per_class, int64_t grid,
                                       uint64_t seed);

// Moment-based pre-alignment stand-in for registration: shifts the anchor
// (and its mask, identically) by the integer translation that moves the
// anchor's bright-voxel centroid onto the target's.
AlignResult align(const Volume& anchor, const MaskVolume& anchor_mask, const Volume& target);

Episode make_episode(const ClassPool& pool, int anchor_idx, int target_idx);

// Mixed-class batch: episodes from `batch` distinct class pools (when
// distinct_classes is on), anchor != target within each episode, drawn from
// the given split.
std::vector<Episode> sample_batch(const std::vector<ClassPool>& pools, int batch, Rng& rng,
                                  Split split = Split::kTrain, bool distinct_classes = true);

// The sample whose mask best matches the pool's anatomical-average mask
// (mean of aligned masks, thresholded at 0.5); ties break to the lowest
// index.
int select_anchor_index(const ClassPool& pool);

// ---------------------------------------------------------------------------
// On-disk corpus: one directory per class, raw little-endian payloads with a
// 16-byte header (magic, u32 version, u32 grid, u32 reserved), plus a
// corpus.json manifest.
// ---------------------------------------------------------------------------

void save_volume(const std::filesystem::path& path, const Volume& v);
void save_mask(const std::filesystem::path& path, const MaskVolume& m);
Volume load_volume(const std::filesystem::path& path);
MaskVolume load_mask(const std::filesystem::path& path);

void save_corpus(const std::filesystem::path& dir, const std::vector<ClassPool>& pools,
                 uint64_t seed);
std::vector<ClassPool> load_corpus(const std::filesystem::path& dir);

}  // namespace prmseg
