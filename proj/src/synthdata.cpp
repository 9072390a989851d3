#include "prmseg/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "prmseg/losses.hpp"

namespace prmseg {

using json = nlohmann::json;

namespace {

constexpr int64_t kMinGrid = 16;

struct Mat3 {
  std::array<double, 9> m;
  std::array<double, 3> apply_transposed(const std::array<double, 3>& v) const {
    return {m[0] * v[0] + m[3] * v[1] + m[6] * v[2], m[1] * v[0] + m[4] * v[1] + m[7] * v[2],
            m[2] * v[0] + m[5] * v[1] + m[8] * v[2]};
  }
};

Mat3 rotation(const std::array<double, 3>& axis, double angle) {
  double len = std::sqrt(axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]);
  if (len == 0) len = 1;
  const double x = axis[0] / len, y = axis[1] / len, z = axis[2] / len;
  const double c = std::cos(angle), s = std::sin(angle), t = 1 - c;
  return Mat3{{t * x * x + c, t * x * y - s * z, t * x * z + s * y,  //
               t * x * y + s * z, t * y * y + c, t * y * z - s * x,  //
               t * x * z - s * y, t * y * z + s * x, t * z * z + c}};
}

struct BlobInstance {
  std::array<double, 3> center_vox;
  std::array<double, 3> semi_axes_vox;
  double exponent;
  double offset;
  Mat3 rot;
};

BlobInstance instantiate(const ShapeClass& cls, int64_t grid, Rng& rng) {
  BlobInstance b;
  const double scale = cls.scale.sample(rng);
  for (int a = 0; a < 3; ++a) {
    const double jitter = rng.uniform(-cls.translate_max, cls.translate_max);
    b.center_vox[size_t(a)] = (cls.center[size_t(a)] + jitter) * double(grid);
    b.semi_axes_vox[size_t(a)] = cls.semi_axes[size_t(a)].sample(rng) * scale * double(grid);
  }
  b.exponent = cls.exponent.sample(rng);
  b.offset = cls.intensity_offset.sample(rng);
  std::array<double, 3> axis{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
  b.rot = rotation(axis, rng.uniform(0.0, cls.rotate_max));
  return b;
}

void render_blob(const BlobInstance& b, Volume& vol, MaskVolume* mask) {
  const int64_t grid = vol.grid;
  const double r_max = std::max({b.semi_axes_vox[0], b.semi_axes_vox[1], b.semi_axes_vox[2]});
  const auto clamp_lo = [&](double c) { return std::max<int64_t>(0, int64_t(std::floor(c - r_max)) - 1); };
  const auto clamp_hi = [&](double c) { return std::min(grid - 1, int64_t(std::ceil(c + r_max)) + 1); };
  for (int64_t i = clamp_lo(b.center_vox[0]); i <= clamp_hi(b.center_vox[0]); ++i)
    for (int64_t j = clamp_lo(b.center_vox[1]); j <= clamp_hi(b.center_vox[1]); ++j)
      for (int64_t k = clamp_lo(b.center_vox[2]); k <= clamp_hi(b.center_vox[2]); ++k) {
        const std::array<double, 3> d{double(i) - b.center_vox[0], double(j) - b.center_vox[1],
                                      double(k) - b.center_vox[2]};
        const auto u = b.rot.apply_transposed(d);
        double acc = 0;
        for (int a = 0; a < 3; ++a)
          acc += std::pow(std::abs(u[size_t(a)]) / b.semi_axes_vox[size_t(a)], b.exponent);
        if (acc > 1.0) continue;
        float& v = vol.at(i, j, k);
        v = std::min(1.0f, v + float(b.offset));
        if (mask) mask->at(i, j, k) = 1;
      }
}

}  // namespace

std::vector<ShapeClass> default_classes(int n_classes, uint64_t seed) {
  if (n_classes < 1) throw ContractError("default_classes: need at least one class");
  // 27 lattice slots, shuffled per seed; classes keep stable, well separated
  // characteristic positions the way organs do.
  std::vector<std::array<double, 3>> slots;
  for (double x : {0.3, 0.5, 0.7})
    for (double y : {0.3, 0.5, 0.7})
      for (double z : {0.3, 0.5, 0.7}) slots.push_back({x, y, z});
  if (n_classes > int(slots.size()))
    throw ConfigError("default_classes: at most " + std::to_string(slots.size()) + " classes");
  Rng rng(derive_seed(seed, 0xC1A5));
  for (size_t i = slots.size() - 1; i > 0; --i)
    std::swap(slots[i], slots[size_t(rng.below(uint64_t(i + 1)))]);

  std::vector<ShapeClass> classes;
  for (int c = 0; c < n_classes; ++c) {
    Rng crng(derive_seed(seed, 0xC1A5, uint64_t(c) + 1));
    ShapeClass cls;
    cls.class_id = c;
    cls.center = slots[size_t(c)];
    for (int a = 0; a < 3; ++a) {
      const double mid = crng.uniform(0.125, 0.165);
      cls.semi_axes[size_t(a)] = Range{mid - 0.007, mid + 0.007};
    }
    const double p = crng.uniform(2.2, 3.2);
    cls.exponent = Range{p - 0.15, p + 0.15};
    const double off = crng.uniform(0.25, 0.42);
    cls.intensity_offset = Range{off - 0.02, off + 0.02};
    cls.rotate_max = 0.26;
    cls.translate_max = 0.06;
    cls.scale = Range{0.96, 1.08};
    classes.push_back(cls);
  }
  return classes;
}

Sample generate_sample(const std::vector<ShapeClass>& classes, int class_id, int64_t grid,
                       uint64_t sample_seed) {
  if (grid < kMinGrid)
    throw ConfigError("grid " + std::to_string(grid) + " too small to contain the shapes (min " +
                      std::to_string(kMinGrid) + ")");
  Rng rng(sample_seed);
  Sample s;
  s.vol = Volume(grid);
  s.mask = MaskVolume(grid);
  for (float& v : s.vol.data)
    v = std::min(1.0f, std::max(0.0f, 0.3f + 0.05f * float(rng.gaussian())));
  // Scene blobs in class order; only the probed class writes the mask.
  for (const auto& cls : classes) {
    const BlobInstance blob = instantiate(cls, grid, rng);
    render_blob(blob, s.vol, cls.class_id == class_id ? &s.mask : nullptr);
  }
  if (s.mask.foreground() < 1)
    throw ContractError("generated mask has no foreground voxels");
  return s;
}

std::vector<ClassPool> generate_corpus(const std::vector<ShapeClass>& classes, int n_per_class,
                                       int64_t grid, uint64_t seed) {
  if (classes.size() < 2) throw ContractError("generate_corpus: need at least 2 classes");
  if (n_per_class < 2) throw ContractError("generate_corpus: need at least 2 samples per class");
  std::vector<ClassPool> pools;
  for (const auto& cls : classes) {
    ClassPool pool;
    pool.class_id = cls.class_id;
    pool.params = cls;
    const int n_train = n_per_class * 8 / 10;
    for (int i = 0; i < n_per_class; ++i) {
      pool.samples.push_back(
          generate_sample(classes, cls.class_id, grid, derive_seed(seed, uint64_t(cls.class_id), uint64_t(i))));
      pool.splits.push_back(i < n_train ? Split::kTrain : Split::kVal);
    }
    pools.push_back(std::move(pool));
  }
  return pools;
}

std::vector<ClassPool> generate_corpus(int n_classes, int n_per_class, int64_t grid,
                                       uint64_t seed) {
  return generate_corpus(default_classes(n_classes, seed), n_per_class, grid, seed);
}

AlignResult align(const Volume& anchor, const MaskVolume& anchor_mask, const Volume& target) {
  if (anchor.grid != target.grid || anchor.grid != anchor_mask.grid)
    throw ShapeError("align: grids differ");
  const auto centroid = [](const Volume& v, std::array<double, 3>& out) {
    float mx = 0;
    for (float x : v.data) mx = std::max(mx, x);
    const float thr = 0.5f * mx;
    double si = 0, sj = 0, sk = 0;
    int64_t n = 0;
    for (int64_t i = 0; i < v.grid; ++i)
      for (int64_t j = 0; j < v.grid; ++j)
        for (int64_t k = 0; k < v.grid; ++k)
          if (v.at(i, j, k) > thr) {
            si += double(i);
            sj += double(j);
            sk += double(k);
            ++n;
          }
    if (n == 0) return false;
    out = {si / double(n), sj / double(n), sk / double(n)};
    return true;
  };

  AlignResult res;
  std::array<double, 3> ca{}, ct{};
  if (!centroid(anchor, ca) || !centroid(target, ct)) {
    res.vol = anchor;
    res.mask = anchor_mask;
    res.fallback = true;
    return res;
  }
  for (int a = 0; a < 3; ++a) res.shift[size_t(a)] = int(std::lround(ct[size_t(a)] - ca[size_t(a)]));

  const int64_t g = anchor.grid;
  res.vol = Volume(g);
  res.mask = MaskVolume(g);
  for (int64_t i = 0; i < g; ++i)
    for (int64_t j = 0; j < g; ++j)
      for (int64_t k = 0; k < g; ++k) {
        const int64_t si = i - res.shift[0], sj = j - res.shift[1], sk = k - res.shift[2];
        if (si < 0 || si >= g || sj < 0 || sj >= g || sk < 0 || sk >= g) continue;
        res.vol.at(i, j, k) = anchor.at(si, sj, sk);
        res.mask.at(i, j, k) = anchor_mask.at(si, sj, sk);
      }
  return res;
}

Episode make_episode(const ClassPool& pool, int anchor_idx, int target_idx) {
  const Sample& anchor = pool.samples[size_t(anchor_idx)];
  const Sample& target = pool.samples[size_t(target_idx)];
  AlignResult aligned = align(anchor.vol, anchor.mask, target.vol);
  Episode ep;
  ep.anchor = std::move(aligned.vol);
  ep.anchor_mask = std::move(aligned.mask);
  ep.target = target.vol;
  ep.target_mask = target.mask;
  ep.class_id = pool.class_id;
  ep.align_fallback = aligned.fallback;
  return ep;
}

std::vector<Episode> sample_batch(const std::vector<ClassPool>& pools, int batch, Rng& rng,
                                  Split split, bool distinct_classes) {
  if (batch < 1) throw ContractError("sample_batch: batch must be >= 1");
  if (distinct_classes && batch > int(pools.size()))
    throw ConfigError("sample_batch: batch " + std::to_string(batch) + " exceeds the " +
                      std::to_string(pools.size()) +
                      " available class pools; disable distinct-class mode to allow repeats");
  std::vector<int> order(pools.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = int(i);
  std::vector<Episode> out;
  for (int b = 0; b < batch; ++b) {
    int pool_idx;
    if (distinct_classes) {
      const int pick = b + int(rng.below(uint64_t(int(order.size()) - b)));
      std::swap(order[size_t(b)], order[size_t(pick)]);
      pool_idx = order[size_t(b)];
    } else {
      pool_idx = int(rng.below(pools.size()));
    }
    const ClassPool& pool = pools[size_t(pool_idx)];
    const auto idxs = pool.indices_with(split);
    if (idxs.size() < 2)
      throw ConfigError("sample_batch: class " + std::to_string(pool.class_id) +
                        " has fewer than 2 samples in the requested split");
    const int a = int(rng.below(idxs.size()));
    int t = int(rng.below(idxs.size() - 1));
    if (t >= a) ++t;  // never pair a sample with itself
    out.push_back(make_episode(pool, idxs[size_t(a)], idxs[size_t(t)]));
  }
  return out;
}

int select_anchor_index(const ClassPool& pool) {
  if (pool.samples.empty()) throw ContractError("select_anchor: empty pool");
  const int n = int(pool.samples.size());
  if (n == 1) return 0;
  const Volume& ref = pool.samples[0].vol;
  std::vector<MaskVolume> aligned;
  aligned.reserve(size_t(n));
  for (const auto& s : pool.samples)
    aligned.push_back(align(s.vol, s.mask, ref).mask);

  const int64_t g = ref.grid;
  MaskVolume avg(g);
  for (int64_t v = 0; v < avg.numel(); ++v) {
    int count = 0;
    for (const auto& m : aligned) count += m.data[size_t(v)];
    avg.data[size_t(v)] = 2 * count >= n ? 1 : 0;  // mean mask thresholded at 0.5
  }

  int best = 0;
  double best_dice = -1;
  for (int i = 0; i < n; ++i) {
    const double d = dice_score(aligned[size_t(i)], avg);
    if (d > best_dice) {
      best_dice = d;
      best = i;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Disk format.
// ---------------------------------------------------------------------------

namespace {

void write_header(std::ofstream& f, const char magic[4], uint32_t grid) {
  const uint32_t version = 1, reserved = 0;
  f.write(magic, 4);
  f.write(reinterpret_cast<const char*>(&version), 4);
  f.write(reinterpret_cast<const char*>(&grid), 4);
  f.write(reinterpret_cast<const char*>(&reserved), 4);
}

uint32_t read_header(std::ifstream& f, const char magic[4], const std::filesystem::path& path) {
  char m[4];
  uint32_t version = 0, grid = 0, reserved = 0;
  f.read(m, 4);
  f.read(reinterpret_cast<char*>(&version), 4);
  f.read(reinterpret_cast<char*>(&grid), 4);
  f.read(reinterpret_cast<char*>(&reserved), 4);
  if (!f || std::memcmp(m, magic, 4) != 0)
    throw ConfigError("bad magic in " + path.string());
  if (version != 1) throw ConfigError("unsupported version in " + path.string());
  return grid;
}

std::string sample_stem(int i) {
  char buf[8];
  std::snprintf(buf, sizeof buf, "%03d", i);
  return buf;
}

std::string class_dir(int c) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "class_%03d", c);
  return buf;
}

json range_json(const Range& r) { return json::array({r.lo, r.hi}); }
Range range_from(const json& j) { return Range{j.at(0).get<double>(), j.at(1).get<double>()}; }

}  // namespace

void save_volume(const std::filesystem::path& path, const Volume& v) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write " + path.string());
  write_header(f, "OVOL", uint32_t(v.grid));
  f.write(reinterpret_cast<const char*>(v.data.data()), std::streamsize(v.data.size() * 4));
  if (!f) throw ConfigError("short write to " + path.string());
}

void save_mask(const std::filesystem::path& path, const MaskVolume& m) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write " + path.string());
  write_header(f, "OMSK", uint32_t(m.grid));
  f.write(reinterpret_cast<const char*>(m.data.data()), std::streamsize(m.data.size()));
  if (!f) throw ConfigError("short write to " + path.string());
}

Volume load_volume(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read " + path.string());
  Volume v(int64_t(read_header(f, "OVOL", path)));
  f.read(reinterpret_cast<char*>(v.data.data()), std::streamsize(v.data.size() * 4));
  if (!f) throw ConfigError("truncated volume " + path.string());
  return v;
}

MaskVolume load_mask(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read " + path.string());
  MaskVolume m(int64_t(read_header(f, "OMSK", path)));
  f.read(reinterpret_cast<char*>(m.data.data()), std::streamsize(m.data.size()));
  if (!f) throw ConfigError("truncated mask " + path.string());
  return m;
}

void save_corpus(const std::filesystem::path& dir, const std::vector<ClassPool>& pools,
                 uint64_t seed) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  json manifest;
  manifest["version"] = 1;
  manifest["seed"] = seed;
  manifest["grid"] = pools.empty() ? 0 : pools[0].samples.at(0).vol.grid;
  json jclasses = json::array();
  for (const auto& pool : pools) {
    const fs::path cdir = dir / class_dir(pool.class_id);
    fs::create_directories(cdir);
    json jc;
    jc["id"] = pool.class_id;
    jc["dir"] = class_dir(pool.class_id);
    jc["center"] = pool.params.center;
    jc["semi_axes"] = json::array({range_json(pool.params.semi_axes[0]),
                                   range_json(pool.params.semi_axes[1]),
                                   range_json(pool.params.semi_axes[2])});
    jc["exponent"] = range_json(pool.params.exponent);
    jc["intensity_offset"] = range_json(pool.params.intensity_offset);
    jc["rotate_max"] = pool.params.rotate_max;
    jc["translate_max"] = pool.params.translate_max;
    jc["scale"] = range_json(pool.params.scale);
    json jsamples = json::array();
    for (size_t i = 0; i < pool.samples.size(); ++i) {
      const std::string stem = sample_stem(int(i));
      save_volume(cdir / (stem + ".vol"), pool.samples[i].vol);
      save_mask(cdir / (stem + ".mask"), pool.samples[i].mask);
      jsamples.push_back({{"stem", stem}, {"split", split_name(pool.splits[i])}});
    }
    jc["samples"] = jsamples;
    jclasses.push_back(jc);
  }
  manifest["classes"] = jclasses;
  std::ofstream f(dir / "corpus.json");
  f << manifest.dump(2) << "\n";
  if (!f) throw ConfigError("cannot write manifest in " + dir.string());
}

std::vector<ClassPool> load_corpus(const std::filesystem::path& dir) {
  std::ifstream f(dir / "corpus.json");
  if (!f) throw ConfigError("no corpus manifest at " + (dir / "corpus.json").string());
  json manifest = json::parse(f);
  std::vector<ClassPool> pools;
  for (const auto& jc : manifest.at("classes")) {
    ClassPool pool;
    pool.class_id = jc.at("id").get<int>();
    pool.params.class_id = pool.class_id;
    pool.params.center = jc.at("center").get<std::array<double, 3>>();
    for (int a = 0; a < 3; ++a) pool.params.semi_axes[size_t(a)] = range_from(jc.at("semi_axes").at(a));
    pool.params.exponent = range_from(jc.at("exponent"));
    pool.params.intensity_offset = range_from(jc.at("intensity_offset"));
    pool.params.rotate_max = jc.at("rotate_max").get<double>();
    pool.params.translate_max = jc.at("translate_max").get<double>();
    pool.params.scale = range_from(jc.at("scale"));
    const std::filesystem::path cdir = dir / jc.at("dir").get<std::string>();
    for (const auto& js : jc.at("samples")) {
      const std::string stem = js.at("stem").get<std::string>();
      Sample s;
      s.vol = load_volume(cdir / (stem + ".vol"));
      s.mask = load_mask(cdir / (stem + ".mask"));
      pool.samples.push_back(std::move(s));
      pool.splits.push_back(js.at("split").get<std::string>() == "val" ? Split::kVal
                                                                       : Split::kTrain);
    }
    pools.push_back(std::move(pool));
  }
  return pools;
}

}  // namespace prmseg
