#pragma once

#include <array>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "prmseg/common.hpp"
#include "prmseg/tensor.hpp"

namespace prmseg {

// CRC-32 (IEEE, reflected, poly 0xEDB88320).
inline uint32_t crc32(const void* data, size_t n, uint32_t crc = 0) {
  static const auto table = [] {
    std::array<uint32_t, 256> t{};
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  const auto* p = static_cast<const unsigned char*>(data);
  crc ^= 0xFFFFFFFFu;
  for (size_t i = 0; i < n; ++i) crc = table[(crc ^ p[i]) & 0xFFu] ^ (crc >> 8);
  return crc ^ 0xFFFFFFFFu;
}

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

// File layout: "ORGN", u32 version=1, u64 step, u32 json length + bytes,
// then per record: u32 name length, name bytes, u8 dtype (0=f32, 1=f64),
// u8 ndim, u64 dims[ndim], raw little-endian scalars. A CRC32 over all
// preceding bytes closes the file; the record list runs to the trailer.
// Optimizer moments ride along as extra records suffixed ".m"/".v".
template <typename T>
struct CheckpointData {
  uint64_t step = 0;
  std::string config_json;
  std::vector<NamedTensor<T>> records;
};

namespace detail {

template <typename V>
void put(std::string& buf, V v) {
  char tmp[sizeof(V)];
  std::memcpy(tmp, &v, sizeof(V));
  buf.append(tmp, sizeof(V));
}

template <typename V>
V take(const std::string& buf, size_t& pos) {
  if (pos + sizeof(V) > buf.size()) throw ConfigError("checkpoint: truncated file");
  V v;
  std::memcpy(&v, buf.data() + pos, sizeof(V));
  pos += sizeof(V);
  return v;
}

template <typename T>
constexpr uint8_t dtype_code() {
  return std::is_same_v<T, float> ? 0 : 1;
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const CheckpointData<T>& ckpt) {
  std::string buf;
  buf.append("ORGN", 4);
  detail::put<uint32_t>(buf, 1);
  detail::put<uint64_t>(buf, ckpt.step);
  detail::put<uint32_t>(buf, uint32_t(ckpt.config_json.size()));
  buf.append(ckpt.config_json);
  for (const auto& rec : ckpt.records) {
    detail::put<uint32_t>(buf, uint32_t(rec.name.size()));
    buf.append(rec.name);
    detail::put<uint8_t>(buf, detail::dtype_code<T>());
    detail::put<uint8_t>(buf, uint8_t(rec.tensor.shape.size()));
    for (int64_t d : rec.tensor.shape) detail::put<uint64_t>(buf, uint64_t(d));
    const size_t bytes = rec.tensor.data.size() * sizeof(T);
    buf.append(reinterpret_cast<const char*>(rec.tensor.data.data()), bytes);
  }
  detail::put<uint32_t>(buf, crc32(buf.data(), buf.size()));

  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write checkpoint " + path.string());
  f.write(buf.data(), std::streamsize(buf.size()));
  if (!f) throw ConfigError("short write to " + path.string());
}

template <typename T>
CheckpointData<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read checkpoint " + path.string());
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < 24) throw ConfigError("checkpoint too small: " + path.string());

  size_t pos = buf.size() - 4;
  uint32_t stored_crc;
  std::memcpy(&stored_crc, buf.data() + pos, 4);
  if (crc32(buf.data(), buf.size() - 4) != stored_crc)
    throw ConfigError("checkpoint CRC mismatch: " + path.string());
  const size_t end = buf.size() - 4;

  pos = 0;
  if (buf.compare(0, 4, "ORGN") != 0) throw ConfigError("not a checkpoint: " + path.string());
  pos = 4;
  const uint32_t version = detail::take<uint32_t>(buf, pos);
  if (version != 1) throw ConfigError("unsupported checkpoint version");
  CheckpointData<T> ckpt;
  ckpt.step = detail::take<uint64_t>(buf, pos);
  const uint32_t json_len = detail::take<uint32_t>(buf, pos);
  if (pos + json_len > end) throw ConfigError("checkpoint: truncated config blob");
  ckpt.config_json = buf.substr(pos, json_len);
  pos += json_len;

  while (pos < end) {
    const uint32_t name_len = detail::take<uint32_t>(buf, pos);
    if (pos + name_len > end) throw ConfigError("checkpoint: truncated record name");
    NamedTensor<T> rec;
    rec.name = buf.substr(pos, name_len);
    pos += name_len;
    const uint8_t code = detail::take<uint8_t>(buf, pos);
    if (code != detail::dtype_code<T>())
      throw ConfigError("checkpoint dtype is " + std::string(code == 0 ? "f32" : "f64") +
                        ", expected " + std::string(detail::dtype_code<T>() == 0 ? "f32" : "f64"));
    const uint8_t ndim = detail::take<uint8_t>(buf, pos);
    std::vector<int64_t> shape;
    for (int d = 0; d < ndim; ++d) shape.push_back(int64_t(detail::take<uint64_t>(buf, pos)));
    Tensor<T> t = shape.empty() ? Tensor<T>::scalar(T(0)) : Tensor<T>(shape);
    const size_t bytes = t.data.size() * sizeof(T);
    if (pos + bytes > end) throw ConfigError("checkpoint: truncated record data");
    std::memcpy(t.data.data(), buf.data() + pos, bytes);
    pos += bytes;
    rec.tensor = std::move(t);
    ckpt.records.push_back(std::move(rec));
  }
  return ckpt;
}

// Peeks the embedded config JSON without committing to a dtype.
inline std::string checkpoint_config_json(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read checkpoint " + path.string());
  std::string head(20, '\0');
  f.read(head.data(), 20);
  if (!f || head.compare(0, 4, "ORGN") != 0)
    throw ConfigError("not a checkpoint: " + path.string());
  uint32_t json_len;
  std::memcpy(&json_len, head.data() + 16, 4);
  std::string json(json_len, '\0');
  f.read(json.data(), json_len);
  if (!f) throw ConfigError("checkpoint: truncated config blob");
  return json;
}

}  // namespace prmseg
