// Single-file named-array container for weight checkpoints ("BRCK").
//
// Layout, all little-endian:
//   magic "BRCK" | version u16 | config_len u32 | config bytes (key-value text)
//   | n_arrays u32 | per array: name_len u32, name bytes, rows u32, cols u32,
//   rows*cols float32 row-major.
#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "bright/common.hpp"

namespace bright {

inline constexpr uint16_t kCheckpointVersion = 1;

struct NamedArrays {
  std::string config_text;  // free-form header, key = value lines
  std::vector<std::pair<std::string, Eigen::MatrixXf>> arrays;

  void add(const std::string& name, const Eigen::MatrixXf& m) {
    arrays.emplace_back(name, m);
  }
  void add(const std::string& name, const Eigen::VectorXf& v) {
    arrays.emplace_back(name, Eigen::MatrixXf(v.transpose()));  // stored 1 x n
  }

  bool has(const std::string& name) const {
    for (const auto& [n, m] : arrays)
      if (n == name) return true;
    return false;
  }

  const Eigen::MatrixXf& get(const std::string& name) const {
    for (const auto& [n, m] : arrays)
      if (n == name) return m;
    throw std::runtime_error("checkpoint: missing array '" + name + "'");
  }

  Eigen::VectorXf get_vector(const std::string& name) const {
    const Eigen::MatrixXf& m = get(name);
    if (m.rows() != 1) throw std::runtime_error("checkpoint: '" + name + "' is not a vector");
    return m.row(0).transpose();
  }

  int64_t total_elements() const {
    int64_t n = 0;
    for (const auto& [_, m] : arrays) n += m.size();
    return n;
  }

  // Merge another container under "prefix." names.
  void add_prefixed(const std::string& prefix, const NamedArrays& src) {
    for (const auto& [n, m] : src.arrays) add(prefix + "." + n, m);
  }

  // Extract the sub-container under "prefix." (names with the prefix
  // stripped). Missing prefix yields an empty container.
  NamedArrays extract_prefixed(const std::string& prefix) const {
    NamedArrays out;
    const std::string p = prefix + ".";
    for (const auto& [n, m] : arrays) {
      if (n.rfind(p, 0) == 0) out.add(n.substr(p.size()), m);
    }
    return out;
  }
};

namespace detail {

inline void put_u16(std::string& buf, uint16_t v) {
  buf.push_back(char(v & 0xff));
  buf.push_back(char((v >> 8) & 0xff));
}
inline void put_u32(std::string& buf, uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(char((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& buf, uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(char((v >> (8 * i)) & 0xff));
}
inline void put_f32(std::string& buf, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(buf, bits);
}
inline void put_f64(std::string& buf, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(buf, bits);
}

// Cursor over a byte buffer; every read checks the remaining length.
class Reader {
 public:
  Reader(const std::string& buf, std::string context)
      : buf_(buf), ctx_(std::move(context)) {}

  void need(size_t n) const {
    if (pos_ + n > buf_.size()) {
      throw IoError(IoCode::truncated_payload, ctx_ + ": truncated payload");
    }
  }
  uint8_t u8() {
    need(1);
    return uint8_t(buf_[pos_++]);
  }
  uint16_t u16() {
    need(2);
    uint16_t v = uint16_t(uint8_t(buf_[pos_])) | uint16_t(uint8_t(buf_[pos_ + 1])) << 8;
    pos_ += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(uint8_t(buf_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(uint8_t(buf_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32() {
    uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  double f64() {
    uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string str(size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == buf_.size(); }
  size_t pos() const { return pos_; }

 private:
  const std::string& buf_;
  std::string ctx_;
  size_t pos_ = 0;
};

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(IoCode::io_fail, "cannot open: " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return buf;
}

inline void write_file_bytes(const std::string& path, const std::string& buf) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(IoCode::io_fail, "cannot open for write: " + path);
  out.write(buf.data(), std::streamsize(buf.size()));
  if (!out) throw IoError(IoCode::io_fail, "short write: " + path);
}

}  // namespace detail

inline void write_checkpoint(const std::string& path, const NamedArrays& ckpt) {
  std::string buf;
  buf += "BRCK";
  detail::put_u16(buf, kCheckpointVersion);
  detail::put_u32(buf, uint32_t(ckpt.config_text.size()));
  buf += ckpt.config_text;
  detail::put_u32(buf, uint32_t(ckpt.arrays.size()));
  for (const auto& [name, m] : ckpt.arrays) {
    detail::put_u32(buf, uint32_t(name.size()));
    buf += name;
    detail::put_u32(buf, uint32_t(m.rows()));
    detail::put_u32(buf, uint32_t(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) detail::put_f32(buf, m(r, c));
  }
  detail::write_file_bytes(path, buf);
}

inline NamedArrays read_checkpoint(const std::string& path) {
  const std::string buf = detail::read_file_bytes(path);
  detail::Reader rd(buf, path);
  if (rd.str(4) != "BRCK") throw IoError(IoCode::bad_magic, path + ": bad magic, not a BRCK checkpoint");
  const uint16_t version = rd.u16();
  if (version != kCheckpointVersion) {
    throw IoError(IoCode::version_mismatch,
                  path + ": checkpoint version " + std::to_string(version) + ", expected " +
                      std::to_string(kCheckpointVersion));
  }
  NamedArrays ckpt;
  ckpt.config_text = rd.str(rd.u32());
  const uint32_t n_arrays = rd.u32();
  ckpt.arrays.reserve(n_arrays);
  for (uint32_t i = 0; i < n_arrays; ++i) {
    std::string name = rd.str(rd.u32());
    const uint32_t rows = rd.u32();
    const uint32_t cols = rd.u32();
    Eigen::MatrixXf m(rows, cols);
    rd.need(size_t(rows) * cols * 4);
    for (uint32_t r = 0; r < rows; ++r)
      for (uint32_t c = 0; c < cols; ++c) m(r, c) = rd.f32();
    ckpt.arrays.emplace_back(std::move(name), std::move(m));
  }
  return ckpt;
}

inline uint64_t file_hash(const std::string& path) {
  const std::string buf = detail::read_file_bytes(path);
  return fnv1a64_bytes(buf.data(), buf.size());
}

}  // namespace bright
