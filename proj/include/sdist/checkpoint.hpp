#pragma once

// Single-file checkpoint container.
//
//   "ATLT"  u32 version  u64 manifest_len  manifest (JSON text)
//   u32 entry_count
//   entry: u8 kind  u32 name_len  name  u32 rank  u64 dims[rank]  u64 byte_len  payload
//   u32 crc32 of everything before it
//
// All integers are little-endian. kind 0 payloads are float32 arrays; kind 1
// payloads are bit-packed masks (LSB first). Files are written to a temporary
// sibling and renamed into place.

#include <nlohmann/json.hpp>
#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "sdist/data.hpp"
#include "sdist/model.hpp"

namespace sdist {

inline constexpr char kCheckpointMagic[4] = {'A', 'T', 'L', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedMask {
  std::string name;
  std::vector<std::uint8_t> bits;  // one byte per coordinate, 0 or 1
};

struct Checkpoint {
  nlohmann::json manifest = nlohmann::json::object();
  std::vector<NamedArray> arrays;
  std::vector<NamedMask> masks;

  const NamedArray* find_array(const std::string& name) const {
    for (const auto& a : arrays)
      if (a.name == name) return &a;
    return nullptr;
  }
  const NamedMask* find_mask(const std::string& name) const {
    for (const auto& m : masks)
      if (m.name == name) return &m;
    return nullptr;
  }
};

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t>& buffer() { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class ByteReader {
 public:
  ByteReader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}

  std::size_t offset() const { return pos_; }
  bool done() const { return pos_ == size_; }

  void need(std::size_t n, const char* what) const {
    if (n > size_ - pos_)
      throw FormatError(std::string("checkpoint truncated reading ") + what + " at byte offset " +
                        std::to_string(pos_));
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return data_[pos_++];
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{data_[pos_ + i]} << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{data_[pos_ + i]} << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32("array value")); }
  std::string str(const char* what) {
    const auto n = u32(what);
    need(n, what);
    std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
    pos_ += n;
    return s;
  }
  const std::uint8_t* take(std::size_t n, const char* what) {
    need(n, what);
    const auto* p = data_ + pos_;
    pos_ += n;
    return p;
  }

 private:
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(const std::uint8_t* data, std::size_t n) {
  return static_cast<std::uint32_t>(::crc32(0L, data, static_cast<uInt>(n)));
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  detail::ByteWriter w;
  w.bytes(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  const std::string manifest = ckpt.manifest.dump(2);
  w.u64(manifest.size());
  w.bytes(manifest.data(), manifest.size());
  w.u32(static_cast<std::uint32_t>(ckpt.arrays.size() + ckpt.masks.size()));
  for (const auto& a : ckpt.arrays) {
    if (shape_numel(a.shape) != a.values.size())
      throw ContractError("checkpoint array '" + a.name + "' length does not match its shape");
    w.u8(0);
    w.str(a.name);
    w.u32(static_cast<std::uint32_t>(a.shape.size()));
    for (auto d : a.shape) w.u64(d);
    w.u64(a.values.size() * 4);
    for (float v : a.values) w.f32(v);
  }
  for (const auto& m : ckpt.masks) {
    w.u8(1);
    w.str(m.name);
    w.u32(1);
    w.u64(m.bits.size());
    std::vector<std::uint8_t> packed((m.bits.size() + 7) / 8, 0);
    for (std::size_t i = 0; i < m.bits.size(); ++i)
      if (m.bits[i]) packed[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
    w.u64(packed.size());
    w.bytes(packed.data(), packed.size());
  }
  auto& buf = w.buffer();
  w.u32(detail::crc32_of(buf.data(), buf.size()));
  return std::move(buf);
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw FormatError("not a checkpoint (bad magic)");
  if (bytes.size() < 12) throw FormatError("checkpoint truncated at byte offset " + std::to_string(bytes.size()));
  const std::size_t body = bytes.size() - 4;
  detail::ByteReader tail(bytes.data() + body, 4);
  if (tail.u32("checksum") != detail::crc32_of(bytes.data(), body)) throw FormatError("checkpoint checksum mismatch");

  detail::ByteReader r(bytes.data(), body);
  r.take(4, "magic");
  const auto version = r.u32("version");
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ckpt;
  const auto manifest_len = r.u64("manifest length");
  const auto* text = r.take(manifest_len, "manifest");
  try {
    ckpt.manifest = nlohmann::json::parse(text, text + manifest_len);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint manifest is not valid JSON: ") + e.what());
  }
  const auto entries = r.u32("entry count");
  for (std::uint32_t e = 0; e < entries; ++e) {
    const auto kind = r.u8("entry kind");
    auto name = r.str("entry name");
    const auto rank = r.u32("rank");
    Shape shape(rank);
    for (auto& d : shape) d = r.u64("dimension");
    const auto len = r.u64("byte length");
    const std::size_t n = shape_numel(shape);
    if (kind == 0) {
      if (len != n * 4) throw FormatError("array '" + name + "' byte length does not match its shape");
      r.need(len, "array payload");
      NamedArray a{std::move(name), std::move(shape), std::vector<float>(n)};
      for (auto& v : a.values) v = r.f32();
      ckpt.arrays.push_back(std::move(a));
    } else if (kind == 1) {
      if (rank != 1 || len != (n + 7) / 8) throw FormatError("mask '" + name + "' has an inconsistent header");
      const auto* packed = r.take(len, "mask payload");
      NamedMask m{std::move(name), std::vector<std::uint8_t>(n)};
      for (std::size_t i = 0; i < n; ++i) m.bits[i] = (packed[i / 8] >> (i % 8)) & 1u;
      ckpt.masks.push_back(std::move(m));
    } else {
      throw FormatError("unknown entry kind " + std::to_string(kind) + " at byte offset " +
                        std::to_string(r.offset() - 1));
    }
  }
  if (!r.done()) throw FormatError("trailing bytes after checkpoint entries at offset " + std::to_string(r.offset()));
  return ckpt;
}

inline void write_bytes_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_bytes_atomic(path, encode_checkpoint(ckpt));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("checkpoint not found: " + path.string());
  try {
    return decode_checkpoint(read_file_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace sdist
