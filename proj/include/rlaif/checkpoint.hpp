#pragma once

// Binary checkpoint file:
//   "RLAIFCKP" | u32 version | config | metadata | u64 count | records | u32 crc32
// Every integer and float is little-endian; floats are IEEE-754 binary64.
// A record is u32 name length, name bytes, u32 rank, u64 dims, then the values.

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "rlaif/errors.hpp"
#include "rlaif/model.hpp"

namespace rlaif {

inline constexpr char kCheckpointMagic[8] = {'R', 'L', 'A', 'I', 'F', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
  void raw(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s);
  }
  std::vector<char>& bytes() { return bytes_; }

 private:
  void put(std::uint64_t v, int width) {
    for (int i = 0; i < width; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  std::vector<char> bytes_;
};

class ByteReader {
 public:
  ByteReader(const char* data, std::size_t size) : data_(data), size_(size) {}

  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  double f64() { return std::bit_cast<double>(get(8)); }
  std::string raw(std::size_t n) {
    need(n);
    std::string s(data_ + pos_, n);
    pos_ += n;
    return s;
  }
  std::string str() { return raw(u32()); }
  std::size_t position() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return size_ - pos_; }

 private:
  void need(std::size_t n) const {
    if (n > size_ - pos_) {
      throw FormatError("checkpoint truncated at byte " + std::to_string(pos_) + " (needed " + std::to_string(n) +
                        " more)");
    }
  }
  std::uint64_t get(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(width);
    return v;
  }
  const char* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc_of(const char* data, std::size_t size) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(data), static_cast<uInt>(size)));
}

}  // namespace detail

inline std::vector<char> encode_checkpoint(const Checkpoint& ck) {
  detail::ByteWriter w;
  w.raw({kCheckpointMagic, sizeof kCheckpointMagic});
  w.u32(kCheckpointVersion);
  const ModelConfig& c = ck.config;
  w.u32(static_cast<std::uint32_t>(c.head_kind));
  w.u32(static_cast<std::uint32_t>(c.pooling));
  for (std::size_t v : {c.vocab_size, c.context_limit, c.layer_count, c.model_width, c.head_count, c.ffn_width})
    w.u64(v);
  w.u64(ck.meta.seed);
  w.u64(ck.meta.epoch);
  w.f64(ck.meta.criterion);
  w.str(ck.meta.note);
  w.u64(ck.params.size());
  for (const auto& p : ck.params) {
    w.str(p.name);
    w.u32(static_cast<std::uint32_t>(p.value.rank()));
    for (std::size_t d : p.value.shape()) w.u64(d);
    for (double v : p.value.values()) w.f64(v);
  }
  auto& bytes = w.bytes();
  const std::uint32_t crc = detail::crc_of(bytes.data(), bytes.size());
  w.u32(crc);
  return std::move(bytes);
}

inline Checkpoint decode_checkpoint(const std::vector<char>& bytes) {
  detail::ByteReader r(bytes.data(), bytes.size());
  if (r.raw(sizeof kCheckpointMagic) != std::string_view(kCheckpointMagic, sizeof kCheckpointMagic)) {
    throw FormatError("not a checkpoint file (bad magic)");
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint ck;
  ModelConfig& c = ck.config;
  c.head_kind = static_cast<HeadKind>(r.u32());
  c.pooling = static_cast<Pooling>(r.u32());
  for (std::size_t* v : {&c.vocab_size, &c.context_limit, &c.layer_count, &c.model_width, &c.head_count, &c.ffn_width})
    *v = static_cast<std::size_t>(r.u64());
  try {
    c.validate();
  } catch (const ValidationError& e) {
    throw FormatError(std::string("checkpoint config invalid: ") + e.what());
  }
  ck.meta.seed = r.u64();
  ck.meta.epoch = r.u64();
  ck.meta.criterion = r.f64();
  ck.meta.note = r.str();
  const auto layout = parameter_layout(c);
  const std::uint64_t count = r.u64();
  if (count != layout.size()) {
    throw FormatError("checkpoint holds " + std::to_string(count) + " parameters, config implies " +
                      std::to_string(layout.size()));
  }
  for (const auto& [name, shape] : layout) {
    std::string got = r.str();
    if (got != name) throw FormatError("checkpoint parameter '" + got + "' where '" + name + "' expected");
    const std::uint32_t rank = r.u32();
    Shape s(rank);
    for (auto& d : s) d = static_cast<std::size_t>(r.u64());
    if (s != shape) {
      throw FormatError("checkpoint parameter '" + name + "' has shape " + shape_string(s) + ", config implies " +
                        shape_string(shape));
    }
    std::vector<double> values(shape_size(shape));
    for (double& v : values) v = r.f64();
    ck.params.push_back({name, NDArray(shape, std::move(values))});
  }
  const std::size_t body = r.position();
  const std::uint32_t stored = r.u32();
  if (stored != detail::crc_of(bytes.data(), body)) throw FormatError("checkpoint checksum mismatch");
  if (r.remaining() != 0) throw FormatError("checkpoint has " + std::to_string(r.remaining()) + " trailing bytes");
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(ck);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_checkpoint(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace rlaif
