#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "tmf/bytes.hpp"
#include "tmf/nn.hpp"

namespace tmf {

// Weight block: "TMFW" | version u8 | param_count u32 | param_count x f32, all
// little-endian. Version is currently 1.
inline constexpr std::uint8_t kWeightFormatVersion = 1;

inline void encode_weights(const VectorF& w, ByteBuffer& out) {
  out.reserve(out.size() + 9 + 4 * static_cast<std::size_t>(w.size()));
  out.push_back('T');
  out.push_back('M');
  out.push_back('F');
  out.push_back('W');
  put_u8(out, kWeightFormatVersion);
  put_u32(out, static_cast<std::uint32_t>(w.size()));
  for (Eigen::Index i = 0; i < w.size(); ++i) put_f32(out, w[i]);
}

inline ByteBuffer encode_weights(const VectorF& w) {
  ByteBuffer out;
  encode_weights(w, out);
  return out;
}

inline VectorF decode_weights(ByteReader& r) {
  r.magic("TMFW", "weight block");
  const std::uint8_t version = r.u8();
  if (version != kWeightFormatVersion) {
    throw DecodeError("unsupported weight format version " + std::to_string(version));
  }
  const std::uint32_t n = r.u32();
  VectorF w(static_cast<Eigen::Index>(n));
  for (std::uint32_t i = 0; i < n; ++i) w[static_cast<Eigen::Index>(i)] = r.f32();
  return w;
}

inline VectorF decode_weights(const ByteBuffer& buf) {
  ByteReader r(buf);
  VectorF w = decode_weights(r);
  if (r.remaining() != 0) throw DecodeError("trailing bytes after weight block");
  return w;
}

// Server checkpoint: "TMFC" | version u8 | round u32 | seed u64 |
// config_hash u64 | weight block. Lets a restarted server resume mid run
// and refuse a checkpoint written under a different configuration.
inline constexpr std::uint8_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint32_t round = 0;
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;
  VectorF weights;
};

inline ByteBuffer encode_checkpoint(const Checkpoint& c) {
  ByteBuffer out;
  out.push_back('T');
  out.push_back('M');
  out.push_back('F');
  out.push_back('C');
  put_u8(out, kCheckpointVersion);
  put_u32(out, c.round);
  put_u64(out, c.seed);
  put_u64(out, c.config_hash);
  encode_weights(c.weights, out);
  return out;
}

inline Checkpoint decode_checkpoint(const ByteBuffer& buf) {
  ByteReader r(buf);
  r.magic("TMFC", "checkpoint");
  const std::uint8_t version = r.u8();
  if (version != kCheckpointVersion) {
    throw DecodeError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint c;
  c.round = r.u32();
  c.seed = r.u64();
  c.config_hash = r.u64();
  c.weights = decode_weights(r);
  if (r.remaining() != 0) throw DecodeError("trailing bytes after checkpoint");
  return c;
}

inline void write_file_atomic(const std::filesystem::path& path, const ByteBuffer& data) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::FILE* f = std::fopen(tmp.c_str(), "wb");
    if (!f) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    const std::size_t n = data.empty() ? 0 : std::fwrite(data.data(), 1, data.size(), f);
    const int rc = std::fclose(f);
    if (n != data.size() || rc != 0) {
      std::filesystem::remove(tmp);
      throw std::runtime_error("short write to " + tmp.string());
    }
  }
  std::filesystem::rename(tmp, path);
}

inline ByteBuffer read_file(const std::filesystem::path& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw std::runtime_error("cannot open " + path.string());
  ByteBuffer data;
  std::uint8_t chunk[65536];
  std::size_t n;
  while ((n = std::fread(chunk, 1, sizeof(chunk), f)) > 0) {
    data.insert(data.end(), chunk, chunk + n);
  }
  std::fclose(f);
  return data;
}

inline void save_weights(const std::filesystem::path& path, const VectorF& w) {
  write_file_atomic(path, encode_weights(w));
}

inline VectorF load_weights(const std::filesystem::path& path) {
  return decode_weights(read_file(path));
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  write_file_atomic(path, encode_checkpoint(c));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

}  // namespace tmf
