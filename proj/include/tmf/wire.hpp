#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include "tmf/bytes.hpp"
#include "tmf/nn.hpp"
#include "tmf/sparse.hpp"

namespace tmf {

// Binary protocol, little-endian throughout. Every message starts with the
// same 13-byte header:
//
//   "TMF1" | type u8 | round u32 | count u32
//
// followed by a type-specific payload:
//
//   DenseWeights  count = n values        payload n x f32            13 + 4n
//   SparseDelta   count = global length   payload e u32, e x (u32 index,
//                                         f32 value)                 17 + 8e
//   RoundStart    count = global length   no payload                 13
//   ClientHello   count = model params    payload client u32,
//                                         family u8                  18
//   Shutdown      count = 0               no payload                 13
//
// The byte sizes above are what the per-round communication counters record.

inline constexpr std::size_t kHeaderBytes = 13;

enum class MsgType : std::uint8_t {
  DenseWeights = 0x01,
  SparseDelta = 0x02,
  RoundStart = 0x03,
  ClientHello = 0x04,
  Shutdown = 0x05,
};

inline std::string to_string(MsgType t) {
  switch (t) {
    case MsgType::DenseWeights: return "dense_weights";
    case MsgType::SparseDelta: return "sparse_delta";
    case MsgType::RoundStart: return "round_start";
    case MsgType::ClientHello: return "client_hello";
    case MsgType::Shutdown: return "shutdown";
  }
  return "unknown";
}

inline std::size_t dense_message_bytes(int value_count) {
  return kHeaderBytes + 4 * static_cast<std::size_t>(value_count);
}

inline std::size_t sparse_message_bytes(int entry_count) {
  return kHeaderBytes + 4 + 8 * static_cast<std::size_t>(entry_count);
}

struct Message {
  MsgType type = MsgType::Shutdown;
  std::uint32_t round = 0;
  std::uint32_t count = 0;

  VectorF dense;           // DenseWeights
  SparseDelta delta;       // SparseDelta
  std::uint32_t client_id = 0;  // ClientHello
  std::uint8_t family_tag = 0;  // ClientHello
};

namespace detail {

inline void put_header(ByteBuffer& out, MsgType type, std::uint32_t round,
                       std::uint32_t count) {
  out.push_back('T');
  out.push_back('M');
  out.push_back('F');
  out.push_back('1');
  put_u8(out, static_cast<std::uint8_t>(type));
  put_u32(out, round);
  put_u32(out, count);
}

}  // namespace detail

inline ByteBuffer encode_dense(std::uint32_t round, const VectorF& values) {
  ByteBuffer out;
  out.reserve(dense_message_bytes(static_cast<int>(values.size())));
  detail::put_header(out, MsgType::DenseWeights, round,
                     static_cast<std::uint32_t>(values.size()));
  for (Eigen::Index i = 0; i < values.size(); ++i) put_f32(out, values[i]);
  return out;
}

inline ByteBuffer encode_sparse(std::uint32_t round, std::uint32_t global_count,
                                const SparseDelta& delta) {
  validate_delta(delta, static_cast<int>(global_count));
  ByteBuffer out;
  out.reserve(sparse_message_bytes(static_cast<int>(delta.size())));
  detail::put_header(out, MsgType::SparseDelta, round, global_count);
  put_u32(out, static_cast<std::uint32_t>(delta.size()));
  for (std::size_t k = 0; k < delta.size(); ++k) {
    put_u32(out, delta.indices[k]);
    put_f32(out, delta.values[k]);
  }
  return out;
}

inline ByteBuffer encode_round_start(std::uint32_t round, std::uint32_t global_count) {
  ByteBuffer out;
  out.reserve(kHeaderBytes);
  detail::put_header(out, MsgType::RoundStart, round, global_count);
  return out;
}

// Registration carries the client id and task family tag only, never data.
inline ByteBuffer encode_hello(std::uint32_t client_id, std::uint8_t family_tag) {
  ByteBuffer out;
  out.reserve(kHeaderBytes + 5);
  detail::put_header(out, MsgType::ClientHello, 0, 0);
  put_u32(out, client_id);
  put_u8(out, family_tag);
  return out;
}

inline ByteBuffer encode_shutdown(std::uint32_t round) {
  ByteBuffer out;
  out.reserve(kHeaderBytes);
  detail::put_header(out, MsgType::Shutdown, round, 0);
  return out;
}

inline Message decode_message(const ByteBuffer& buf) {
  ByteReader r(buf);
  r.magic("TMF1", "protocol message");
  const std::uint8_t raw_type = r.u8();
  if (raw_type < 0x01 || raw_type > 0x05) {
    throw DecodeError("unknown message type " + std::to_string(raw_type));
  }
  Message m;
  m.type = static_cast<MsgType>(raw_type);
  m.round = r.u32();
  m.count = r.u32();
  switch (m.type) {
    case MsgType::DenseWeights: {
      if (r.remaining() != 4 * static_cast<std::size_t>(m.count)) {
        throw DecodeError("dense payload length does not match count");
      }
      m.dense.resize(static_cast<Eigen::Index>(m.count));
      for (std::uint32_t i = 0; i < m.count; ++i) {
        m.dense[static_cast<Eigen::Index>(i)] = r.f32();
      }
      break;
    }
    case MsgType::SparseDelta: {
      const std::uint32_t entries = r.u32();
      if (r.remaining() != 8 * static_cast<std::size_t>(entries)) {
        throw DecodeError("sparse payload length does not match entry count");
      }
      m.delta.indices.reserve(entries);
      m.delta.values.reserve(entries);
      for (std::uint32_t k = 0; k < entries; ++k) {
        m.delta.indices.push_back(r.u32());
        m.delta.values.push_back(r.f32());
      }
      try {
        validate_delta(m.delta, static_cast<int>(m.count));
      } catch (const std::exception& e) {
        throw DecodeError(std::string("bad sparse delta: ") + e.what());
      }
      break;
    }
    case MsgType::RoundStart:
    case MsgType::Shutdown:
      if (r.remaining() != 0) throw DecodeError("unexpected payload");
      break;
    case MsgType::ClientHello: {
      if (r.remaining() != 5) throw DecodeError("client hello payload must be 5 bytes");
      m.client_id = r.u32();
      m.family_tag = r.u8();
      break;
    }
  }
  if (r.remaining() != 0) throw DecodeError("trailing bytes after message");
  return m;
}

}  // namespace tmf
