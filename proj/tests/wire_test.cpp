#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <vector>

#include "tmf/wire.hpp"

using namespace tmf;

TEST_CASE("dense weights round-trip with the exact frame size") {
  VectorF w(5);
  w << 1.0f, -2.0f, 0.0f, 3.5f, 1e-7f;
  const ByteBuffer buf = encode_dense(42, w);
  REQUIRE(buf.size() == dense_message_bytes(5));
  REQUIRE(buf.size() == 13u + 4u * 5u);

  const Message m = decode_message(buf);
  CHECK(m.type == MsgType::DenseWeights);
  CHECK(m.round == 42u);
  CHECK(m.count == 5u);
  CHECK(m.dense == w);  // exact f32 bit pattern round-trip
}

TEST_CASE("the header is byte-for-byte as published") {
  VectorF w(1);
  w << 1.0f;
  const ByteBuffer buf = encode_dense(0x00010203u, w);
  // "TMF1" | type | round LE | count LE
  const std::uint8_t expect[13] = {'T', 'M', 'F', '1', 0x01,
                                   0x03, 0x02, 0x01, 0x00,
                                   0x01, 0x00, 0x00, 0x00};
  for (int i = 0; i < 13; ++i) CHECK(buf[static_cast<std::size_t>(i)] == expect[i]);
  // f32 1.0 little-endian.
  CHECK(buf[13] == 0x00);
  CHECK(buf[14] == 0x00);
  CHECK(buf[15] == 0x80);
  CHECK(buf[16] == 0x3f);
}

TEST_CASE("sparse deltas round-trip and size as 17 + 8e") {
  SparseDelta d;
  d.indices = {0, 7, 575};
  d.values = {0.25f, -1.5f, 4.0f};
  const ByteBuffer buf = encode_sparse(9, 576, d);
  REQUIRE(buf.size() == sparse_message_bytes(3));
  REQUIRE(buf.size() == 17u + 8u * 3u);

  const Message m = decode_message(buf);
  CHECK(m.type == MsgType::SparseDelta);
  CHECK(m.round == 9u);
  CHECK(m.count == 576u);  // count carries the global length
  CHECK(m.delta.indices == d.indices);
  CHECK(m.delta.values == d.values);

  // The encoder refuses a delta that does not fit the declared length.
  SparseDelta oob;
  oob.indices = {600};
  oob.values = {1.0f};
  CHECK_THROWS(encode_sparse(9, 576, oob));
}

TEST_CASE("round start and shutdown are bare headers") {
  const ByteBuffer rs = encode_round_start(3, 576);
  REQUIRE(rs.size() == kHeaderBytes);
  const Message m1 = decode_message(rs);
  CHECK(m1.type == MsgType::RoundStart);
  CHECK(m1.round == 3u);
  CHECK(m1.count == 576u);

  const ByteBuffer sd = encode_shutdown(77);
  REQUIRE(sd.size() == kHeaderBytes);
  const Message m2 = decode_message(sd);
  CHECK(m2.type == MsgType::Shutdown);
  CHECK(m2.round == 77u);
  CHECK(m2.count == 0u);
}

TEST_CASE("client hello carries id and family in 18 bytes") {
  const ByteBuffer buf = encode_hello(31, 1);
  REQUIRE(buf.size() == 18u);
  const Message m = decode_message(buf);
  CHECK(m.type == MsgType::ClientHello);
  CHECK(m.client_id == 31u);
  CHECK(m.family_tag == 1);
}

TEST_CASE("corrupted frames raise DecodeError, never crash") {
  VectorF w(2);
  w << 1.0f, 2.0f;
  const ByteBuffer good = encode_dense(1, w);

  SUBCASE("flipped magic") {
    ByteBuffer bad = good;
    bad[0] = 'X';
    CHECK_THROWS_AS(decode_message(bad), DecodeError);
  }
  SUBCASE("unknown type") {
    ByteBuffer bad = good;
    bad[4] = 0x09;
    CHECK_THROWS_AS(decode_message(bad), DecodeError);
    bad[4] = 0x00;
    CHECK_THROWS_AS(decode_message(bad), DecodeError);
  }
  SUBCASE("truncation at every prefix length") {
    for (std::size_t len = 0; len < good.size(); ++len) {
      ByteBuffer bad(good.begin(), good.begin() + static_cast<long>(len));
      CHECK_THROWS_AS(decode_message(bad), DecodeError);
    }
  }
  SUBCASE("trailing bytes") {
    ByteBuffer bad = good;
    bad.push_back(0);
    CHECK_THROWS_AS(decode_message(bad), DecodeError);
  }
  SUBCASE("count larger than payload") {
    ByteBuffer bad = good;
    bad[9] = 3;  // claims 3 values, carries 2
    CHECK_THROWS_AS(decode_message(bad), DecodeError);
  }
}

TEST_CASE("sparse frames with broken index order fail to decode") {
  SparseDelta d;
  d.indices = {4, 9};
  d.values = {1.0f, 2.0f};
  ByteBuffer buf = encode_sparse(2, 16, d);
  // Swap the two index words to make them non-increasing.
  std::swap(buf[17], buf[25]);
  CHECK_THROWS_AS(decode_message(buf), DecodeError);

  // An index beyond the declared global length also fails.
  ByteBuffer oob = encode_sparse(2, 16, d);
  oob[21 + 4] = 0xff;  // second entry's index low byte
  CHECK_THROWS_AS(decode_message(oob), DecodeError);
}

TEST_CASE("an empty dense frame decodes to an empty vector") {
  const ByteBuffer buf = encode_dense(0, VectorF());
  REQUIRE(buf.size() == kHeaderBytes);
  const Message m = decode_message(buf);
  CHECK(m.count == 0u);
  CHECK(m.dense.size() == 0);
}
