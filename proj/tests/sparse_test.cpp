#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <numeric>
#include <vector>

#include "tmf/sparse.hpp"
#include "tmf/util.hpp"

using namespace tmf;

namespace {

// Independent selection oracle: stable-sort every coordinate by
// (magnitude desc, index asc) and keep the first m. Quadratic-ish and
// allocation-happy, which is exactly why the production path does not work
// this way.
SparseDelta oracle_select(const VectorF& g_new, const VectorF& g_old, double p) {
  const int n = static_cast<int>(g_new.size());
  const int m = entry_count_for(p, n);
  std::vector<std::uint32_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0u);
  VectorF diff = g_new - g_old;
  std::stable_sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
    const float ma = std::fabs(diff[a]), mb = std::fabs(diff[b]);
    if (ma != mb) return ma > mb;
    return a < b;
  });
  order.resize(static_cast<std::size_t>(m));
  std::sort(order.begin(), order.end());
  SparseDelta d;
  d.indices = order;
  for (std::uint32_t i : order) d.values.push_back(diff[i]);
  return d;
}

}  // namespace

TEST_CASE("entry_count_for takes the exact integer path") {
  CHECK(entry_count_for(50, 576) == 288);
  CHECK(entry_count_for(10, 544) == 55);   // ceil(54.4)
  CHECK(entry_count_for(1, 10) == 1);
  CHECK(entry_count_for(1, 99) == 1);      // ceil(0.99)
  CHECK(entry_count_for(1, 101) == 2);     // ceil(1.01)
  CHECK(entry_count_for(100, 593) == 593);
  CHECK(entry_count_for(0.5, 100) == 1);   // fractional path, ceil(0.5)
  CHECK(entry_count_for(0.01, 1000000) == 100);
  // Never zero, never more than n.
  CHECK(entry_count_for(0.0001, 5) == 1);
  CHECK(entry_count_for(100, 1) == 1);
  CHECK_THROWS_AS(entry_count_for(0, 10), std::invalid_argument);
  CHECK_THROWS_AS(entry_count_for(101, 10), std::invalid_argument);
  CHECK_THROWS_AS(entry_count_for(-3, 10), std::invalid_argument);
  CHECK_THROWS_AS(entry_count_for(50, 0), std::invalid_argument);
}

TEST_CASE("top_p_select matches the sort oracle on random vectors") {
  Rng rng(2024);
  const double percents[] = {1, 10, 37, 50, 80, 100};
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + static_cast<int>(rng.index(500));
    VectorF g_new(n), g_old(n);
    for (int i = 0; i < n; ++i) {
      g_old(i) = static_cast<float>(rng.uniform(-2.0, 2.0));
      // Quantized deltas so magnitude ties actually occur.
      g_new(i) = g_old(i) + 0.25f * static_cast<float>(static_cast<int>(rng.index(9)) - 4);
    }
    for (double p : percents) {
      const SparseDelta got = top_p_select(g_new, g_old, p);
      const SparseDelta want = oracle_select(g_new, g_old, p);
      REQUIRE(got.indices == want.indices);
      REQUIRE(got.values == want.values);
    }
  }
}

TEST_CASE("ties keep the lowest index") {
  VectorF g_old = VectorF::Zero(6);
  VectorF g_new(6);
  // |diff| = 1, 2, 2, 1, 2, 0 with mixed signs.
  g_new << 1.0f, -2.0f, 2.0f, -1.0f, 2.0f, 0.0f;
  const SparseDelta top3 = top_p_select(g_new, g_old, 50);
  CHECK(top3.indices == std::vector<std::uint32_t>{1, 2, 4});
  // With four slots the magnitude-1 tie between indices 0 and 3 breaks low.
  const SparseDelta top4 = top_p_select(g_new, g_old, 66);
  REQUIRE(top4.indices.size() == 4);
  CHECK(top4.indices == std::vector<std::uint32_t>{0, 1, 2, 4});

  // All-equal magnitudes: the first m indices win.
  VectorF ones = VectorF::Ones(8);
  const SparseDelta firsts = top_p_select(ones, VectorF::Zero(8), 25);
  CHECK(firsts.indices == std::vector<std::uint32_t>{0, 1});
  CHECK(firsts.values == std::vector<float>{1.0f, 1.0f});
}

TEST_CASE("selected values are the raw unscaled differences") {
  VectorF g_old(3), g_new(3);
  g_old << 1.0f, 2.0f, 3.0f;
  g_new << 1.5f, 2.0f, 1.0f;
  const SparseDelta d = top_p_select(g_new, g_old, 100);
  REQUIRE(d.indices == std::vector<std::uint32_t>{0, 1, 2});
  CHECK(d.values[0] == 0.5f);
  CHECK(d.values[1] == 0.0f);
  CHECK(d.values[2] == -2.0f);
}

TEST_CASE("validate_delta rejects malformed payloads") {
  SparseDelta d;
  d.indices = {0, 2};
  d.values = {1.0f, 2.0f};
  CHECK_NOTHROW(validate_delta(d, 3));
  CHECK_THROWS_AS(validate_delta(d, 2), std::out_of_range);  // index 2 out of range

  SparseDelta lengths;
  lengths.indices = {0};
  lengths.values = {1.0f, 2.0f};
  CHECK_THROWS_AS(validate_delta(lengths, 3), std::invalid_argument);

  SparseDelta dup;
  dup.indices = {1, 1};
  dup.values = {1.0f, 1.0f};
  CHECK_THROWS_AS(validate_delta(dup, 3), std::invalid_argument);

  SparseDelta desc;
  desc.indices = {2, 1};
  desc.values = {1.0f, 1.0f};
  CHECK_THROWS_AS(validate_delta(desc, 3), std::invalid_argument);
}

TEST_CASE("apply_delta scales into the target in place") {
  VectorF g(3);
  g << 1.0f, 2.0f, 3.0f;
  SparseDelta d;
  d.indices = {0, 2};
  d.values = {0.5f, -1.0f};
  apply_delta(g, d, 0.5f);
  CHECK(g(0) == 1.25f);
  CHECK(g(1) == 2.0f);  // untouched
  CHECK(g(2) == 2.5f);

  SparseDelta bad;
  bad.indices = {5};
  bad.values = {1.0f};
  CHECK_THROWS_AS(apply_delta(g, bad, 1.0f), std::out_of_range);
  CHECK(g(0) == 1.25f);  // failed apply leaves the vector alone
}
