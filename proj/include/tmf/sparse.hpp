#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "tmf/nn.hpp"

namespace tmf {

// Uplink payload: the selected coordinates of the compacted global vector
// and the raw (unscaled) changes at those coordinates. Indices are strictly
// increasing.
struct SparseDelta {
  std::vector<std::uint32_t> indices;
  std::vector<float> values;

  std::size_t size() const { return indices.size(); }
};

// Number of entries a Top-P% selection keeps: ceil(p * n / 100), clamped to
// at least one entry. Integral percentages take the exact integer path so
// boundary cases like 50% of 576 never drift across a rounding edge.
inline int entry_count_for(double p_percent, int global_count) {
  if (!(p_percent > 0.0) || p_percent > 100.0) {
    throw std::invalid_argument("top-p percentage must be in (0, 100]");
  }
  if (global_count <= 0) {
    throw std::invalid_argument("global parameter count must be positive");
  }
  int m;
  const double integral = std::floor(p_percent);
  if (integral == p_percent) {
    const long long pi = static_cast<long long>(integral);
    m = static_cast<int>((pi * global_count + 99) / 100);
  } else {
    m = static_cast<int>(std::ceil(p_percent * static_cast<double>(global_count) / 100.0));
  }
  return std::clamp(m, 1, global_count);
}

// Keep the entries of (g_new - g_old) with the largest magnitudes. Ties
// prefer the lower index; the result is ordered by index.
inline SparseDelta top_p_select(const VectorF& g_new, const VectorF& g_old,
                                double p_percent) {
  if (g_new.size() != g_old.size()) {
    throw std::invalid_argument("global vectors have different lengths");
  }
  const int n = static_cast<int>(g_new.size());
  const int m = entry_count_for(p_percent, n);

  VectorF diff = g_new - g_old;
  std::vector<std::uint32_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0u);
  const auto better = [&diff](std::uint32_t a, std::uint32_t b) {
    const float ma = std::fabs(diff[static_cast<Eigen::Index>(a)]);
    const float mb = std::fabs(diff[static_cast<Eigen::Index>(b)]);
    if (ma != mb) return ma > mb;
    return a < b;
  };
  if (m < n) {
    std::nth_element(order.begin(), order.begin() + m, order.end(), better);
    order.resize(static_cast<std::size_t>(m));
  }
  std::sort(order.begin(), order.end());

  SparseDelta delta;
  delta.indices = std::move(order);
  delta.values.reserve(delta.indices.size());
  for (std::uint32_t idx : delta.indices) {
    delta.values.push_back(diff[static_cast<Eigen::Index>(idx)]);
  }
  return delta;
}

inline void validate_delta(const SparseDelta& delta, int global_count) {
  if (delta.indices.size() != delta.values.size()) {
    throw std::invalid_argument("index and value arrays have different lengths");
  }
  std::uint32_t prev = 0;
  bool first = true;
  for (std::uint32_t idx : delta.indices) {
    if (idx >= static_cast<std::uint32_t>(global_count)) {
      throw std::out_of_range("delta index " + std::to_string(idx) +
                              " outside global vector of length " +
                              std::to_string(global_count));
    }
    if (!first && idx <= prev) {
      throw std::invalid_argument("delta indices are not strictly increasing");
    }
    prev = idx;
    first = false;
  }
}

// g[i] += scale * value for each entry, in single precision.
inline void apply_delta(VectorF& global_weights, const SparseDelta& delta, float scale) {
  validate_delta(delta, static_cast<int>(global_weights.size()));
  for (std::size_t k = 0; k < delta.indices.size(); ++k) {
    global_weights[static_cast<Eigen::Index>(delta.indices[k])] += scale * delta.values[k];
  }
}

}  // namespace tmf
