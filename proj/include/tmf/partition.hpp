#pragma once

#include <algorithm>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "tmf/nn.hpp"

namespace tmf {

// Which layers a client keeps to itself. Granularity is whole layers: every
// parameter of a layer is either global (shared with the server) or local
// (reconstructed from scratch each round and never transmitted).
struct PartitionPolicy {
  enum class Kind { AllGlobal, LastLayerLocal, ByLayerList };
  Kind kind = Kind::AllGlobal;
  std::vector<int> local_layers;  // only for ByLayerList

  // Accepts "all_global", "last_layer_local" or "local_layers=[1,2]".
  static PartitionPolicy parse(const std::string& text) {
    PartitionPolicy p;
    if (text == "all_global") {
      p.kind = Kind::AllGlobal;
      return p;
    }
    if (text == "last_layer_local") {
      p.kind = Kind::LastLayerLocal;
      return p;
    }
    const std::string prefix = "local_layers=[";
    if (text.rfind(prefix, 0) == 0 && !text.empty() && text.back() == ']') {
      p.kind = Kind::ByLayerList;
      const std::string body = text.substr(prefix.size(), text.size() - prefix.size() - 1);
      std::stringstream ss(body);
      std::string item;
      while (std::getline(ss, item, ',')) {
        std::size_t pos = 0;
        const int idx = std::stoi(item, &pos);
        while (pos < item.size() && std::isspace(static_cast<unsigned char>(item[pos]))) ++pos;
        if (pos != item.size()) throw std::invalid_argument("bad layer index '" + item + "'");
        p.local_layers.push_back(idx);
      }
      if (body.empty()) p.local_layers.clear();
      return p;
    }
    throw std::invalid_argument("unknown partition policy '" + text + "'");
  }

  std::string to_string() const {
    switch (kind) {
      case Kind::AllGlobal:
        return "all_global";
      case Kind::LastLayerLocal:
        return "last_layer_local";
      case Kind::ByLayerList: {
        std::string s = "local_layers=[";
        for (std::size_t i = 0; i < local_layers.size(); ++i) {
          if (i) s += ',';
          s += std::to_string(local_layers[i]);
        }
        return s + "]";
      }
    }
    return "";
  }
};

// Compacted views over the flat weight layout. Global parameters keep their
// relative order, so compact index i always refers to the i-th global
// parameter in layout order; sparse deltas index this compact vector.
class Partition {
 public:
  Partition(const NetworkSpec& spec, const PartitionPolicy& policy) {
    const int depth = static_cast<int>(spec.layers().size());
    std::vector<bool> layer_local(depth, false);
    switch (policy.kind) {
      case PartitionPolicy::Kind::AllGlobal:
        break;
      case PartitionPolicy::Kind::LastLayerLocal:
        layer_local[depth - 1] = true;
        break;
      case PartitionPolicy::Kind::ByLayerList:
        for (int idx : policy.local_layers) {
          if (idx < 0 || idx >= depth) {
            throw std::invalid_argument("local layer index " + std::to_string(idx) +
                                        " out of range for " + std::to_string(depth) +
                                        " layers");
          }
          layer_local[idx] = true;
        }
        break;
    }
    if (std::all_of(layer_local.begin(), layer_local.end(), [](bool b) { return b; })) {
      throw std::invalid_argument("partition leaves no global parameters");
    }

    global_mask_ = BoolMask::Constant(spec.param_count(), true);
    for (int k = 0; k < depth; ++k) {
      if (!layer_local[k]) continue;
      const int off = spec.weight_offset(k);
      const int n = spec.layer_param_count(k);
      global_mask_.segment(off, n).setConstant(false);
    }
    for (int i = 0; i < spec.param_count(); ++i) {
      if (global_mask_[i]) {
        global_indices_.push_back(i);
      } else {
        local_indices_.push_back(i);
      }
    }
    local_mask_ = !global_mask_;
    layer_local_ = std::move(layer_local);
  }

  int global_count() const { return static_cast<int>(global_indices_.size()); }
  int local_count() const { return static_cast<int>(local_indices_.size()); }
  bool layer_is_local(std::size_t k) const { return layer_local_[k]; }

  // Full-layout masks, usable directly as trainable masks in backward().
  const BoolMask& global_mask() const { return global_mask_; }
  const BoolMask& local_mask() const { return local_mask_; }

  // Full layout index of compact global index i.
  int global_index(int i) const { return global_indices_[static_cast<std::size_t>(i)]; }

  VectorF gather_global(const VectorF& w) const {
    VectorF out(global_count());
    for (int i = 0; i < global_count(); ++i) out[i] = w[global_indices_[i]];
    return out;
  }

  VectorF gather_local(const VectorF& w) const {
    VectorF out(local_count());
    for (int i = 0; i < local_count(); ++i) out[i] = w[local_indices_[i]];
    return out;
  }

  void scatter_global(const VectorF& compact, VectorF& w) const {
    if (compact.size() != global_count()) {
      throw std::invalid_argument("compact global vector has wrong length");
    }
    for (int i = 0; i < global_count(); ++i) w[global_indices_[i]] = compact[i];
  }

  void scatter_local(const VectorF& compact, VectorF& w) const {
    if (compact.size() != local_count()) {
      throw std::invalid_argument("compact local vector has wrong length");
    }
    for (int i = 0; i < local_count(); ++i) w[local_indices_[i]] = compact[i];
  }

  // Rebuild a full weight vector from its two compact halves.
  VectorF merge(const NetworkSpec& spec, const VectorF& global_part,
                const VectorF& local_part) const {
    VectorF w = VectorF::Zero(spec.param_count());
    scatter_global(global_part, w);
    scatter_local(local_part, w);
    return w;
  }

 private:
  BoolMask global_mask_;
  BoolMask local_mask_;
  std::vector<int> global_indices_;
  std::vector<int> local_indices_;
  std::vector<bool> layer_local_;
};

}  // namespace tmf
