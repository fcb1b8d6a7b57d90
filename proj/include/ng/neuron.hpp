#pragma once

#include <cstdint>
#include <tuple>

namespace ng {

// One MLP hidden unit: the unit of attribution and gating. "layer" indexes
// the transformer block, "index" the post-activation hidden channel.
struct NeuronId {
  int layer = 0;
  int index = 0;

  friend bool operator==(const NeuronId& a, const NeuronId& b) {
    return a.layer == b.layer && a.index == b.index;
  }
  friend bool operator<(const NeuronId& a, const NeuronId& b) {
    return std::tie(a.layer, a.index) < std::tie(b.layer, b.index);
  }
};

}  // namespace ng
