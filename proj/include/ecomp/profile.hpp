#pragma once

#include <string>
#include <vector>

#include "ecomp/elastic.hpp"

namespace ecomp {

struct LayerChoice {
  std::size_t k = 1;
  FactorBits bits;

  // Core bit-width; 0 means full precision.
  int q() const { return bits.core; }
  bool operator==(const LayerChoice&) const = default;
};

struct Profile {
  std::string id;
  std::vector<LayerChoice> layers;

  bool operator==(const Profile&) const = default;
};

// Full precision ranks above every quantized width in the componentwise order.
inline int bit_rank(int q) { return q > 0 ? q : 1 << 20; }

inline bool choice_leq(const LayerChoice& a, const LayerChoice& b) {
  return a.k <= b.k && bit_rank(a.bits.u) <= bit_rank(b.bits.u) &&
         bit_rank(a.bits.core) <= bit_rank(b.bits.core) && bit_rank(a.bits.v) <= bit_rank(b.bits.v);
}

// Componentwise (k, q) order over all layers.
inline bool profile_leq(const Profile& a, const Profile& b) {
  if (a.layers.size() != b.layers.size()) return false;
  for (std::size_t i = 0; i < a.layers.size(); ++i)
    if (!choice_leq(a.layers[i], b.layers[i])) return false;
  return true;
}

// Canonical text key: "k:qu.qc.qv|k:qu.qc.qv|...".
std::string profile_key(const Profile& p);
// Inverse of profile_key; throws std::invalid_argument on malformed text.
Profile parse_profile_key(const std::string& key, std::string id = {});

}  // namespace ecomp
