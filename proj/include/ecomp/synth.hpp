#pragma once

// Random desk-scale networks, inputs and profiles.

#include <cstdint>
#include <random>
#include <vector>

#include "ecomp/network.hpp"

namespace ecomp {

struct DenseNetSpec {
  std::vector<std::size_t> widths;  // input, hidden..., output
  Activation hidden = Activation::Relu;
  Activation last = Activation::Identity;
  bool bias = true;
  bool norms = false;     // frozen affine norm on hidden blocks
  bool residual = false;  // residual connection on square hidden blocks
  double gain = 1.0;      // weight std = gain/√fan_in
  std::uint64_t seed = 0;
};

Network random_dense_network(const DenseNetSpec& spec);

struct ConvNetSpec {
  std::size_t height = 4, width = 4;
  std::vector<std::size_t> channels;  // input channels, then one entry per conv block
  std::size_t kernel = 3;
  std::size_t classes = 3;  // dense head output
  Activation act = Activation::Relu;
  std::uint64_t seed = 0;
};

Network random_conv_network(const ConvNetSpec& spec);

Vector random_input(std::size_t dim, std::mt19937_64& rng, double scale = 1.0);

// Uniform rank in each layer's range (shared within tied groups); each layer's
// bits drawn from `bit_levels` (0 = full precision) and used for all factors.
Profile random_profile(const Network& net, std::mt19937_64& rng, const std::vector<int>& bit_levels);

}  // namespace ecomp
