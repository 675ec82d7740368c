#include "ecomp/synth.hpp"

#include <cmath>
#include <map>

namespace ecomp {

namespace {

Matrix gaussian(std::size_t r, std::size_t c, double sd, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, sd);
  Matrix m(r, c);
  for (double& x : m.data()) x = n(rng);
  return m;
}

Vector gaussian_vec(std::size_t n, double mean, double sd, std::mt19937_64& rng) {
  std::normal_distribution<double> d(mean, sd);
  Vector v(n);
  for (double& x : v) x = d(rng);
  return v;
}

}  // namespace

Network random_dense_network(const DenseNetSpec& spec) {
  if (spec.widths.size() < 2) throw LinalgError("random_dense_network: need at least two widths");
  std::mt19937_64 rng(spec.seed);
  Network net;
  const std::size_t L = spec.widths.size() - 1;
  for (std::size_t l = 0; l < L; ++l) {
    const std::size_t n = spec.widths[l], m = spec.widths[l + 1];
    const bool last = l + 1 == L;
    Block b;
    b.layer = ElasticLayer::dense(gaussian(m, n, spec.gain / std::sqrt(static_cast<double>(n)), rng));
    if (spec.bias) b.layer.set_bias(gaussian_vec(m, 0.0, 0.1, rng));
    b.act = last ? spec.last : spec.hidden;
    if (spec.norms && !last) b.norm = FrozenNorm{gaussian_vec(m, 1.0, 0.2, rng), gaussian_vec(m, 0.0, 0.1, rng)};
    b.residual = spec.residual && !last && n == m;
    b.name = "fc" + std::to_string(l);
    net.blocks.push_back(std::move(b));
  }
  net.validate();
  return net;
}

Network random_conv_network(const ConvNetSpec& spec) {
  if (spec.channels.size() < 2) throw LinalgError("random_conv_network: need input and one conv");
  std::mt19937_64 rng(spec.seed);
  Network net;
  net.height = spec.height;
  net.width = spec.width;
  for (std::size_t l = 0; l + 1 < spec.channels.size(); ++l) {
    const std::size_t ci = spec.channels[l], co = spec.channels[l + 1];
    const double sd = 1.0 / std::sqrt(static_cast<double>(ci * spec.kernel * spec.kernel));
    Tensor4 k(co, ci, spec.kernel, spec.kernel);
    std::normal_distribution<double> n(0.0, sd);
    for (double& x : k.data()) x = n(rng);
    Block b;
    b.layer = ElasticLayer::conv(k);
    b.layer.set_bias(gaussian_vec(co, 0.0, 0.1, rng));
    b.act = spec.act;
    b.name = "conv" + std::to_string(l);
    net.blocks.push_back(std::move(b));
  }
  const std::size_t flat = spec.channels.back() * spec.height * spec.width;
  Block head;
  head.layer = ElasticLayer::dense(gaussian(spec.classes, flat, 1.0 / std::sqrt(static_cast<double>(flat)), rng));
  head.act = Activation::Identity;
  head.name = "head";
  net.blocks.push_back(std::move(head));
  net.validate();
  return net;
}

Vector random_input(std::size_t dim, std::mt19937_64& rng, double scale) {
  return gaussian_vec(dim, 0.0, scale, rng);
}

Profile random_profile(const Network& net, std::mt19937_64& rng, const std::vector<int>& bit_levels) {
  if (bit_levels.empty()) throw LinalgError("random_profile: no bit levels");
  Profile p;
  p.id = "random";
  std::map<std::string, std::size_t> group_k;
  for (const Block& b : net.blocks) {
    const ElasticLayer& L = b.layer;
    std::uniform_int_distribution<std::size_t> dk(L.k_min(), L.k_max());
    std::size_t k = dk(rng);
    if (const auto& g = L.group_id()) k = group_k.emplace(*g, k).first->second;
    std::uniform_int_distribution<std::size_t> dq(0, bit_levels.size() - 1);
    p.layers.push_back({k, FactorBits::uniform(bit_levels[dq(rng)])});
  }
  return p;
}

}  // namespace ecomp
