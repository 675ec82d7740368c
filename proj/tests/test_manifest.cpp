#include <cmath>
#include <random>
#include <sstream>

#include <json.hpp>

#include "doctest.h"
#include "ecomp/cost.hpp"
#include "ecomp/manifest.hpp"
#include "ecomp/synth.hpp"
#include "test_support.hpp"

using namespace ecomp;

namespace {

std::vector<Vector> inputs(std::size_t n, std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Vector> xs;
  for (std::size_t i = 0; i < n; ++i) xs.push_back(random_input(dim, rng));
  return xs;
}

// Network, calibration, two profiles with conservative ledgers, a lattice and payloads.
Manifest full_manifest(const Network& net) {
  Manifest m;
  m.height = net.height;
  m.width = net.width;
  m.net = net;
  m.calibration = calibrate(net, inputs(16, net.blocks.front().layer.in_dim() * net.height * net.width, 5));
  std::mt19937_64 rng(9);
  Profile lo = random_profile(net, rng, {4});
  for (auto& c : lo.layers) c.k = net.blocks[&c - lo.layers.data()].layer.k_min();
  lo.id = "lo";
  Profile hi = full_profile(net);
  hi.id = "hi";
  m.profiles = {lo, hi};
  const LipschitzTable table = lipschitz_proxy(net, {}, m.profiles);
  ProfileLattice lat;
  lat.device_id = "dev";
  for (const Profile& p : m.profiles) {
    m.ledgers.push_back(build_ledger(net, *m.calibration, table, p));
    LatticeEntry e;
    e.profile = p;
    e.latency_ms = 1.0 + static_cast<double>(lat.entries.size());
    e.bytes = profile_cost(net, p).total_weight_bytes();
    e.delta_hat = m.ledgers.back().delta_hat;
    lat.entries.push_back(e);
    m.payloads.push_back(make_payload(net, p));
  }
  m.lattice = lat;
  m.provenance = {42, "abc", "test"};
  return m;
}

}  // namespace

TEST_CASE("base64 matches the standard test vectors and round-trips binary") {
  const char* plain[] = {"", "f", "fo", "foo", "foob", "fooba", "foobar"};
  const char* coded[] = {"", "Zg==", "Zm8=", "Zm9v", "Zm9vYg==", "Zm9vYmE=", "Zm9vYmFy"};
  for (int i = 0; i < 7; ++i) {
    CHECK(base64_encode(plain[i]) == coded[i]);
    CHECK(base64_decode(coded[i]) == plain[i]);
  }
  std::string bin;
  for (int i = 0; i < 256; ++i) bin += static_cast<char>(i);
  CHECK(base64_decode(base64_encode(bin)) == bin);
  CHECK_THROWS_AS(base64_decode("Zm9"), ManifestError);
  CHECK_THROWS_AS(base64_decode("Zm9*"), ManifestError);
}

TEST_CASE("packed factors: byte count is ceil(count*q/8) and decoding matches dequantize") {
  std::mt19937_64 rng(3);
  const Matrix m = testing::random_matrix(7, 5, rng);
  for (int q : {2, 3, 4, 5, 7, 8, 12}) {
    const QuantizedFactor qf = quantize(m, calibrate_scale(m, {.bits = q}));
    const FactorPayload f = encode_factor("u", m, qf);
    CHECK(f.bytes.size() == (35u * q + 7) / 8);
    CHECK(decode_factor(f) == dequantize(qf));
  }
  const FactorPayload raw = encode_factor("v", m, std::nullopt);
  CHECK(raw.bytes.size() == 35u * 8);
  CHECK(decode_factor(raw) == m);
}

TEST_CASE("manifest round-trip is byte-identical and verifies") {
  const Network net = random_dense_network({.widths = {6, 8, 5, 3}, .seed = 21});
  const Manifest m = full_manifest(net);
  const std::string s1 = manifest_to_string(m);
  const Manifest back = manifest_from_string(s1);
  CHECK(manifest_to_string(back) == s1);
  REQUIRE(back.net);
  CHECK(fingerprint(*back.net) == fingerprint(net));

  const ManifestCheck chk = verify_manifest(back);
  for (const auto& p : chk.problems) MESSAGE(p);
  CHECK(chk.ok());
  CHECK(chk.payloads_checked == 2);
  CHECK(chk.ledgers_checked == 2);
  CHECK(chk.max_ledger_error <= 1e-10);

  for (std::size_t i = 0; i < back.payloads.size(); ++i) {
    const Profile& p = back.profiles[i];
    for (std::size_t l = 0; l < net.blocks.size(); ++l)
      CHECK(back.payloads[i].layers[l].size() == bytes_of(net.blocks[l].layer, p.layers[l].k, p.layers[l].bits));
  }
}

TEST_CASE("conv network manifests round-trip") {
  const Network net = random_conv_network({.height = 3, .width = 3, .channels = {2, 3, 4}, .classes = 2, .seed = 4});
  const Manifest m = full_manifest(net);
  const std::string s = manifest_to_string(m);
  CHECK(manifest_to_string(manifest_from_string(s)) == s);
  CHECK(verify_manifest(manifest_from_string(s)).ok());
}

TEST_CASE("tampering is detected") {
  const Network net = random_dense_network({.widths = {4, 6, 2}, .seed = 2});
  const Manifest m = full_manifest(net);
  nlohmann::json j = nlohmann::json::parse(manifest_to_string(m));

  SUBCASE("parameter change breaks the fingerprint") {
    j["network"]["blocks"][0]["residual"] = true;
    j["network"]["blocks"][0]["factors"]["sigma"] =
        base64_encode(std::string(8 * net.blocks[0].layer.sigma().size(), '\x01'));
    CHECK_THROWS_AS(manifest_from_string(j.dump()), ManifestError);
  }
  SUBCASE("unknown version") {
    j["version"] = 2;
    CHECK_THROWS_AS(manifest_from_string(j.dump()), ManifestError);
  }
  SUBCASE("edited ledger residual") {
    Manifest bad = m;
    bad.ledgers[0].layers[0].residual *= 1.0 + 1e-6;
    CHECK_FALSE(verify_manifest(bad).ok());
  }
  SUBCASE("edited payload byte") {
    Manifest bad = m;
    bad.payloads[0].layers[0].factors[0].bytes[0] ^= 1;
    CHECK_FALSE(verify_manifest(bad).ok());
  }
  SUBCASE("stale calibration") {
    Manifest bad = m;
    bad.calibration->fingerprint ^= 1;
    CHECK_FALSE(verify_manifest(bad).ok());
  }
  SUBCASE("malformed json") { CHECK_THROWS_AS(manifest_from_string("{\"format\":"), ManifestError); }
}

TEST_CASE("decompose reproduces the raw weights at full rank") {
  const Network net = random_dense_network({.widths = {5, 7, 3}, .norms = true, .seed = 8});
  const Manifest raw = raw_manifest(net);
  const std::string s = manifest_to_string(raw);
  CHECK(manifest_to_string(manifest_from_string(s)) == s);

  const DecomposeResult d = decompose(manifest_from_string(s));
  for (double e : d.relative_error) CHECK(e < 1e-12);
  const Vector x = inputs(1, 5, 1).front();
  const Vector a = forward_full(net, x).outputs.back(), b = forward_full(d.net, x).outputs.back();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) < 1e-10);

  const DecomposeResult capped = decompose(raw, 2);
  for (const Block& blk : capped.net.blocks) CHECK(blk.layer.k_max() == 2);
  CHECK_THROWS_AS(decompose(raw, 0), ManifestError);
  CHECK_THROWS_AS(decompose(Manifest{}), ManifestError);
}

TEST_CASE("conv decompose uses the output-channel unfolding") {
  const Network net = random_conv_network({.height = 3, .width = 3, .channels = {2, 3}, .classes = 2, .seed = 6});
  const DecomposeResult d = decompose(raw_manifest(net));
  for (double e : d.relative_error) CHECK(e < 1e-10);
}

TEST_CASE("dataset CSV round-trips exactly") {
  Dataset d;
  d.x = {{0.1, -2.5e-17, 3.0}, {1.0 / 3.0, 4.0, -5.0}};
  d.y = {0, 1};
  std::stringstream ss;
  write_dataset_csv(ss, d);
  const Dataset back = read_dataset_csv(ss);
  CHECK(back.x == d.x);
  CHECK(back.y == d.y);
  std::stringstream bad("x0,x1\n1,2,3\n");
  CHECK_THROWS_AS(read_dataset_csv(bad), ManifestError);
}
