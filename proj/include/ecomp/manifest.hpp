#pragma once

// Single-file JSON manifest: topology and factors, calibration summary,
// certificate ledgers, the profile lattice and per-profile payloads.
// Binary arrays are base64 (float64 little-endian, or bit-packed codes);
// scales and statistics are %.17g strings so 64-bit values round-trip.

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ecomp/certificate.hpp"
#include "ecomp/controller.hpp"
#include "ecomp/network.hpp"
#include "ecomp/quant.hpp"

namespace ecomp {

class ManifestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kManifestVersion = 1;

std::string base64_encode(const std::string& bytes);
std::string base64_decode(const std::string& text);

// Unfactorized layer, the decompose input. Conv weights are held as their
// output-channel unfolding C_out × (C_in·kh·kw).
struct RawBlock {
  std::string name;
  LayerKind kind = LayerKind::DenseSvd;  // target factorization
  Matrix weight;
  std::size_t kh = 1, kw = 1;
  std::optional<Vector> bias;
  Activation act = Activation::Relu;
  std::optional<FrozenNorm> norm;
  bool residual = false;
  std::optional<std::string> group;
};

// One stored factor. Quantized: offset codes c + (2^{q−1}−1) packed q bits
// each, LSB first; otherwise raw float64.
struct FactorPayload {
  std::string role;  // "u", "core", "v"
  std::size_t rows = 0, cols = 0;
  int bits = 0;
  Granularity granularity = Granularity::PerTensor;
  int axis = 0;
  Vector scales;
  std::string bytes;
};

struct LayerPayload {
  std::size_t k = 0;
  FactorBits bits;
  std::vector<FactorPayload> factors;

  std::uint64_t size() const;
};

struct ProfilePayload {
  std::string profile_id;
  std::vector<LayerPayload> layers;

  std::uint64_t size() const;
};

struct Provenance {
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string command;
};

struct Manifest {
  int version = kManifestVersion;
  std::size_t height = 1, width = 1;
  std::vector<RawBlock> raw;    // decompose input
  std::optional<Network> net;   // elastic model
  std::optional<CalibrationStats> calibration;
  std::vector<Profile> profiles;  // certified profiles, unique ids
  std::vector<CertificateLedger> ledgers;
  std::optional<ProfileLattice> lattice;
  std::vector<ProfilePayload> payloads;
  Provenance provenance;
};

FactorPayload encode_factor(const std::string& role, const Matrix& values,
                            const std::optional<QuantizedFactor>& q);
// Dequantized (or raw) values of a stored factor.
Matrix decode_factor(const FactorPayload& f);
ProfilePayload make_payload(const Network& net, const Profile& p);

std::string manifest_to_string(const Manifest& m);
// Rejects unknown versions, malformed fields and fingerprint mismatches.
Manifest manifest_from_string(const std::string& text);
// Write to a sibling temporary, then rename over `path`.
void write_manifest(const std::string& path, const Manifest& m);
Manifest read_manifest(const std::string& path);

void write_text_atomic(const std::string& path, const std::string& text);
std::string read_text(const std::string& path);

Manifest raw_manifest(const Network& net);

struct DecomposeResult {
  Network net;
  Vector relative_error;  // per layer, full-rank reconstruction vs the raw weight
};

// `k_max` caps every layer's rank range; `kinds` (if non-empty) overrides the
// target kind per layer.
DecomposeResult decompose(const Manifest& raw, std::optional<std::size_t> k_max = std::nullopt,
                          const std::vector<LayerKind>& kinds = {});

const Profile* find_profile(const Manifest& m, const std::string& id);
const CertificateLedger* find_ledger(const Manifest& m, const std::string& id);

// Conservative L̂ covers the tails of every conservative ledger's profile;
// recomputing those ledgers keeps the table consistent.
std::vector<Profile> conservative_tail_profiles(const Manifest& m);

struct ManifestCheck {
  std::vector<std::string> problems;
  double max_ledger_error = 0.0;
  std::size_t payloads_checked = 0;
  std::size_t ledgers_checked = 0;

  bool ok() const { return problems.empty(); }
};

// Independent read-and-recompute pass: payload sizes against bytes_of and
// decoded values against materialize, lattice bytes and ids, and every
// ledger's residuals, α, L̂ (Conservative) and Δ̂ to `tol` relative.
ManifestCheck verify_manifest(const Manifest& m, double tol = 1e-10);

// Labelled data as CSV: x0..x{d−1}[,label].
struct Dataset {
  std::vector<Vector> x;
  std::vector<std::size_t> y;  // empty when unlabelled
};
void write_dataset_csv(std::ostream& os, const Dataset& d);
Dataset read_dataset_csv(std::istream& is);

}  // namespace ecomp
