#pragma once

// Per-layer compute and memory accounting and a linear latency proxy
//   Lat̂ = α₀ + Σ_ℓ (α_ℓ^comp·FLOPs_ℓ + α_ℓ^mem·Bytes_ℓ)
// fitted by non-negative least squares.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ecomp/network.hpp"

namespace ecomp {

class CostError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Activation width at inference, in bits.
inline constexpr int kActivationBits = 8;

// 2nk + k + 2mk; k ≥ 1.
std::uint64_t flops_dense_svd(std::uint64_t m, std::uint64_t n, std::uint64_t k);
std::uint64_t flops_dense_full(std::uint64_t m, std::uint64_t n);
// 2HW(C_i r_i + r_o r_i h w + C_o r_o)
std::uint64_t flops_conv_tucker2(std::uint64_t c_o, std::uint64_t c_i, std::uint64_t h,
                                 std::uint64_t w, std::uint64_t H, std::uint64_t W,
                                 std::uint64_t r_o, std::uint64_t r_i);
std::uint64_t flops_conv_full(std::uint64_t c_o, std::uint64_t c_i, std::uint64_t h,
                              std::uint64_t w, std::uint64_t H, std::uint64_t W);

// ceil(count·storage_bits(q)/8)
std::uint64_t tensor_bytes(std::uint64_t count, int q);
// Factor payload bytes, each tensor rounded up separately.
std::uint64_t bytes_of(const ElasticLayer& layer, std::size_t k, const FactorBits& bits);

struct LayerCost {
  std::uint64_t flops = 0;
  std::uint64_t weight_bytes = 0;
  // Stage inputs/outputs at kActivationBits: dense n + k + m,
  // conv HW(C_i + r_i + r_o + C_o).
  std::uint64_t activation_bytes = 0;

  std::uint64_t bytes() const { return weight_bytes + activation_bytes; }
};

struct ProfileCost {
  std::string profile_id;
  std::vector<LayerCost> layers;

  std::uint64_t total_flops() const;
  std::uint64_t total_weight_bytes() const;
};

LayerCost layer_cost(const Network& net, std::size_t l, const LayerChoice& c);
ProfileCost profile_cost(const Network& net, const Profile& p);

// Device CSV identifier: the profile id if set, else its key.
std::string device_profile_id(const Profile& p);

struct DeviceRecord {
  std::string profile_id;
  double latency_ms = 0.0;
  std::optional<double> energy_mj;
};

struct DeviceTable {
  std::string device_id;
  std::vector<DeviceRecord> records;
  std::string noise_model;  // description, e.g. "lognormal sigma=0.03"
};

// Header: profile_id,latency_ms,energy_mj (energy may be empty).
void write_device_csv(std::ostream& os, const DeviceTable& t);
DeviceTable read_device_csv(std::istream& is, const std::string& device_id);

// Planted linear device: latency = launch + Σ(comp·FLOPs + mem·Bytes), times
// exp(σ·N(0,1)). Energy uses its own coefficients and noise draw.
struct SyntheticDevice {
  std::string device_id;
  double launch_ms = 0.0;
  Vector comp, mem;
  double energy0 = 0.0;
  Vector energy_comp, energy_mem;
  double noise_sigma = 0.03;

  double latency(const ProfileCost& c) const;
  double energy(const ProfileCost& c) const;
};

// Coefficients log-uniform in fixed decades; launch = per-layer overhead × L.
SyntheticDevice make_synthetic_device(const std::string& id, std::size_t layers,
                                      std::uint64_t seed, double noise_sigma = 0.03);
DeviceTable synthesize_table(const SyntheticDevice& dev, const std::vector<ProfileCost>& costs,
                             std::uint64_t seed);

// min ‖Ax − b‖₂ s.t. x ≥ 0 (Lawson–Hanson active set).
Vector nnls(const Matrix& a, std::span<const double> b, std::size_t max_iter = 0);

enum class CostTarget { Latency, Energy };

struct CostModel {
  std::string device_id;
  CostTarget target = CostTarget::Latency;
  double alpha0 = 0.0;
  Vector comp, mem;
  double r2 = 0.0;
  double mape_percent = 0.0;  // on the fitting grid

  std::size_t layers() const { return comp.size(); }
};

// Matches records to costs by profile id. Throws if the system is
// underdetermined, every feature column is zero, or an id is unknown.
CostModel fit_cost_model(const DeviceTable& table, const std::vector<ProfileCost>& costs,
                         CostTarget target = CostTarget::Latency);
double predict(const CostModel& m, const ProfileCost& c);
// Mean |pred − y|/y in percent.
double mape_percent(const CostModel& m, const DeviceTable& table,
                    const std::vector<ProfileCost>& costs);

// ⌊mn/(m+n)⌋, compute-only break-even rank.
std::uint64_t threshold_rank_dense(std::uint64_t m, std::uint64_t n);
// Largest k with flops_dense_svd(m,n,k) < 2mn under the exact three-term count
// (0 if none).
std::uint64_t break_even_rank_exact(std::uint64_t m, std::uint64_t n);
// 1/√(hw)
double threshold_rho_conv(std::uint64_t h, std::uint64_t w);

// Pairs (i, j) with profiles[i] ≼ profiles[j] but predict(i) > predict(j).
std::size_t monotone_cost_violations(const CostModel& m, const std::vector<Profile>& profiles,
                                     const std::vector<ProfileCost>& costs);

}  // namespace ecomp
