#pragma once

// Logit-drift certificates. With L̂_ℓ bounding the post-layer gain, the
// pointwise bound is Σ_ℓ L̂_ℓ‖ΔW_ℓ‖₂‖a_{ℓ−1}(x)‖₂ and the expected bound is
// Δ̂ = Σ_ℓ L̂_ℓ‖ΔW_ℓ‖₂α_ℓ with α_ℓ the RMS of ‖a_{ℓ−1}‖₂ over calibration data.

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ecomp/network.hpp"

namespace ecomp {

class CertificateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CalibrationStats {
  Vector alpha;        // per layer, RMS of ‖a_{ℓ−1}‖₂
  Vector running_max;  // per layer, max of ‖a_{ℓ−1}‖₂
  std::size_t samples = 0;
  std::uint64_t fingerprint = 0;
};

// Full-model forward over the calibration set; summation in input order.
CalibrationStats calibrate(const Network& net, const std::vector<Vector>& inputs);

enum class ProxyMode { Conservative, PowerIter };
const char* to_string(ProxyMode m);
ProxyMode proxy_mode_from_string(const std::string& s);

struct ProxySpec {
  ProxyMode mode = ProxyMode::Conservative;
  std::size_t steps = 5;         // power steps per calibration input
  std::size_t warmup_steps = 20; // extra steps on the first input
  double ema_decay = 0.99;
  std::uint64_t seed = 0;
};

// Bias-corrected exponential moving average.
class Ema {
 public:
  explicit Ema(double decay = 0.99) : decay_(decay) {}
  void update(double x);
  double value() const;
  std::size_t count() const { return count_; }
  double raw() const { return m_; }
  void restore(double raw, std::size_t count) { m_ = raw; count_ = count; }

 private:
  double decay_;
  double m_ = 0.0;
  std::size_t count_ = 0;
};

struct LipschitzTable {
  ProxySpec spec;
  Vector lhat;
  bool certified = false;  // true only for Conservative
};

// Conservative: exact_postlayer_lipschitz with tails covering `profiles`.
// PowerIter: EMA over calibration inputs of the power-iteration estimate of
// the local post-layer Jacobian norm at the full model (may undershoot).
LipschitzTable lipschitz_proxy(const Network& net, const ProxySpec& spec,
                               const std::vector<Profile>& profiles = {},
                               const std::vector<Vector>& calibration = {});

// Power-iteration estimate for one layer (PowerIter mode).
double power_iteration_gain(const Network& net, std::size_t l, const std::vector<Vector>& inputs,
                            const ProxySpec& spec);

// ‖ΔW_ℓ(k)‖₂ for every layer.
Vector residual_norms(const Network& net, const Profile& p);

double pointwise_bound(const Vector& lhat, const Vector& residuals, const ForwardTrace& full_trace);
double pointwise_bound(const Network& net, const LipschitzTable& table, const Profile& p,
                       std::span<const double> x);

struct LedgerEntry {
  double lhat = 0.0;
  double residual = 0.0;
  double alpha = 0.0;
};

struct CertificateLedger {
  std::string profile_id;
  std::vector<LedgerEntry> layers;
  double delta_hat = 0.0;
  ProxyMode mode = ProxyMode::Conservative;
  bool certified = false;
};

// Throws CertificateError if the stats were calibrated on other parameters.
CertificateLedger build_ledger(const Network& net, const CalibrationStats& stats,
                               const LipschitzTable& table, const Profile& p);
// Σ_ℓ L̂_ℓ·‖ΔW_ℓ‖₂·α_ℓ, accumulated in layer order.
double aggregate(const std::vector<LedgerEntry>& layers);
double expected_bound(const Network& net, const CalibrationStats& stats,
                      const LipschitzTable& table, const Profile& p);

struct ProfileDiagnostics {
  std::string profile_id;
  double delta_hat = 0.0;
  double mean_drift = 0.0;
  double rms_drift = 0.0;
  double max_drift = 0.0;
  double coverage = 0.0;       // fraction of inputs with drift ≤ ε
  double p95_bound = 0.0;      // 95th percentile of the pointwise bound
  double p95_drift = 0.0;      // 95th percentile of the observed drift
  double coverage_at_p95 = 0.0;  // fraction with drift ≤ p95_bound
  std::size_t violations = 0;  // inputs with drift > pointwise bound
};

struct DiagnosticsReport {
  double epsilon = 0.0;
  std::vector<ProfileDiagnostics> profiles;
  double coverage = 0.0;                 // pooled over profiles and inputs
  std::optional<double> correlation;     // Pearson(Δ̂, mean drift); empty if undefined
};

// Type-7 percentile; throws on empty input.
double percentile95(const std::vector<double>& v);
// Pearson correlation; empty if either side has zero variance or fewer than 2 points.
std::optional<double> pearson(const std::vector<double>& a, const std::vector<double>& b);

DiagnosticsReport diagnostics(const Network& net, const CalibrationStats& stats,
                              const LipschitzTable& table, const std::vector<Profile>& profiles,
                              const std::vector<Vector>& eval_inputs, double epsilon);

}  // namespace ecomp
