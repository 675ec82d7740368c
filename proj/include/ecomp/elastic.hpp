#pragma once

// Elastic factorized layers: factors stored up to k_max, realized at any
// rank k in [k_min, k_max] and optionally quantized per factor.

#include <optional>
#include <string>
#include <utility>
#include <variant>

#include "ecomp/linalg.hpp"
#include "ecomp/quant.hpp"

namespace ecomp {

enum class LayerKind { DenseSvd, ConvTucker2, DenseCp };

const char* to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& s);

// Bit-widths for (U, core, V); 0 leaves that factor in full precision.
struct FactorBits {
  int u = 0, core = 0, v = 0;

  bool quantized() const { return u > 0 || core > 0 || v > 0; }
  static FactorBits uniform(int q) { return {q, q, q}; }
  bool operator==(const FactorBits&) const = default;
};

// Factor bit-width used for cost accounting; full precision counts as float64.
inline int storage_bits(int q) { return q > 0 ? q : 64; }

enum class FactorRole { U, Core, V };

// q(k) = min(q_max, floor(a·ln k + b)), shifted per factor and clamped to [2, q_max].
struct BitMap {
  double a = 0.0;
  double b = 8.0;
  int q_max = 8;
  int off_u = 1, off_core = 0, off_v = 1;

  int base(std::size_t k) const;
  int bit_of_rank(std::size_t k, FactorRole role) const;
  FactorBits bits(std::size_t k) const;
};

class ElasticLayer {
 public:
  // Dense m×n weight factorized by SVD (or CP-ALS) at full rank.
  static ElasticLayer dense(const Matrix& w, LayerKind kind = LayerKind::DenseSvd,
                            std::size_t cp_sweeps = 30);
  // Conv kernel factorized by a full-rank Tucker-2 fit; k_max = max(C_out, C_in).
  static ElasticLayer conv(const Tensor4& w);
  // Adopts stored factors as-is (full rank range).
  static ElasticLayer from_factors(SvdFactors f);
  static ElasticLayer from_factors(CpFactors f);
  static ElasticLayer from_factors(Tucker2Factors f);

  LayerKind kind() const { return kind_; }
  bool is_conv() const { return kind_ == LayerKind::ConvTucker2; }
  std::size_t k_min() const { return k_min_; }
  std::size_t k_max() const { return k_max_; }
  void set_rank_range(std::size_t k_min, std::size_t k_max);

  const std::optional<std::string>& group_id() const { return group_; }
  void set_group_id(std::optional<std::string> g) { group_ = std::move(g); }
  const std::optional<Vector>& bias() const { return bias_; }
  void set_bias(std::optional<Vector> b);

  // Output and input feature (dense) or channel (conv) counts.
  std::size_t out_dim() const;
  std::size_t in_dim() const;
  std::size_t kernel_h() const;
  std::size_t kernel_w() const;

  // Dense layers share the (u, σ, v) triple; CP maps (a1, λ, a2) onto it.
  const Matrix& u() const;
  const Vector& sigma() const;
  const Matrix& v() const;
  Matrix& mutable_u();
  Vector& mutable_sigma();
  Matrix& mutable_v();
  const Tucker2Factors& tucker() const;
  Tucker2Factors& mutable_tucker();

  // r_o(k) = ceil(k·C_out/k_max), r_i(k) = ceil(k·C_in/k_max).
  std::pair<std::size_t, std::size_t> conv_ranks(std::size_t k) const;

  void check_rank(std::size_t k) const;

 private:
  LayerKind kind_ = LayerKind::DenseSvd;
  std::variant<SvdFactors, Tucker2Factors, CpFactors> factors_;
  std::size_t k_min_ = 1, k_max_ = 1;
  std::optional<std::string> group_;
  std::optional<Vector> bias_;
};

// Realized factors for one (k, bits) choice. Quantized factors hold
// dequantized values; codes are kept for export.
struct LayerOp {
  LayerKind kind = LayerKind::DenseSvd;
  std::size_t k = 0;
  FactorBits bits;
  Matrix u;       // dense: m×k; conv: C_out×r_o
  Vector sigma;   // dense only
  Tensor4 core;   // conv only: r_o×r_i×h×w
  Matrix v;       // dense: n×k; conv: C_in×r_i
  std::optional<Vector> bias;
  std::optional<QuantizedFactor> qu, qcore, qv;

  Matrix dense_weight() const;
  Tensor4 conv_weight() const;
};

LayerOp materialize(const ElasticLayer& layer, std::size_t k, const FactorBits& bits = {});

// Top-k effective weight without quantization.
Matrix truncate_dense(const ElasticLayer& layer, std::size_t k);
Tensor4 truncate_conv(const ElasticLayer& layer, std::size_t k);

// Operator norm of W(k_max) − W̃(k, bits). Dense SVD without quantization is
// σ_{k+1}; otherwise the exact spectral norm of the explicit residual. For
// conv layers the value is the bound √(hw)·‖unfold(ΔK)‖₂ on the stride-1
// convolution operator norm.
double residual_norm(const ElasticLayer& layer, std::size_t k, const FactorBits& bits = {});

// Operator norm bound of a conv kernel: √(hw)·‖unfold_out(K)‖₂.
double conv_operator_bound(const Tensor4& k);

// Hard(k) mask: 1 for i < k, 0 otherwise.
Vector hard_mask(std::size_t k_max, std::size_t k);

// Gumbel-top-k soft mask: g = logits + noise, threshold halfway between the
// k-th and (k+1)-th largest g, m_i = sigmoid((g_i − thr)/τ). All ones when
// k_target equals the length.
Vector soft_mask(std::span<const double> logits, std::span<const double> gumbel_noise,
                 std::size_t k_target, double tau);

// τ_t = max(τ_min, τ0·α^{t/T})
double anneal_temperature(std::size_t t, std::size_t horizon, double tau0 = 2.0,
                          double tau_min = 0.3, double alpha = 0.5);

}  // namespace ecomp
