#include "ecomp/elastic.hpp"

#include <algorithm>
#include <cmath>

namespace ecomp {

const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::DenseSvd: return "dense_svd";
    case LayerKind::ConvTucker2: return "conv_tucker2";
    case LayerKind::DenseCp: return "dense_cp";
  }
  return "?";
}

LayerKind layer_kind_from_string(const std::string& s) {
  if (s == "dense_svd") return LayerKind::DenseSvd;
  if (s == "conv_tucker2") return LayerKind::ConvTucker2;
  if (s == "dense_cp") return LayerKind::DenseCp;
  throw LinalgError("unsupported layer kind: " + s);
}

int BitMap::base(std::size_t k) const {
  if (k < 1) throw LinalgError("bit map: k must be at least 1");
  const double raw = std::floor(a * std::log(static_cast<double>(k)) + b);
  return static_cast<int>(std::min<double>(q_max, raw));
}

int BitMap::bit_of_rank(std::size_t k, FactorRole role) const {
  const int off = role == FactorRole::U ? off_u : role == FactorRole::Core ? off_core : off_v;
  return std::clamp(base(k) + off, 2, q_max);
}

FactorBits BitMap::bits(std::size_t k) const {
  return {bit_of_rank(k, FactorRole::U), bit_of_rank(k, FactorRole::Core),
          bit_of_rank(k, FactorRole::V)};
}

ElasticLayer ElasticLayer::dense(const Matrix& w, LayerKind kind, std::size_t cp_sweeps) {
  require_finite(w.data(), "dense layer weight");
  ElasticLayer l;
  l.kind_ = kind;
  const std::size_t r = std::min(w.rows(), w.cols());
  if (kind == LayerKind::DenseSvd) {
    l.factors_ = svd_full(w, r);
  } else if (kind == LayerKind::DenseCp) {
    l.factors_ = cp_fit(w, r, cp_sweeps);
  } else {
    throw LinalgError("ElasticLayer::dense: conv kind given for a matrix");
  }
  l.k_max_ = r;
  return l;
}

ElasticLayer ElasticLayer::conv(const Tensor4& w) {
  require_finite(w.data(), "conv kernel");
  ElasticLayer l;
  l.kind_ = LayerKind::ConvTucker2;
  l.factors_ = tucker2_fit(w, w.c_out(), w.c_in(), 0);
  l.k_max_ = std::max(w.c_out(), w.c_in());
  return l;
}

ElasticLayer ElasticLayer::from_factors(SvdFactors f) {
  if (f.u.cols() != f.rank() || f.v.cols() != f.rank() || f.rank() == 0)
    throw LinalgError("ElasticLayer: inconsistent SVD factors");
  ElasticLayer l;
  l.kind_ = LayerKind::DenseSvd;
  l.k_max_ = f.rank();
  l.factors_ = std::move(f);
  return l;
}

ElasticLayer ElasticLayer::from_factors(CpFactors f) {
  if (f.a1.cols() != f.rank() || f.a2.cols() != f.rank() || f.rank() == 0)
    throw LinalgError("ElasticLayer: inconsistent CP factors");
  ElasticLayer l;
  l.kind_ = LayerKind::DenseCp;
  l.k_max_ = f.rank();
  l.factors_ = std::move(f);
  return l;
}

ElasticLayer ElasticLayer::from_factors(Tucker2Factors f) {
  // conv_ranks assumes full-width factors.
  if (f.u_out.cols() != f.u_out.rows() || f.u_in.cols() != f.u_in.rows() ||
      f.core.c_out() != f.u_out.cols() || f.core.c_in() != f.u_in.cols())
    throw LinalgError("ElasticLayer: inconsistent Tucker-2 factors");
  ElasticLayer l;
  l.kind_ = LayerKind::ConvTucker2;
  l.k_max_ = std::max(f.u_out.rows(), f.u_in.rows());
  l.factors_ = std::move(f);
  return l;
}

void ElasticLayer::set_rank_range(std::size_t k_min, std::size_t k_max) {
  const std::size_t cap = is_conv() ? std::max(out_dim(), in_dim()) : sigma().size();
  if (k_min < 1 || k_min > k_max || k_max > cap)
    throw LinalgError("ElasticLayer: invalid rank range");
  k_min_ = k_min;
  k_max_ = k_max;
}

void ElasticLayer::set_bias(std::optional<Vector> b) {
  if (b && b->size() != out_dim()) throw LinalgError("ElasticLayer: bias length mismatch");
  bias_ = std::move(b);
}

std::size_t ElasticLayer::out_dim() const {
  return is_conv() ? tucker().u_out.rows() : u().rows();
}
std::size_t ElasticLayer::in_dim() const { return is_conv() ? tucker().u_in.rows() : v().rows(); }
std::size_t ElasticLayer::kernel_h() const { return is_conv() ? tucker().core.h() : 1; }
std::size_t ElasticLayer::kernel_w() const { return is_conv() ? tucker().core.w() : 1; }

const Matrix& ElasticLayer::u() const {
  if (auto* s = std::get_if<SvdFactors>(&factors_)) return s->u;
  if (auto* c = std::get_if<CpFactors>(&factors_)) return c->a1;
  throw LinalgError("ElasticLayer: not a dense layer");
}
const Vector& ElasticLayer::sigma() const {
  if (auto* s = std::get_if<SvdFactors>(&factors_)) return s->sigma;
  if (auto* c = std::get_if<CpFactors>(&factors_)) return c->lambda;
  throw LinalgError("ElasticLayer: not a dense layer");
}
const Matrix& ElasticLayer::v() const {
  if (auto* s = std::get_if<SvdFactors>(&factors_)) return s->v;
  if (auto* c = std::get_if<CpFactors>(&factors_)) return c->a2;
  throw LinalgError("ElasticLayer: not a dense layer");
}
Matrix& ElasticLayer::mutable_u() { return const_cast<Matrix&>(std::as_const(*this).u()); }
Vector& ElasticLayer::mutable_sigma() { return const_cast<Vector&>(std::as_const(*this).sigma()); }
Matrix& ElasticLayer::mutable_v() { return const_cast<Matrix&>(std::as_const(*this).v()); }

const Tucker2Factors& ElasticLayer::tucker() const {
  if (auto* t = std::get_if<Tucker2Factors>(&factors_)) return *t;
  throw LinalgError("ElasticLayer: not a conv layer");
}
Tucker2Factors& ElasticLayer::mutable_tucker() {
  return const_cast<Tucker2Factors&>(std::as_const(*this).tucker());
}

std::pair<std::size_t, std::size_t> ElasticLayer::conv_ranks(std::size_t k) const {
  check_rank(k);
  const std::size_t co = out_dim(), ci = in_dim();
  return {(k * co + k_max_ - 1) / k_max_, (k * ci + k_max_ - 1) / k_max_};
}

void ElasticLayer::check_rank(std::size_t k) const {
  if (k < k_min_ || k > k_max_) throw LinalgError("rank out of range");
}

namespace {

Matrix quantized_or_copy(const Matrix& m, int bits, std::optional<QuantizedFactor>& slot) {
  if (bits <= 0) return m;
  const QuantSpec spec = calibrate_scale(m, {.bits = bits});
  slot = quantize(m, spec);
  return dequantize(*slot);
}

Tensor4 core_block(const Tensor4& core, std::size_t r_o, std::size_t r_i) {
  Tensor4 out(r_o, r_i, core.h(), core.w());
  for (std::size_t o = 0; o < r_o; ++o)
    for (std::size_t i = 0; i < r_i; ++i)
      for (std::size_t y = 0; y < core.h(); ++y)
        for (std::size_t x = 0; x < core.w(); ++x) out(o, i, y, x) = core(o, i, y, x);
  return out;
}

}  // namespace

LayerOp materialize(const ElasticLayer& layer, std::size_t k, const FactorBits& bits) {
  layer.check_rank(k);
  LayerOp op;
  op.kind = layer.kind();
  op.k = k;
  op.bits = bits;
  op.bias = layer.bias();
  if (layer.is_conv()) {
    const auto [r_o, r_i] = layer.conv_ranks(k);
    const Tucker2Factors& t = layer.tucker();
    op.u = quantized_or_copy(t.u_out.leading_cols(r_o), bits.u, op.qu);
    const Tensor4 block = core_block(t.core, r_o, r_i);
    op.core = Tensor4::fold_out(quantized_or_copy(block.unfold_out(), bits.core, op.qcore), r_i,
                                block.h(), block.w());
    op.v = quantized_or_copy(t.u_in.leading_cols(r_i), bits.v, op.qv);
  } else {
    op.u = quantized_or_copy(layer.u().leading_cols(k), bits.u, op.qu);
    const Matrix s(1, k, Vector(layer.sigma().begin(), layer.sigma().begin() + k));
    op.sigma = quantized_or_copy(s, bits.core, op.qcore).storage();
    op.v = quantized_or_copy(layer.v().leading_cols(k), bits.v, op.qv);
  }
  return op;
}

Matrix LayerOp::dense_weight() const {
  Matrix us = u;
  for (std::size_t i = 0; i < us.rows(); ++i)
    for (std::size_t j = 0; j < us.cols(); ++j) us(i, j) *= sigma[j];
  return matmul_nt(us, v);
}

Tensor4 LayerOp::conv_weight() const {
  return core.mode_out_product(u).mode_in_product(v);
}

Matrix truncate_dense(const ElasticLayer& layer, std::size_t k) {
  return materialize(layer, k).dense_weight();
}

Tensor4 truncate_conv(const ElasticLayer& layer, std::size_t k) {
  return materialize(layer, k).conv_weight();
}

double conv_operator_bound(const Tensor4& k) {
  return std::sqrt(static_cast<double>(k.h() * k.w())) * spectral_norm_exact(k.unfold_out());
}

double residual_norm(const ElasticLayer& layer, std::size_t k, const FactorBits& bits) {
  layer.check_rank(k);
  if (layer.is_conv()) {
    return conv_operator_bound(truncate_conv(layer, layer.k_max()) -
                               materialize(layer, k, bits).conv_weight());
  }
  if (layer.kind() == LayerKind::DenseSvd && !bits.quantized())
    return k < layer.k_max() ? layer.sigma()[k] : 0.0;
  return spectral_norm_exact(truncate_dense(layer, layer.k_max()) -
                             materialize(layer, k, bits).dense_weight());
}

Vector hard_mask(std::size_t k_max, std::size_t k) {
  Vector m(k_max, 0.0);
  for (std::size_t i = 0; i < std::min(k, k_max); ++i) m[i] = 1.0;
  return m;
}

Vector soft_mask(std::span<const double> logits, std::span<const double> gumbel_noise,
                 std::size_t k_target, double tau) {
  if (!(tau > 0.0)) throw LinalgError("soft_mask: temperature must be positive");
  const std::size_t n = logits.size();
  if (gumbel_noise.size() != n) throw LinalgError("soft_mask: noise length mismatch");
  if (k_target < 1 || k_target > n) throw LinalgError("soft_mask: k_target out of range");
  if (k_target == n) return Vector(n, 1.0);
  Vector g(n);
  for (std::size_t i = 0; i < n; ++i) g[i] = logits[i] + gumbel_noise[i];
  Vector sorted = g;
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  const double thr = 0.5 * (sorted[k_target - 1] + sorted[k_target]);
  Vector m(n);
  for (std::size_t i = 0; i < n; ++i) m[i] = 1.0 / (1.0 + std::exp(-(g[i] - thr) / tau));
  return m;
}

double anneal_temperature(std::size_t t, std::size_t horizon, double tau0, double tau_min,
                          double alpha) {
  if (horizon == 0) throw LinalgError("anneal_temperature: horizon must be positive");
  const double e = static_cast<double>(t) / static_cast<double>(horizon);
  return std::max(tau_min, tau0 * std::pow(alpha, e));
}

}  // namespace ecomp
