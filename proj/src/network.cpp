#include "ecomp/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <map>
#include <stdexcept>

#include "ecomp/autodiff.hpp"

namespace ecomp {

std::string profile_key(const Profile& p) {
  std::string s;
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    const LayerChoice& c = p.layers[i];
    if (i) s += '|';
    s += std::to_string(c.k) + ':' + std::to_string(c.bits.u) + '.' + std::to_string(c.bits.core) +
         '.' + std::to_string(c.bits.v);
  }
  return s;
}

Profile parse_profile_key(const std::string& key, std::string id) {
  Profile p;
  p.id = std::move(id);
  std::size_t pos = 0;
  while (pos <= key.size()) {
    const std::size_t bar = std::min(key.find('|', pos), key.size());
    const std::string part = key.substr(pos, bar - pos);
    unsigned long k = 0;
    int u = 0, c = 0, v = 0, used = 0;
    if (std::sscanf(part.c_str(), "%lu:%d.%d.%d%n", &k, &u, &c, &v, &used) != 4 ||
        used != static_cast<int>(part.size()) || k == 0 || u < 0 || c < 0 || v < 0)
      throw std::invalid_argument("malformed profile key: " + key);
    p.layers.push_back({static_cast<std::size_t>(k), {u, c, v}});
    pos = bar + 1;
  }
  return p;
}

const char* to_string(Activation a) {
  switch (a) {
    case Activation::Identity: return "identity";
    case Activation::Relu: return "relu";
    case Activation::Gelu: return "gelu";
  }
  return "?";
}

Activation activation_from_string(const std::string& s) {
  if (s == "identity") return Activation::Identity;
  if (s == "relu") return Activation::Relu;
  if (s == "gelu") return Activation::Gelu;
  throw LinalgError("unknown activation: " + s);
}

double activation_lipschitz(Activation a) { return a == Activation::Gelu ? 1.1290 : 1.0; }

double activate(Activation a, double x) {
  switch (a) {
    case Activation::Identity: return x;
    case Activation::Relu: return x > 0.0 ? x : 0.0;
    case Activation::Gelu: return gelu_value(x);
  }
  return x;
}

double activation_derivative(Activation a, double x) {
  switch (a) {
    case Activation::Identity: return 1.0;
    case Activation::Relu: return x > 0.0 ? 1.0 : 0.0;
    case Activation::Gelu: return gelu_derivative(x);
  }
  return 1.0;
}

std::size_t Network::block_in_dim(std::size_t l) const {
  const ElasticLayer& L = blocks.at(l).layer;
  return L.is_conv() ? L.in_dim() * spatial() : L.in_dim();
}

std::size_t Network::block_out_dim(std::size_t l) const {
  const ElasticLayer& L = blocks.at(l).layer;
  return L.is_conv() ? L.out_dim() * spatial() : L.out_dim();
}

std::size_t Network::input_dim() const {
  if (blocks.empty()) throw LinalgError("network: no blocks");
  return block_in_dim(0);
}

std::size_t Network::output_dim() const {
  if (blocks.empty()) throw LinalgError("network: no blocks");
  return block_out_dim(blocks.size() - 1);
}

void Network::validate() const {
  if (blocks.empty()) throw LinalgError("network: no blocks");
  if (height == 0 || width == 0) throw LinalgError("network: empty spatial grid");
  std::map<std::string, std::pair<std::size_t, std::size_t>> groups;
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const Block& b = blocks[l];
    if (l > 0 && block_in_dim(l) != block_out_dim(l - 1))
      throw LinalgError("network: shape mismatch entering block " + std::to_string(l));
    if (b.residual && block_in_dim(l) != block_out_dim(l))
      throw LinalgError("network: residual block " + std::to_string(l) + " changes width");
    if (b.norm) {
      const std::size_t units = b.layer.out_dim();
      if (b.norm->gamma.size() != units || b.norm->beta.size() != units)
        throw LinalgError("network: norm size mismatch in block " + std::to_string(l));
    }
    if (const auto& g = b.layer.group_id()) {
      const auto range = std::make_pair(b.layer.k_min(), b.layer.k_max());
      auto [it, fresh] = groups.emplace(*g, range);
      if (!fresh && it->second != range)
        throw LinalgError("network: tied group " + *g + " has inconsistent rank ranges");
    }
  }
}

Profile full_profile(const Network& net) {
  Profile p;
  p.id = "full";
  for (const Block& b : net.blocks) p.layers.push_back({b.layer.k_max(), {}});
  return p;
}

void validate_profile(const Network& net, const Profile& p) {
  if (p.layers.size() != net.blocks.size())
    throw LinalgError("profile: layer count does not match the network");
  std::map<std::string, std::size_t> group_k;
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const ElasticLayer& L = net.blocks[l].layer;
    const LayerChoice& c = p.layers[l];
    L.check_rank(c.k);
    for (int q : {c.bits.u, c.bits.core, c.bits.v})
      if (q != 0 && (q < 2 || q > 31)) throw LinalgError("profile: bit-width out of range");
    if (const auto& g = L.group_id()) {
      auto [it, fresh] = group_k.emplace(*g, c.k);
      if (!fresh && it->second != c.k)
        throw LinalgError("profile: tied group " + *g + " receives unequal ranks");
    }
  }
}

CompiledNetwork compile(const Network& net, const Profile& p) {
  validate_profile(net, p);
  CompiledNetwork out;
  out.height = net.height;
  out.width = net.width;
  for (std::size_t l = 0; l < net.blocks.size(); ++l) {
    const Block& b = net.blocks[l];
    CompiledBlock cb;
    cb.op = materialize(b.layer, p.layers[l].k, p.layers[l].bits);
    cb.act = b.act;
    cb.norm = b.norm;
    cb.residual = b.residual;
    cb.kh = b.layer.kernel_h();
    cb.kw = b.layer.kernel_w();
    out.blocks.push_back(std::move(cb));
  }
  return out;
}

CompiledNetwork compile_full(const Network& net) { return compile(net, full_profile(net)); }

namespace {

bool is_conv(const CompiledBlock& b) { return b.op.kind == LayerKind::ConvTucker2; }

std::size_t units_per_element(const CompiledBlock& b, std::size_t hw) { return is_conv(b) ? hw : 1; }

}  // namespace

Vector linear_apply(const CompiledBlock& b, std::span<const double> a, std::size_t height,
                    std::size_t width, std::uint64_t* flops) {
  const LayerOp& op = b.op;
  Vector z;
  if (is_conv(b)) {
    const std::size_t c_in = op.v.rows(), r_i = op.v.cols(), r_o = op.u.cols();
    const Vector t1 = conv2d_same(a, op.v.transpose(), c_in, height, width, 1, 1, flops);
    const Vector t2 = conv2d_same(t1, op.core.unfold_out(), r_i, height, width, op.core.h(),
                                  op.core.w(), flops);
    z = conv2d_same(t2, op.u, r_o, height, width, 1, 1, flops);
    if (op.bias) {
      const std::size_t hw = height * width;
      for (std::size_t i = 0; i < z.size(); ++i) z[i] += (*op.bias)[i / hw];
    }
  } else {
    if (a.size() != op.v.rows()) throw LinalgError("linear_apply: input dimension mismatch");
    Vector t = matvec_t(op.v, a);
    for (std::size_t j = 0; j < t.size(); ++j) t[j] *= op.sigma[j];
    z = matvec(op.u, t);
    if (flops) *flops += 2ull * op.v.rows() * op.k + op.k + 2ull * op.u.rows() * op.k;
    if (op.bias)
      for (std::size_t i = 0; i < z.size(); ++i) z[i] += (*op.bias)[i];
  }
  return z;
}

Vector linear_adjoint(const CompiledBlock& b, std::span<const double> y, std::size_t height,
                      std::size_t width) {
  const LayerOp& op = b.op;
  if (is_conv(b)) {
    const std::size_t c_in = op.v.rows(), r_i = op.v.cols(), r_o = op.u.cols();
    const Vector t2 = conv2d_same_adjoint(y, op.u, r_o, height, width, 1, 1);
    const Vector t1 = conv2d_same_adjoint(t2, op.core.unfold_out(), r_i, height, width,
                                          op.core.h(), op.core.w());
    return conv2d_same_adjoint(t1, op.v.transpose(), c_in, height, width, 1, 1);
  }
  Vector t = matvec_t(op.u, y);
  for (std::size_t j = 0; j < t.size(); ++j) t[j] *= op.sigma[j];
  return matvec(op.v, t);
}

ForwardTrace forward(const CompiledNetwork& net, std::span<const double> x, std::uint64_t* flops) {
  require_finite(x, "network input");
  ForwardTrace tr;
  Vector a(x.begin(), x.end());
  const std::size_t hw = net.height * net.width;
  for (const CompiledBlock& b : net.blocks) {
    tr.inputs.push_back(a);
    Vector h = linear_apply(b, a, net.height, net.width, flops);
    if (b.norm) {
      const std::size_t per = units_per_element(b, hw);
      for (std::size_t i = 0; i < h.size(); ++i)
        h[i] = b.norm->gamma[i / per] * h[i] + b.norm->beta[i / per];
    }
    Vector out(h.size());
    for (std::size_t i = 0; i < h.size(); ++i) out[i] = activate(b.act, h[i]);
    if (b.residual) {
      if (a.size() != out.size()) throw LinalgError("forward: residual width mismatch");
      for (std::size_t i = 0; i < out.size(); ++i) out[i] += a[i];
    }
    tr.preacts.push_back(std::move(h));
    tr.outputs.push_back(out);
    a = std::move(out);
  }
  tr.logits = a;
  return tr;
}

ForwardTrace forward(const Network& net, std::span<const double> x, const Profile& p) {
  if (x.size() != net.input_dim()) throw LinalgError("forward: input dimension mismatch");
  return forward(compile(net, p), x);
}

ForwardTrace forward_full(const Network& net, std::span<const double> x) {
  return forward(net, x, full_profile(net));
}

double logit_drift(const CompiledNetwork& full, const CompiledNetwork& compressed,
                   std::span<const double> x) {
  const Vector a = forward(full, x).logits;
  const Vector b = forward(compressed, x).logits;
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

double logit_drift(const Network& net, std::span<const double> x, const Profile& p) {
  if (x.size() != net.input_dim()) throw LinalgError("logit_drift: input dimension mismatch");
  return logit_drift(compile_full(net), compile(net, p), x);
}

double entry_gain(const CompiledBlock& b) {
  double g = 1.0;
  if (b.norm) {
    g = 0.0;
    for (double x : b.norm->gamma) g = std::max(g, std::abs(x));
  }
  return activation_lipschitz(b.act) * g;
}

double block_gain(const CompiledBlock& b) {
  double op_norm;
  if (is_conv(b)) {
    Matrix k = b.op.conv_weight().unfold_out();
    if (b.norm)
      for (std::size_t i = 0; i < k.rows(); ++i)
        for (std::size_t j = 0; j < k.cols(); ++j) k(i, j) *= b.norm->gamma[i];
    op_norm = std::sqrt(static_cast<double>(b.kh * b.kw)) * spectral_norm_exact(k);
  } else {
    Matrix w = b.op.dense_weight();
    if (b.norm)
      for (std::size_t i = 0; i < w.rows(); ++i)
        for (std::size_t j = 0; j < w.cols(); ++j) w(i, j) *= b.norm->gamma[i];
    op_norm = spectral_norm_exact(w);
  }
  const double g = activation_lipschitz(b.act) * op_norm;
  return b.residual ? 1.0 + g : g;
}

double exact_postlayer_lipschitz(const Network& net, std::size_t l,
                                 const std::vector<Profile>& tail_profiles) {
  if (l >= net.blocks.size()) throw LinalgError("exact_postlayer_lipschitz: bad layer index");
  std::vector<CompiledNetwork> views = {compile_full(net)};
  for (const Profile& p : tail_profiles) views.push_back(compile(net, p));
  double bound = entry_gain(views[0].blocks[l]);
  for (std::size_t j = l + 1; j < net.blocks.size(); ++j) {
    double g = 0.0;
    for (const CompiledNetwork& v : views) g = std::max(g, block_gain(v.blocks[j]));
    bound *= g;
  }
  return bound;
}

namespace {

double gamma_at(const CompiledBlock& b, std::size_t i, std::size_t hw) {
  return b.norm ? b.norm->gamma[i / units_per_element(b, hw)] : 1.0;
}

}  // namespace

Vector tail_jvp(const CompiledNetwork& net, const ForwardTrace& trace, std::size_t l,
                std::span<const double> dz) {
  const std::size_t hw = net.height * net.width;
  const CompiledBlock& bl = net.blocks.at(l);
  Vector da(dz.size());
  for (std::size_t i = 0; i < dz.size(); ++i)
    da[i] = activation_derivative(bl.act, trace.preacts[l][i]) * gamma_at(bl, i, hw) * dz[i];
  for (std::size_t j = l + 1; j < net.blocks.size(); ++j) {
    const CompiledBlock& b = net.blocks[j];
    CompiledBlock lin = b;
    lin.op.bias.reset();
    const Vector z = linear_apply(lin, da, net.height, net.width);
    Vector next(z.size());
    for (std::size_t i = 0; i < z.size(); ++i)
      next[i] = activation_derivative(b.act, trace.preacts[j][i]) * gamma_at(b, i, hw) * z[i];
    if (b.residual)
      for (std::size_t i = 0; i < next.size(); ++i) next[i] += da[i];
    da = std::move(next);
  }
  return da;
}

Vector tail_vjp(const CompiledNetwork& net, const ForwardTrace& trace, std::size_t l,
                std::span<const double> dlogits) {
  const std::size_t hw = net.height * net.width;
  Vector g(dlogits.begin(), dlogits.end());
  for (std::size_t j = net.blocks.size(); j-- > l + 1;) {
    const CompiledBlock& b = net.blocks[j];
    Vector gz(g.size());
    for (std::size_t i = 0; i < g.size(); ++i)
      gz[i] = activation_derivative(b.act, trace.preacts[j][i]) * gamma_at(b, i, hw) * g[i];
    Vector prev = linear_adjoint(b, gz, net.height, net.width);
    if (b.residual)
      for (std::size_t i = 0; i < prev.size(); ++i) prev[i] += g[i];
    g = std::move(prev);
  }
  const CompiledBlock& bl = net.blocks.at(l);
  for (std::size_t i = 0; i < g.size(); ++i)
    g[i] *= activation_derivative(bl.act, trace.preacts[l][i]) * gamma_at(bl, i, hw);
  return g;
}

namespace {

struct Fnv {
  std::uint64_t h = 1469598103934665603ull;
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= c[i];
      h *= 1099511628211ull;
    }
  }
  void u64(std::uint64_t v) { bytes(&v, sizeof v); }
  void reals(std::span<const double> v) {
    u64(v.size());
    bytes(v.data(), v.size() * sizeof(double));
  }
  void matrix(const Matrix& m) {
    u64(m.rows());
    u64(m.cols());
    reals(m.data());
  }
};

}  // namespace

std::uint64_t fingerprint(const Network& net) {
  Fnv f;
  f.u64(net.height);
  f.u64(net.width);
  f.u64(net.blocks.size());
  for (const Block& b : net.blocks) {
    const ElasticLayer& L = b.layer;
    f.u64(static_cast<std::uint64_t>(L.kind()));
    f.u64(L.k_min());
    f.u64(L.k_max());
    if (L.is_conv()) {
      const Tucker2Factors& t = L.tucker();
      f.matrix(t.u_out);
      f.u64(t.core.h());
      f.u64(t.core.w());
      f.reals(t.core.data());
      f.matrix(t.u_in);
    } else {
      f.matrix(L.u());
      f.reals(L.sigma());
      f.matrix(L.v());
    }
    f.u64(L.bias().has_value());
    if (L.bias()) f.reals(*L.bias());
    f.u64(static_cast<std::uint64_t>(b.act));
    f.u64(b.residual);
    f.u64(b.norm.has_value());
    if (b.norm) {
      f.reals(b.norm->gamma);
      f.reals(b.norm->beta);
    }
  }
  return f.h;
}

}  // namespace ecomp
