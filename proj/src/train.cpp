#include "ecomp/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "ecomp/autodiff.hpp"
#include "ecomp/synth.hpp"

namespace ecomp {

using nlohmann::json;

namespace {

constexpr double kRefTop = 127.0;  // 8-bit reference grid

double top_of(int bits) { return static_cast<double>((1 << (bits - 1)) - 1); }

// log of the factor that maps the 8-bit reference scale to `bits`.
double scale_shift(int bits) { return std::log(kRefTop / top_of(bits)); }

double init_log_scale(const Matrix& t) {
  const double m = max_abs(t.data());
  return m > 0.0 ? std::log(m / kRefTop) : 0.0;
}

Matrix row_matrix(const Vector& v) { return Matrix(1, v.size(), v); }

std::vector<Matrix*> param_list(TrainModel& m) {
  std::vector<Matrix*> out;
  for (LayerParams& p : m.layers)
    for (Matrix* x : {&p.u, &p.sigma, &p.v, &p.bias, &p.log_su, &p.log_sc, &p.log_sv, &p.mask_logits})
      out.push_back(x);
  return out;
}

std::vector<const Matrix*> param_list(const TrainModel& m) {
  std::vector<const Matrix*> out;
  for (const LayerParams& p : m.layers)
    for (const Matrix* x : {&p.u, &p.sigma, &p.v, &p.bias, &p.log_su, &p.log_sc, &p.log_sv, &p.mask_logits})
      out.push_back(x);
  return out;
}

Matrix zeros_like(const Matrix& m) { return Matrix(m.rows(), m.cols()); }

void init_scales_and_mask(LayerParams& p, double spacing) {
  p.log_su = Matrix(1, 1, init_log_scale(p.u));
  p.log_sc = Matrix(1, 1, init_log_scale(p.sigma));
  p.log_sv = Matrix(1, 1, init_log_scale(p.v));
  p.mask_logits = Matrix(1, p.sigma.cols());
  for (std::size_t i = 0; i < p.sigma.cols(); ++i) p.mask_logits(0, i) = -spacing * static_cast<double>(i);
}

void fill_from_svd(LayerParams& p, const Matrix& w) {
  const SvdFactors f = svd_full(w);
  p.u = f.u;
  p.sigma = row_matrix(f.sigma);
  p.v = f.v;
}

struct LayerIds {
  Tape::Id u, sigma, v, bias, lsu, lsc, lsv, logits;
};

Tape::Id quantized(Tape& tp, Tape::Id t, Tape::Id log_s, int bits, const Matrix* frozen_t,
                   const Matrix* frozen_ls) {
  if (bits <= 0) return t;
  const Tape::Id ls = tp.add_scalar(log_s, scale_shift(bits));
  std::optional<Tape::FrozenRounding> fr;
  if (frozen_t) fr = Tape::FrozenRounding{*frozen_t, std::exp((*frozen_ls)(0, 0) + scale_shift(bits))};
  return tp.fake_quant(t, ls, bits, fr);
}

Tape::Id apply_act(Tape& tp, Tape::Id z, Activation a) {
  switch (a) {
    case Activation::Relu: return tp.relu(z);
    case Activation::Gelu: return tp.gelu(z);
    case Activation::Identity: return z;
  }
  return z;
}

Tape::Id run_forward(Tape& tp, Tape::Id x, const std::vector<Tape::Id>& weights,
                     const std::vector<LayerIds>& ids, const std::vector<Activation>& acts) {
  Tape::Id a = x;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    const Tape::Id z = tp.shift_channels(tp.matmul_nt(a, weights[l]), ids[l].bias, 1);
    a = apply_act(tp, z, acts[l]);
  }
  return a;
}

json matrix_json(const Matrix& m) {
  return json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", m.storage()}};
}

double json_double(const json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

Matrix matrix_from_json(const json& j) {
  const std::size_t r = j.at("rows").get<std::size_t>(), c = j.at("cols").get<std::size_t>();
  std::vector<double> d;
  for (const json& x : j.at("data")) d.push_back(json_double(x));
  if (d.size() != r * c) throw TrainError("checkpoint: matrix size mismatch");
  return Matrix(r, c, std::move(d));
}

const char* optimizer_name(OptimizerKind k) { return k == OptimizerKind::Sgd ? "sgd" : "adamw"; }

OptimizerKind optimizer_from_name(const std::string& s) {
  if (s == "sgd") return OptimizerKind::Sgd;
  if (s == "adamw") return OptimizerKind::AdamW;
  throw TrainError("unknown optimizer: " + s);
}

json config_to_json(const TrainConfig& c) {
  const LossWeights& w = c.weights;
  return json{
      {"widths", c.widths},
      {"hidden", to_string(c.hidden)},
      {"train_n", c.train_n}, {"eval_n", c.eval_n}, {"calib_n", c.calib_n},
      {"data_seed", c.data_seed}, {"modes", c.modes},
      {"centre_scale", c.centre_scale}, {"spread", c.spread},
      {"steps", c.steps}, {"batch", c.batch},
      {"optimizer", optimizer_name(c.optimizer)},
      {"lr", c.lr}, {"momentum", c.momentum}, {"weight_decay", c.weight_decay}, {"grad_clip", c.grad_clip},
      {"adam_beta1", c.adam_beta1}, {"adam_beta2", c.adam_beta2},
      {"weights", {{"sd", w.sd}, {"aug", w.aug}, {"cert", w.cert}, {"budget", w.budget},
                   {"iso", w.iso}, {"epsilon", w.epsilon}, {"warmup_frac", w.warmup_frac}}},
      {"aug_sigma", c.aug_sigma}, {"anneal_frac", c.anneal_frac},
      {"tau0", c.tau0}, {"tau_min", c.tau_min},
      {"curriculum", c.curriculum},
      {"refresh_every", c.refresh_every}, {"resvd_every", c.resvd_every}, {"log_every", c.log_every},
      {"power_steps", c.power_steps}, {"ema_decay", c.ema_decay},
      {"bitmap", {{"a", c.bitmap.a}, {"b", c.bitmap.b}, {"q_max", c.bitmap.q_max},
                  {"off_u", c.bitmap.off_u}, {"off_core", c.bitmap.off_core}, {"off_v", c.bitmap.off_v}}},
      {"profile_fracs", c.profile_fracs},
      {"device_seed", c.device_seed}, {"mask_spacing", c.mask_spacing},
      {"divergence_factor", c.divergence_factor}, {"divergence_window", c.divergence_window},
  };
}

TrainConfig config_from_json(const json& j) {
  TrainConfig c;
  c.widths = j.at("widths").get<std::vector<std::size_t>>();
  c.hidden = activation_from_string(j.at("hidden").get<std::string>());
  c.train_n = j.at("train_n"); c.eval_n = j.at("eval_n"); c.calib_n = j.at("calib_n");
  c.data_seed = j.at("data_seed"); c.modes = j.at("modes");
  c.centre_scale = j.at("centre_scale"); c.spread = j.at("spread");
  c.steps = j.at("steps"); c.batch = j.at("batch");
  c.optimizer = optimizer_from_name(j.at("optimizer").get<std::string>());
  c.lr = j.at("lr"); c.momentum = j.at("momentum"); c.weight_decay = j.at("weight_decay");
  c.grad_clip = j.at("grad_clip");
  c.adam_beta1 = j.at("adam_beta1"); c.adam_beta2 = j.at("adam_beta2");
  const json& w = j.at("weights");
  c.weights.sd = w.at("sd"); c.weights.aug = w.at("aug"); c.weights.cert = w.at("cert");
  c.weights.budget = w.at("budget"); c.weights.iso = w.at("iso");
  c.weights.epsilon = w.at("epsilon"); c.weights.warmup_frac = w.at("warmup_frac");
  c.aug_sigma = j.at("aug_sigma"); c.anneal_frac = j.at("anneal_frac");
  c.tau0 = j.at("tau0"); c.tau_min = j.at("tau_min");
  c.curriculum = j.at("curriculum").get<Vector>();
  c.refresh_every = j.at("refresh_every"); c.resvd_every = j.at("resvd_every");
  c.log_every = j.at("log_every");
  c.power_steps = j.at("power_steps"); c.ema_decay = j.at("ema_decay");
  const json& b = j.at("bitmap");
  c.bitmap.a = b.at("a"); c.bitmap.b = b.at("b"); c.bitmap.q_max = b.at("q_max");
  c.bitmap.off_u = b.at("off_u"); c.bitmap.off_core = b.at("off_core"); c.bitmap.off_v = b.at("off_v");
  c.profile_fracs = j.at("profile_fracs").get<Vector>();
  c.device_seed = j.at("device_seed"); c.mask_spacing = j.at("mask_spacing");
  c.divergence_factor = j.at("divergence_factor"); c.divergence_window = j.at("divergence_window");
  return c;
}

bool same_kind(const json& a, const json& b) {
  if (a.is_number() && b.is_number()) return !(a.is_number_integer() && b.is_number_float());
  return a.type() == b.type();
}

// Overlays `patch` on `base`, rejecting unknown keys and type changes.
void overlay(json& base, const json& patch, const std::string& path) {
  if (!patch.is_object()) throw TrainError("config: " + (path.empty() ? "root" : path) + " must be an object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw TrainError("config: unknown key " + key);
    json& slot = base[it.key()];
    if (slot.is_object()) {
      overlay(slot, it.value(), key);
    } else {
      if (!same_kind(slot, it.value())) throw TrainError("config: wrong type for " + key);
      if (slot.is_number_unsigned() && it.value().is_number_integer() && it.value().get<long long>() < 0)
        throw TrainError("config: negative value for " + key);
      slot = it.value();
    }
  }
}

void validate_config(const TrainConfig& c) {
  if (c.widths.size() < 2) throw TrainError("config: need at least two widths");
  for (std::size_t w : c.widths)
    if (w == 0) throw TrainError("config: zero width");
  if (c.steps == 0 || c.batch == 0) throw TrainError("config: steps and batch must be positive");
  if (c.train_n == 0 || c.eval_n == 0 || c.calib_n == 0 || c.calib_n > c.train_n)
    throw TrainError("config: bad data sizes");
  if (c.curriculum.size() != 3) throw TrainError("config: curriculum needs three fractions");
  if (c.profile_fracs.size() != 3) throw TrainError("config: profile_fracs needs three entries");
  if (c.refresh_every == 0 || c.resvd_every == 0 || c.log_every == 0)
    throw TrainError("config: intervals must be positive");
  if (!(c.lr > 0.0) || !(c.tau_min > 0.0) || !(c.tau0 >= c.tau_min) || !(c.anneal_frac > 0.0))
    throw TrainError("config: bad optimizer or temperature settings");
  if (!(c.ema_decay > 0.0 && c.ema_decay < 1.0)) throw TrainError("config: ema_decay must be in (0, 1)");
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string rank_text(const Profile& p) {
  std::string s;
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    if (l) s += '/';
    s += std::to_string(p.layers[l].k);
  }
  return s;
}

Vector gumbel_row(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Vector g(n);
  for (double& x : g) {
    double v = u(rng);
    while (v <= 0.0) v = u(rng);
    x = -std::log(-std::log(v));
  }
  return g;
}

double layer_latency(const CostModel& m, const Network& net, std::size_t l, const LayerChoice& c) {
  const LayerCost lc = layer_cost(net, l, c);
  return m.comp[l] * static_cast<double>(lc.flops) + m.mem[l] * static_cast<double>(lc.bytes());
}

double profile_latency(const CostModel& m, const Network& net, const Profile& p) {
  double t = m.alpha0;
  for (std::size_t l = 0; l < p.layers.size(); ++l) t += layer_latency(m, net, l, p.layers[l]);
  return t;
}

BudgetRelax relax_budget(const CostModel& m, const Network& net, const Profile& p, double target) {
  BudgetRelax r;
  r.base = m.alpha0;
  r.target = target;
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const ElasticLayer& L = net.blocks[l].layer;
    LayerChoice lo = p.layers[l], hi = p.layers[l];
    lo.k = L.k_min();
    hi.k = L.k_max();
    const double a = layer_latency(m, net, l, lo), b = layer_latency(m, net, l, hi);
    const double slope = L.k_max() > L.k_min() ? (b - a) / static_cast<double>(L.k_max() - L.k_min()) : 0.0;
    r.slope.push_back(slope);
    r.offset.push_back(a - slope * static_cast<double>(L.k_min()));
  }
  return r;
}

Matrix gather_rows(const Matrix& x, const std::vector<std::size_t>& idx) {
  Matrix out(idx.size(), x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) = x(idx[i], j);
  return out;
}

ToyData slice(const ToyData& d, std::size_t begin, std::size_t end) {
  ToyData out;
  out.x = Matrix(end - begin, d.x.cols());
  for (std::size_t i = begin; i < end; ++i) {
    for (std::size_t j = 0; j < d.x.cols(); ++j) out.x(i - begin, j) = d.x(i, j);
    out.y.push_back(d.y[i]);
  }
  return out;
}

std::size_t argmax(const Vector& v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

std::vector<Vector> ToyData::rows(std::size_t begin, std::size_t end) const {
  std::vector<Vector> out;
  for (std::size_t i = begin; i < std::min(end, size()); ++i) out.push_back(x.row(i));
  return out;
}

ToyData make_toy_data(std::size_t n, std::size_t dim, std::uint64_t seed, std::size_t modes,
                      double centre_scale, double spread) {
  if (dim == 0 || modes == 0) throw TrainError("toy data: dim and modes must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  // Centre c belongs to class c % 2.
  Matrix centres(2 * modes, dim);
  for (double& x : centres.data()) x = centre_scale * normal(rng);
  ToyData d;
  d.x = Matrix(n, dim);
  std::uniform_int_distribution<std::size_t> pick(0, 2 * modes - 1);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = pick(rng);
    for (std::size_t j = 0; j < dim; ++j) d.x(i, j) = centres(c, j) + spread * normal(rng);
    d.y.push_back(c % 2);
  }
  return d;
}

double RankSampler::gamma(std::size_t t) const {
  if (horizon == 0) return 0.0;
  return std::max(0.0, 1.0 - static_cast<double>(t) / static_cast<double>(horizon));
}

double RankSampler::probability(std::size_t k, std::size_t t) const {
  if (k < k_min || k > k_max) return 0.0;
  const double g = gamma(t);
  const double uni = 1.0 / static_cast<double>(k_max - k_min + 1);
  const double hits = static_cast<double>(std::count(profile_ranks.begin(), profile_ranks.end(), k));
  const double prof = profile_ranks.empty() ? uni : hits / static_cast<double>(profile_ranks.size());
  return g * uni + (1.0 - g) * prof;
}

std::size_t RankSampler::sample(std::size_t t, std::mt19937_64& rng) const {
  if (k_min > k_max || k_min == 0) throw TrainError("rank sampler: bad range");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const bool uniform = profile_ranks.empty() || u(rng) < gamma(t);
  if (uniform) return std::uniform_int_distribution<std::size_t>(k_min, k_max)(rng);
  return profile_ranks[std::uniform_int_distribution<std::size_t>(0, profile_ranks.size() - 1)(rng)];
}

double lambda_warmup(double base, std::size_t t, std::size_t warmup_steps) {
  if (warmup_steps == 0 || t >= warmup_steps) return base;
  return base * static_cast<double>(t) / static_cast<double>(warmup_steps);
}

std::size_t TrainModel::parameter_count() const {
  std::size_t n = 0;
  for (const Matrix* m : param_list(*this)) n += m->size();
  return n;
}

Matrix effective_weight(const LayerParams& p) {
  Matrix us = p.u;
  for (std::size_t i = 0; i < us.rows(); ++i)
    for (std::size_t j = 0; j < us.cols(); ++j) us(i, j) *= p.sigma(0, j);
  return matmul_nt(us, p.v);
}

Network to_network(const TrainModel& m) {
  Network net;
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    Block b;
    b.layer = ElasticLayer::dense(effective_weight(m.layers[l]));
    b.layer.set_bias(m.layers[l].bias.storage());
    b.act = m.acts[l];
    b.name = "fc" + std::to_string(l);
    net.blocks.push_back(std::move(b));
  }
  net.validate();
  return net;
}

void reorthogonalize(TrainModel& m) {
  for (LayerParams& p : m.layers) {
    const double spacing = p.mask_logits.cols() > 1 ? p.mask_logits(0, 0) - p.mask_logits(0, 1) : 0.0;
    fill_from_svd(p, effective_weight(p));
    init_scales_and_mask(p, spacing);
  }
}

TrainModel model_from_network(const Network& net) {
  TrainModel m;
  for (const Block& b : net.blocks) {
    if (b.layer.kind() != LayerKind::DenseSvd || b.norm || b.residual)
      throw TrainError("training supports plain dense SVD blocks");
    LayerParams p;
    p.u = b.layer.u();
    p.sigma = row_matrix(b.layer.sigma());
    p.v = b.layer.v();
    p.bias = b.layer.bias() ? row_matrix(*b.layer.bias()) : Matrix(1, b.layer.out_dim());
    init_scales_and_mask(p, 3.0);
    m.layers.push_back(std::move(p));
    m.acts.push_back(b.act);
  }
  return m;
}

LossTerms total_loss(const TrainModel& model, const LossInputs& in, TrainModel* grads) {
  const std::size_t L = model.layers.size();
  if (!in.x || !in.y) throw TrainError("loss: missing batch");
  if (in.profile.layers.size() != L || in.mask_noise.size() != L || in.lhat.size() != L ||
      in.alpha.size() != L)
    throw TrainError("loss: per-layer inputs do not match the model");
  const bool budget_on = in.weights.budget != 0.0;
  if (budget_on && (in.budget.slope.size() != L || in.budget.offset.size() != L || !(in.budget.target > 0.0)))
    throw TrainError("loss: bad budget relaxation");
  if (in.frozen_at && in.frozen_at->layers.size() != L) throw TrainError("loss: frozen model mismatch");

  Tape tp;
  std::vector<LayerIds> ids;
  for (const LayerParams& p : model.layers)
    ids.push_back({tp.leaf(p.u), tp.leaf(p.sigma), tp.leaf(p.v), tp.leaf(p.bias), tp.leaf(p.log_su),
                   tp.leaf(p.log_sc), tp.leaf(p.log_sv), tp.leaf(p.mask_logits)});

  std::vector<Tape::Id> full_w, comp_w, masks;
  for (std::size_t l = 0; l < L; ++l) {
    const LayerIds& id = ids[l];
    const LayerChoice& c = in.profile.layers[l];
    const std::size_t r = model.layers[l].sigma.cols();
    if (c.k < 1 || c.k > r) throw TrainError("loss: rank out of range");
    full_w.push_back(tp.matmul_nt(tp.scale_channels(id.u, id.sigma, 1), id.v));
    const LayerParams* fz = in.frozen_at ? &in.frozen_at->layers[l] : nullptr;
    const Tape::Id uq = quantized(tp, id.u, id.lsu, c.bits.u, fz ? &fz->u : nullptr, fz ? &fz->log_su : nullptr);
    const Tape::Id sq =
        quantized(tp, id.sigma, id.lsc, c.bits.core, fz ? &fz->sigma : nullptr, fz ? &fz->log_sc : nullptr);
    const Tape::Id vq = quantized(tp, id.v, id.lsv, c.bits.v, fz ? &fz->v : nullptr, fz ? &fz->log_sv : nullptr);
    const Tape::Id mask = tp.soft_mask(id.logits, in.mask_noise[l], c.k, in.tau);
    masks.push_back(mask);
    comp_w.push_back(tp.matmul_nt(tp.scale_channels(uq, tp.hadamard(sq, mask), 1), vq));
  }

  const Tape::Id x = tp.constant(*in.x);
  const Tape::Id full_logits = run_forward(tp, x, full_w, ids, model.acts);
  const Tape::Id comp_logits = run_forward(tp, x, comp_w, ids, model.acts);
  LossTerms out;
  const Tape::Id task = tp.softmax_ce(full_logits, *in.y);
  const Tape::Id sd = tp.kl(full_logits, comp_logits);
  Tape::Id total = tp.add(task, tp.scale(sd, in.weights.sd));
  out.task = tp.scalar(task);
  out.sd = tp.scalar(sd);

  if (in.x_aug) {
    const Tape::Id xa = tp.constant(*in.x_aug);
    const Tape::Id aug = tp.kl(run_forward(tp, xa, full_w, ids, model.acts),
                               run_forward(tp, xa, comp_w, ids, model.acts));
    out.aug = tp.scalar(aug);
    total = tp.add(total, tp.scale(aug, in.weights.aug));
  }

  Tape::Id dhat = tp.constant(Matrix(1, 1));
  for (std::size_t l = 0; l < L; ++l)
    dhat = tp.add(dhat, tp.scale(tp.spectral_norm(tp.sub(full_w[l], comp_w[l])), in.lhat[l] * in.alpha[l]));
  const Tape::Id cert = tp.relu(tp.add_scalar(dhat, -in.weights.epsilon));
  out.delta_hat = tp.scalar(dhat);
  out.cert = tp.scalar(cert);
  total = tp.add(total, tp.scale(cert, in.weights.cert));

  if (budget_on) {
    Tape::Id lat = tp.constant(Matrix(1, 1, in.budget.base));
    for (std::size_t l = 0; l < L; ++l)
      lat = tp.add(lat, tp.add_scalar(tp.scale(tp.sum(masks[l]), in.budget.slope[l]), in.budget.offset[l]));
    const Tape::Id bud = tp.relu(tp.add_scalar(tp.scale(lat, 1.0 / in.budget.target), -1.0));
    out.budget = tp.scalar(bud);
    total = tp.add(total, tp.scale(bud, in.weights.budget));
  }
  out.total = tp.scalar(total);
  out.kink_margin = tp.kink_margin();

  if (grads) {
    tp.backward(total);
    *grads = model;
    std::vector<Matrix*> gl = param_list(*grads);
    std::size_t i = 0;
    for (const LayerIds& id : ids)
      for (Tape::Id t : {id.u, id.sigma, id.v, id.bias, id.lsu, id.lsc, id.lsv, id.logits}) *gl[i++] = tp.grad(t);
  }
  return out;
}

TrainConfig parse_train_config(const std::string& json_text) {
  json patch;
  try {
    patch = json::parse(json_text);
  } catch (const json::exception& e) {
    throw TrainError(std::string("config: ") + e.what());
  }
  json base = config_to_json(TrainConfig{});
  overlay(base, patch, "");
  TrainConfig c;
  try {
    c = config_from_json(base);
  } catch (const json::exception& e) {
    throw TrainError(std::string("config: ") + e.what());
  }
  validate_config(c);
  return c;
}

std::string train_config_json(const TrainConfig& c) { return config_to_json(c).dump(2); }

std::string config_hash(const TrainConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(config_to_json(c).dump())));
  return buf;
}

std::string checkpoint_json(const TrainState& s) {
  json j;
  j["step"] = s.step;
  j["seed"] = s.seed;
  std::ostringstream rs;
  rs << s.rng;
  j["rng"] = rs.str();
  json layers = json::array();
  for (const Matrix* m : param_list(s.model)) layers.push_back(matrix_json(*m));
  j["params"] = layers;
  json acts = json::array();
  for (Activation a : s.model.acts) acts.push_back(to_string(a));
  j["acts"] = acts;
  for (const auto* slots : {&s.slot1, &s.slot2}) {
    json arr = json::array();
    for (const Matrix& m : *slots) arr.push_back(matrix_json(m));
    j[slots == &s.slot1 ? "slot1" : "slot2"] = arr;
  }
  for (const auto* emas : {&s.lhat, &s.alpha}) {
    json arr = json::array();
    for (const Ema& e : *emas) arr.push_back(json{e.raw(), e.count()});
    j[emas == &s.lhat ? "lhat" : "alpha"] = arr;
  }
  j["initial_loss"] = s.initial_loss;
  j["over_count"] = s.over_count;
  j["diverged"] = s.diverged;
  json rows = json::array();
  for (const MetricRow& r : s.metrics) {
    const LossTerms& t = r.terms;
    rows.push_back(json{{"step", r.step}, {"tau", r.tau}, {"gamma", r.gamma}, {"lam_sd", r.lam_sd},
                        {"lam_aug", r.lam_aug}, {"lam_cert", r.lam_cert}, {"task", t.task}, {"sd", t.sd},
                        {"aug", t.aug}, {"cert", t.cert}, {"budget", t.budget}, {"total", t.total},
                        {"delta_hat", t.delta_hat}, {"kink_margin", t.kink_margin}, {"ranks", r.ranks},
                        {"aborted", r.aborted}});
  }
  j["metrics"] = rows;
  return j.dump();
}

TrainState load_checkpoint(const std::string& json_text) {
  TrainState s;
  try {
    const json j = json::parse(json_text);
    s.step = j.at("step");
    s.seed = j.at("seed");
    std::istringstream rs(j.at("rng").get<std::string>());
    rs >> s.rng;
    if (!rs) throw TrainError("checkpoint: bad rng state");
    const json& acts = j.at("acts");
    const json& params = j.at("params");
    if (params.size() != 8 * acts.size()) throw TrainError("checkpoint: parameter count mismatch");
    s.model.layers.resize(acts.size());
    for (const json& a : acts) s.model.acts.push_back(activation_from_string(a.get<std::string>()));
    std::vector<Matrix*> pl = param_list(s.model);
    for (std::size_t i = 0; i < pl.size(); ++i) *pl[i] = matrix_from_json(params[i]);
    for (const json& m : j.at("slot1")) s.slot1.push_back(matrix_from_json(m));
    for (const json& m : j.at("slot2")) s.slot2.push_back(matrix_from_json(m));
    for (const json& e : j.at("lhat")) {
      s.lhat.emplace_back();
      s.lhat.back().restore(e.at(0).get<double>(), e.at(1).get<std::size_t>());
    }
    for (const json& e : j.at("alpha")) {
      s.alpha.emplace_back();
      s.alpha.back().restore(e.at(0).get<double>(), e.at(1).get<std::size_t>());
    }
    s.initial_loss = j.at("initial_loss");
    s.over_count = j.at("over_count");
    s.diverged = j.at("diverged");
    for (const json& r : j.at("metrics")) {
      MetricRow m;
      m.step = r.at("step");
      m.tau = json_double(r.at("tau"));
      m.gamma = json_double(r.at("gamma"));
      m.lam_sd = json_double(r.at("lam_sd"));
      m.lam_aug = json_double(r.at("lam_aug"));
      m.lam_cert = json_double(r.at("lam_cert"));
      m.terms.task = json_double(r.at("task"));
      m.terms.sd = json_double(r.at("sd"));
      m.terms.aug = json_double(r.at("aug"));
      m.terms.cert = json_double(r.at("cert"));
      m.terms.budget = json_double(r.at("budget"));
      m.terms.total = json_double(r.at("total"));
      m.terms.delta_hat = json_double(r.at("delta_hat"));
      m.terms.kink_margin = json_double(r.at("kink_margin"));
      m.ranks = r.at("ranks");
      m.aborted = r.at("aborted");
      s.metrics.push_back(m);
    }
  } catch (const json::exception& e) {
    throw TrainError(std::string("checkpoint: ") + e.what());
  }
  return s;
}

void write_metrics_csv(std::ostream& os, const std::vector<MetricRow>& rows) {
  os << "step,tau,gamma,lam_sd,lam_aug,lam_cert,task,sd,aug,cert,budget,total,delta_hat,ranks,aborted\n";
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  for (const MetricRow& r : rows) {
    const LossTerms& t = r.terms;
    os << r.step << ',' << num(r.tau) << ',' << num(r.gamma) << ',' << num(r.lam_sd) << ','
       << num(r.lam_aug) << ',' << num(r.lam_cert) << ',' << num(t.task) << ',' << num(t.sd) << ','
       << num(t.aug) << ',' << num(t.cert) << ',' << num(t.budget) << ',' << num(t.total) << ','
       << num(t.delta_hat) << ',' << r.ranks << ',' << (r.aborted ? 1 : 0) << '\n';
  }
}

std::vector<Profile> template_profiles(const Network& net, const TrainConfig& cfg) {
  static const char* names[] = {"tiny", "med", "max"};
  std::vector<Profile> out;
  for (std::size_t i = 0; i < 3; ++i) {
    Profile p;
    p.id = names[i];
    for (const Block& b : net.blocks) {
      const ElasticLayer& L = b.layer;
      const double raw = std::round(cfg.profile_fracs[i] * static_cast<double>(L.k_max()));
      const std::size_t k = std::clamp(static_cast<std::size_t>(std::max(raw, 1.0)), L.k_min(), L.k_max());
      p.layers.push_back({k, cfg.bitmap.bits(k)});
    }
    out.push_back(std::move(p));
  }
  return out;
}

CostModel toy_cost_model(const Network& net, const TrainConfig& cfg, SyntheticDevice* device) {
  const SyntheticDevice dev = make_synthetic_device("toy-cpu", net.blocks.size(), cfg.device_seed);
  if (device) *device = dev;
  std::mt19937_64 rng(cfg.device_seed + 1);
  std::vector<Profile> profiles = template_profiles(net, cfg);
  profiles.push_back(full_profile(net));
  while (profiles.size() < 64) {
    Profile p = random_profile(net, rng, {0, 4, 6, 8});
    p.id.clear();
    profiles.push_back(std::move(p));
  }
  std::vector<ProfileCost> costs;
  for (const Profile& p : profiles) costs.push_back(profile_cost(net, p));
  const DeviceTable table = synthesize_table(dev, costs, cfg.device_seed + 2);
  return fit_cost_model(table, costs);
}

double accuracy(const Network& net, const Profile& p, const ToyData& d) {
  const CompiledNetwork c = compile(net, p);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < d.size(); ++i)
    if (argmax(forward(c, d.x.row(i)).logits) == d.y[i]) ++hit;
  return d.size() ? static_cast<double>(hit) / static_cast<double>(d.size()) : 0.0;
}

double accuracy_full(const Network& net, const ToyData& d) { return accuracy(net, full_profile(net), d); }

double violation_rate(const Network& net, const Profile& p, const ToyData& d, double epsilon) {
  const CompiledNetwork full = compile_full(net), comp = compile(net, p);
  std::size_t bad = 0;
  for (std::size_t i = 0; i < d.size(); ++i)
    if (logit_drift(full, comp, d.x.row(i)) > epsilon) ++bad;
  return d.size() ? static_cast<double>(bad) / static_cast<double>(d.size()) : 0.0;
}

ToyData toy_train_data(const TrainConfig& cfg) {
  const ToyData all = make_toy_data(cfg.train_n + cfg.eval_n, cfg.widths.front(), cfg.data_seed, cfg.modes,
                                    cfg.centre_scale, cfg.spread);
  return slice(all, 0, cfg.train_n);
}

ToyData toy_eval_data(const TrainConfig& cfg) {
  const ToyData all = make_toy_data(cfg.train_n + cfg.eval_n, cfg.widths.front(), cfg.data_seed, cfg.modes,
                                    cfg.centre_scale, cfg.spread);
  return slice(all, cfg.train_n, cfg.train_n + cfg.eval_n);
}

namespace {

TrainState initial_state(const TrainConfig& cfg, std::uint64_t seed) {
  DenseNetSpec spec;
  spec.widths = cfg.widths;
  spec.hidden = cfg.hidden;
  spec.seed = seed;
  TrainState s;
  s.seed = seed;
  s.rng.seed(seed ^ 0x9e3779b97f4a7c15ULL);
  s.model = model_from_network(random_dense_network(spec));
  for (LayerParams& p : s.model.layers) init_scales_and_mask(p, cfg.mask_spacing);
  for (const Matrix* m : param_list(s.model)) {
    s.slot1.push_back(zeros_like(*m));
    s.slot2.push_back(zeros_like(*m));
  }
  s.lhat.assign(s.model.layers.size(), Ema(cfg.ema_decay));
  s.alpha.assign(s.model.layers.size(), Ema(cfg.ema_decay));
  return s;
}

void reset_slots(TrainState& s) {
  for (Matrix& m : s.slot1) m = zeros_like(m);
  for (Matrix& m : s.slot2) m = zeros_like(m);
}

void refresh_certificate(TrainState& s, const TrainConfig& cfg, const std::vector<Vector>& calib) {
  const Network net = to_network(s.model);
  ProxySpec spec;
  spec.mode = ProxyMode::PowerIter;
  spec.steps = cfg.power_steps;
  spec.ema_decay = cfg.ema_decay;
  spec.seed = s.seed + s.step;
  const CalibrationStats st = calibrate(net, calib);
  for (std::size_t l = 0; l < net.blocks.size(); ++l) {
    s.lhat[l].update(power_iteration_gain(net, l, calib, spec));
    s.alpha[l].update(st.alpha[l]);
  }
}

void optimizer_step(TrainState& s, const TrainConfig& cfg, const TrainModel& grads) {
  std::vector<Matrix*> p = param_list(s.model);
  std::vector<const Matrix*> g = param_list(grads);
  const double t = static_cast<double>(s.step + 1);
  double gn = 0.0;
  for (const Matrix* m : g)
    for (double x : m->data()) gn += x * x;
  gn = std::sqrt(gn);
  const double clip = cfg.grad_clip > 0.0 && gn > cfg.grad_clip ? cfg.grad_clip / gn : 1.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    std::span<double> w = p[i]->data();
    const Matrix gm = clip * *g[i];
    std::span<const double> gi = gm.data();
    std::span<double> m1 = s.slot1[i].data(), m2 = s.slot2[i].data();
    for (std::size_t j = 0; j < w.size(); ++j) {
      if (cfg.optimizer == OptimizerKind::Sgd) {
        m1[j] = cfg.momentum * m1[j] + gi[j] + cfg.weight_decay * w[j];
        w[j] -= cfg.lr * m1[j];
      } else {
        m1[j] = cfg.adam_beta1 * m1[j] + (1.0 - cfg.adam_beta1) * gi[j];
        m2[j] = cfg.adam_beta2 * m2[j] + (1.0 - cfg.adam_beta2) * gi[j] * gi[j];
        const double mh = m1[j] / (1.0 - std::pow(cfg.adam_beta1, t));
        const double vh = m2[j] / (1.0 - std::pow(cfg.adam_beta2, t));
        w[j] -= cfg.lr * (mh / (std::sqrt(vh) + 1e-8) + cfg.weight_decay * w[j]);
      }
    }
  }
}

}  // namespace

ToyRun train_toy(const TrainConfig& cfg, std::uint64_t seed, const TrainState* resume,
                 std::optional<std::size_t> stop_at) {
  validate_config(cfg);
  ToyRun run;
  run.cfg = cfg;
  run.train = toy_train_data(cfg);
  run.eval = toy_eval_data(cfg);
  run.state = resume ? *resume : initial_state(cfg, seed);
  TrainState& s = run.state;
  if (s.model.layers.size() + 1 != cfg.widths.size()) throw TrainError("resume: model does not match config");

  const std::vector<Vector> calib = run.train.rows(0, cfg.calib_n);
  const std::vector<Vector> power_calib = run.train.rows(0, std::min<std::size_t>(cfg.calib_n, 32));
  // Shapes are fixed, so one cost model serves the whole run.
  const Network shape_net = to_network(s.model);
  const CostModel cost = toy_cost_model(shape_net, cfg);
  const std::vector<Profile> templates = template_profiles(shape_net, cfg);
  const double lat_lo = profile_latency(cost, shape_net, templates.front());
  const double lat_hi = profile_latency(cost, shape_net, templates.back());

  const std::size_t L = s.model.layers.size();
  std::vector<RankSampler> samplers;
  const std::size_t anneal = std::max<std::size_t>(1, static_cast<std::size_t>(cfg.anneal_frac * cfg.steps));
  for (std::size_t l = 0; l < L; ++l) {
    const ElasticLayer& layer = shape_net.blocks[l].layer;
    RankSampler rs{layer.k_min(), layer.k_max(), anneal, {}};
    for (const Profile& p : templates) rs.profile_ranks.push_back(p.layers[l].k);
    samplers.push_back(rs);
  }
  const std::size_t warm = static_cast<std::size_t>(cfg.weights.warmup_frac * static_cast<double>(cfg.steps));
  const std::size_t stage1 = static_cast<std::size_t>(cfg.curriculum[0] * static_cast<double>(cfg.steps));
  const std::size_t end = std::min(cfg.steps, stop_at.value_or(cfg.steps));

  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  while (s.step < end && !s.diverged) {
    const std::size_t t = s.step;
    if (t % cfg.refresh_every == 0) refresh_certificate(s, cfg, power_calib);

    std::vector<std::size_t> idx(cfg.batch);
    std::uniform_int_distribution<std::size_t> pick(0, run.train.size() - 1);
    for (std::size_t& i : idx) i = pick(s.rng);
    const Matrix x = gather_rows(run.train.x, idx);
    std::vector<std::size_t> y;
    for (std::size_t i : idx) y.push_back(run.train.y[i]);
    Matrix xa = x;
    for (double& v : xa.data()) v += cfg.aug_sigma * normal(s.rng);

    Profile prof;
    if (t < stage1) {
      // Shared rank fraction across layers.
      const std::size_t k0 = samplers[0].sample(t, s.rng);
      const double frac = static_cast<double>(k0) / static_cast<double>(samplers[0].k_max);
      for (std::size_t l = 0; l < L; ++l) {
        const double raw = std::round(frac * static_cast<double>(samplers[l].k_max));
        const std::size_t k = std::clamp(static_cast<std::size_t>(std::max(raw, 1.0)), samplers[l].k_min,
                                         samplers[l].k_max);
        prof.layers.push_back({k, cfg.bitmap.bits(k)});
      }
    } else {
      for (std::size_t l = 0; l < L; ++l) {
        const std::size_t k = samplers[l].sample(t, s.rng);
        prof.layers.push_back({k, cfg.bitmap.bits(k)});
      }
    }

    LossInputs in;
    in.x = &x;
    in.y = &y;
    in.x_aug = cfg.weights.aug != 0.0 ? &xa : nullptr;
    in.profile = prof;
    for (std::size_t l = 0; l < L; ++l) in.mask_noise.push_back(gumbel_row(s.model.layers[l].sigma.cols(), s.rng));
    in.tau = anneal_temperature(t, anneal, cfg.tau0, cfg.tau_min);
    in.weights = cfg.weights;
    in.weights.sd = lambda_warmup(cfg.weights.sd, t, warm);
    in.weights.aug = lambda_warmup(cfg.weights.aug, t, warm);
    in.weights.cert = lambda_warmup(cfg.weights.cert, t, warm);
    for (std::size_t l = 0; l < L; ++l) {
      in.lhat.push_back(s.lhat[l].value());
      in.alpha.push_back(s.alpha[l].value());
    }
    const double target = lat_lo + (lat_hi - lat_lo) * unit(s.rng);
    in.budget = relax_budget(cost, shape_net, prof, target);

    TrainModel grads;
    MetricRow row;
    row.step = t;
    row.tau = in.tau;
    row.gamma = samplers[0].gamma(t);
    row.lam_sd = in.weights.sd;
    row.lam_aug = in.weights.aug;
    row.lam_cert = in.weights.cert;
    row.ranks = rank_text(prof);
    bool finite = true;
    try {
      row.terms = total_loss(s.model, in, &grads);
      finite = std::isfinite(row.terms.total);
      for (const Matrix* g : param_list(grads)) finite = finite && all_finite(g->data());
    } catch (const LinalgError&) {
      finite = false;
    }
    if (!finite) {
      // Skip the update; the row keeps whatever terms were computed.
      row.aborted = true;
      s.metrics.push_back(row);
      ++s.step;
      continue;
    }
    optimizer_step(s, cfg, grads);

    if (t == 0 || s.initial_loss == 0.0) s.initial_loss = row.terms.total;
    if (row.terms.total > cfg.divergence_factor * s.initial_loss) {
      if (++s.over_count >= cfg.divergence_window) s.diverged = true;
    } else {
      s.over_count = 0;
    }
    if ((t + 1) % cfg.resvd_every == 0 || t + 1 == cfg.steps) {
      reorthogonalize(s.model);
      reset_slots(s);
    }
    if (t % cfg.log_every == 0 || t + 1 == cfg.steps) s.metrics.push_back(row);
    ++s.step;
  }

  run.net = to_network(s.model);
  TrainReport& rep = run.report;
  rep.diverged = s.diverged;
  for (const MetricRow& r : s.metrics) rep.aborted_steps += r.aborted ? 1 : 0;
  for (auto it = s.metrics.rbegin(); it != s.metrics.rend(); ++it)
    if (!it->aborted) {
      rep.final_loss = it->terms.total;
      break;
    }
  const std::vector<Profile> tp = template_profiles(run.net, cfg);
  const CalibrationStats stats = calibrate(run.net, calib);
  ProxySpec cons;
  const LipschitzTable table = lipschitz_proxy(run.net, cons, tp);
  rep.full_accuracy = accuracy_full(run.net, run.eval);
  for (const Profile& p : tp) {
    rep.profile_ids.push_back(p.id);
    rep.accuracy.push_back(accuracy(run.net, p, run.eval));
    rep.delta_hat.push_back(expected_bound(run.net, stats, table, p));
  }
  rep.violation_rate_tiny = violation_rate(run.net, tp.front(), run.eval, cfg.weights.epsilon);
  return run;
}

}  // namespace ecomp
