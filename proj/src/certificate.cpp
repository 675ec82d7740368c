#include "ecomp/certificate.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "ecomp/quant.hpp"

namespace ecomp {

CalibrationStats calibrate(const Network& net, const std::vector<Vector>& inputs) {
  if (inputs.empty()) throw CertificateError("calibrate: empty calibration set");
  const CompiledNetwork full = compile_full(net);
  const std::size_t L = net.blocks.size();
  CalibrationStats s;
  s.alpha.assign(L, 0.0);
  s.running_max.assign(L, 0.0);
  for (const Vector& x : inputs) {
    const ForwardTrace tr = forward(full, x);
    for (std::size_t l = 0; l < L; ++l) {
      const double n = norm2(tr.inputs[l]);
      s.alpha[l] += n * n;
      s.running_max[l] = std::max(s.running_max[l], n);
    }
  }
  const double inv = 1.0 / static_cast<double>(inputs.size());
  for (double& a : s.alpha) a = std::sqrt(a * inv);
  // Rounding can push the RMS a hair above the max for a single sample.
  for (std::size_t l = 0; l < L; ++l) s.alpha[l] = std::min(s.alpha[l], s.running_max[l]);
  s.samples = inputs.size();
  s.fingerprint = fingerprint(net);
  return s;
}

const char* to_string(ProxyMode m) { return m == ProxyMode::Conservative ? "conservative" : "poweriter"; }

ProxyMode proxy_mode_from_string(const std::string& s) {
  if (s == "conservative") return ProxyMode::Conservative;
  if (s == "poweriter") return ProxyMode::PowerIter;
  throw CertificateError("unknown proxy mode: " + s);
}

void Ema::update(double x) {
  m_ = decay_ * m_ + (1.0 - decay_) * x;
  ++count_;
}

double Ema::value() const {
  if (count_ == 0) return 0.0;
  return m_ / (1.0 - std::pow(decay_, static_cast<double>(count_)));
}

double power_iteration_gain(const Network& net, std::size_t l, const std::vector<Vector>& inputs,
                            const ProxySpec& spec) {
  if (inputs.empty()) throw CertificateError("power iteration proxy needs calibration inputs");
  if (spec.steps < 1) throw CertificateError("power iteration proxy needs at least one step");
  const CompiledNetwork full = compile_full(net);
  const std::size_t dim = net.block_out_dim(l);
  std::mt19937_64 rng(spec.seed + 7919 * l);
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector v(dim);
  for (double& x : v) x = normal(rng);
  double nv = norm2(v);
  for (double& x : v) x /= nv;
  Ema ema(spec.ema_decay);
  for (std::size_t s = 0; s < inputs.size(); ++s) {
    const ForwardTrace tr = forward(full, inputs[s]);
    const std::size_t steps = spec.steps + (s == 0 ? spec.warmup_steps : 0);
    double est = 0.0;
    for (std::size_t it = 0; it < steps; ++it) {
      const Vector jv = tail_jvp(full, tr, l, v);
      est = norm2(jv);
      Vector u = tail_vjp(full, tr, l, jv);
      const double nu = norm2(u);
      if (nu == 0.0) break;
      for (std::size_t i = 0; i < dim; ++i) v[i] = u[i] / nu;
    }
    est = std::max(est, norm2(tail_jvp(full, tr, l, v)));
    ema.update(est);
  }
  return ema.value();
}

LipschitzTable lipschitz_proxy(const Network& net, const ProxySpec& spec,
                               const std::vector<Profile>& profiles,
                               const std::vector<Vector>& calibration) {
  LipschitzTable t;
  t.spec = spec;
  const std::size_t L = net.blocks.size();
  t.lhat.resize(L);
  if (spec.mode == ProxyMode::Conservative) {
    t.certified = true;
    for (std::size_t l = 0; l < L; ++l) t.lhat[l] = exact_postlayer_lipschitz(net, l, profiles);
  } else {
    t.certified = false;
    for (std::size_t l = 0; l < L; ++l) t.lhat[l] = power_iteration_gain(net, l, calibration, spec);
  }
  return t;
}

Vector residual_norms(const Network& net, const Profile& p) {
  validate_profile(net, p);
  Vector r(net.blocks.size());
  for (std::size_t l = 0; l < r.size(); ++l)
    r[l] = residual_norm(net.blocks[l].layer, p.layers[l].k, p.layers[l].bits);
  return r;
}

double pointwise_bound(const Vector& lhat, const Vector& residuals, const ForwardTrace& full_trace) {
  double s = 0.0;
  for (std::size_t l = 0; l < lhat.size(); ++l)
    s += lhat[l] * residuals[l] * norm2(full_trace.inputs[l]);
  return s;
}

double pointwise_bound(const Network& net, const LipschitzTable& table, const Profile& p,
                       std::span<const double> x) {
  return pointwise_bound(table.lhat, residual_norms(net, p), forward_full(net, x));
}

double aggregate(const std::vector<LedgerEntry>& layers) {
  double s = 0.0;
  for (const LedgerEntry& e : layers) s += e.lhat * e.residual * e.alpha;
  return s;
}

CertificateLedger build_ledger(const Network& net, const CalibrationStats& stats,
                               const LipschitzTable& table, const Profile& p) {
  if (stats.fingerprint != fingerprint(net))
    throw CertificateError("calibration statistics are stale (fingerprint mismatch)");
  if (stats.alpha.size() != net.blocks.size() || table.lhat.size() != net.blocks.size())
    throw CertificateError("ledger inputs do not match the network depth");
  const Vector r = residual_norms(net, p);
  CertificateLedger led;
  led.profile_id = p.id;
  led.mode = table.spec.mode;
  led.certified = table.certified;
  for (std::size_t l = 0; l < r.size(); ++l) led.layers.push_back({table.lhat[l], r[l], stats.alpha[l]});
  led.delta_hat = aggregate(led.layers);
  return led;
}

double expected_bound(const Network& net, const CalibrationStats& stats,
                      const LipschitzTable& table, const Profile& p) {
  return build_ledger(net, stats, table, p).delta_hat;
}

double percentile95(const std::vector<double>& v) { return percentile(v, 95.0); }

std::optional<double> pearson(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) return std::nullopt;
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa <= 0.0 || sbb <= 0.0) return std::nullopt;
  return sab / std::sqrt(saa * sbb);
}

DiagnosticsReport diagnostics(const Network& net, const CalibrationStats& stats,
                              const LipschitzTable& table, const std::vector<Profile>& profiles,
                              const std::vector<Vector>& eval_inputs, double epsilon) {
  if (eval_inputs.empty()) throw CertificateError("diagnostics: no evaluation inputs");
  const CompiledNetwork full = compile_full(net);
  std::vector<ForwardTrace> traces;
  for (const Vector& x : eval_inputs) traces.push_back(forward(full, x));
  DiagnosticsReport rep;
  rep.epsilon = epsilon;
  std::size_t covered = 0, total = 0;
  std::vector<double> dhat, mean_drift;
  for (const Profile& p : profiles) {
    const CompiledNetwork comp = compile(net, p);
    const Vector r = residual_norms(net, p);
    ProfileDiagnostics d;
    d.profile_id = p.id;
    d.delta_hat = expected_bound(net, stats, table, p);
    std::vector<double> drifts, bounds;
    for (std::size_t i = 0; i < eval_inputs.size(); ++i) {
      const Vector z = forward(comp, eval_inputs[i]).logits;
      double s = 0.0;
      for (std::size_t c = 0; c < z.size(); ++c)
        s += (z[c] - traces[i].logits[c]) * (z[c] - traces[i].logits[c]);
      const double drift = std::sqrt(s);
      const double bound = pointwise_bound(table.lhat, r, traces[i]);
      drifts.push_back(drift);
      bounds.push_back(bound);
      if (drift > bound) ++d.violations;
    }
    const double n = static_cast<double>(drifts.size());
    std::size_t cov = 0;
    double ss = 0.0;
    for (double x : drifts) {
      d.mean_drift += x / n;
      ss += x * x;
      d.max_drift = std::max(d.max_drift, x);
      if (x <= epsilon) ++cov;
    }
    d.rms_drift = std::sqrt(ss / n);
    d.coverage = static_cast<double>(cov) / n;
    d.p95_bound = percentile95(bounds);
    d.p95_drift = percentile95(drifts);
    std::size_t cov95 = 0;
    for (double x : drifts)
      if (x <= d.p95_bound) ++cov95;
    d.coverage_at_p95 = static_cast<double>(cov95) / n;
    covered += cov;
    total += drifts.size();
    dhat.push_back(d.delta_hat);
    mean_drift.push_back(d.mean_drift);
    rep.profiles.push_back(std::move(d));
  }
  rep.coverage = total ? static_cast<double>(covered) / static_cast<double>(total) : 0.0;
  rep.correlation = pearson(dhat, mean_drift);
  return rep;
}

}  // namespace ecomp
