#include "ecomp/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <limits>
#include <map>
#include <ostream>
#include <random>
#include <set>
#include <sstream>

#include "ecomp/synth.hpp"

namespace ecomp {

namespace {

std::string fmt(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

const Network& need_net(const Manifest& m) {
  if (!m.net) throw PipelineError("manifest has no elastic model; run decompose first");
  return *m.net;
}

const CalibrationStats& need_stats(const Manifest& m) {
  if (!m.calibration) throw PipelineError("manifest has no calibration; run certify first");
  if (m.calibration->fingerprint != fingerprint(need_net(m)))
    throw PipelineError("calibration fingerprint does not match the model");
  return *m.calibration;
}

std::size_t argmax(const Vector& v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

std::vector<Profile> manifest_profiles(const Manifest& m) {
  std::vector<Profile> all = m.profiles;
  if (m.lattice)
    for (const LatticeEntry& e : m.lattice->entries) all.push_back(e.profile);
  return all;
}

// Ledgers and payloads for every manifest profile; lattice Δ̂ follows the ledgers.
void rebuild_ledgers(Manifest& m, const LipschitzTable& table) {
  const Network& net = need_net(m);
  const CalibrationStats& stats = need_stats(m);
  m.ledgers.clear();
  m.payloads.clear();
  std::set<std::string> seen;
  for (const Profile& p : manifest_profiles(m)) {
    if (p.id.empty()) throw PipelineError("manifest profiles need ids");
    if (!seen.insert(p.id).second) throw PipelineError("duplicate profile id " + p.id);
    m.ledgers.push_back(build_ledger(net, stats, table, p));
    m.payloads.push_back(make_payload(net, p));
  }
  if (m.lattice)
    for (LatticeEntry& e : m.lattice->entries) e.delta_hat = find_ledger(m, e.profile.id)->delta_hat;
}

LipschitzTable conservative_table(const Network& net, const std::vector<Profile>& tails) {
  return lipschitz_proxy(net, ProxySpec{.mode = ProxyMode::Conservative}, tails);
}

double data_accuracy(const Network& net, const CompiledNetwork& full, const Profile& p, const Dataset& d) {
  if (d.x.empty()) return 0.0;
  const CompiledNetwork c = compile(net, p);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < d.x.size(); ++i) {
    const std::size_t got = argmax(forward(c, d.x[i]).logits);
    const std::size_t want = d.y.empty() ? argmax(forward(full, d.x[i]).logits) : d.y[i];
    if (got == want) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(d.x.size());
}

struct Enforced {
  MonotoneResult res;
  LipschitzTable table;
};

}  // namespace

Dataset to_dataset(const ToyData& d) {
  Dataset out;
  out.x = d.rows(0, d.size());
  out.y = d.y;
  return out;
}

std::vector<Vector> calibration_rows(const ToyRun& run) { return run.train.rows(0, run.cfg.calib_n); }

Manifest trained_manifest(const ToyRun& run, std::uint64_t seed) {
  Manifest m;
  m.height = run.net.height;
  m.width = run.net.width;
  m.net = run.net;
  m.provenance = {seed, config_hash(run.cfg), "train"};
  certify_manifest(m, calibration_rows(run), ProxySpec{}, template_profiles(run.net, run.cfg));
  return m;
}

std::vector<Profile> fraction_profiles(const Network& net, const Vector& fracs, const BitMap& map) {
  static const char* names[] = {"tiny", "med", "max"};
  std::vector<Profile> out;
  for (std::size_t i = 0; i < fracs.size(); ++i) {
    Profile p;
    p.id = fracs.size() == 3 ? names[i] : "f" + std::to_string(i);
    for (const Block& b : net.blocks) {
      const ElasticLayer& L = b.layer;
      const double raw = std::max(1.0, std::round(fracs[i] * static_cast<double>(L.k_max())));
      const std::size_t k = std::clamp(static_cast<std::size_t>(raw), L.k_min(), L.k_max());
      p.layers.push_back({k, map.bits(k)});
    }
    out.push_back(std::move(p));
  }
  return out;
}

void certify_manifest(Manifest& m, const std::vector<Vector>& calibration, const ProxySpec& spec,
                      const std::vector<Profile>& extra) {
  const Network& net = need_net(m);
  if (calibration.empty()) throw PipelineError("certify: calibration data are empty");
  for (const Profile& p : extra) {
    validate_profile(net, p);
    auto it = std::find_if(m.profiles.begin(), m.profiles.end(), [&](const Profile& q) { return q.id == p.id; });
    if (it != m.profiles.end())
      *it = p;
    else
      m.profiles.push_back(p);
  }
  m.calibration = calibrate(net, calibration);
  const LipschitzTable table = spec.mode == ProxyMode::Conservative
                                   ? conservative_table(net, manifest_profiles(m))
                                   : lipschitz_proxy(net, spec, {}, calibration);
  rebuild_ledgers(m, table);
}

LipschitzTable table_from_manifest(const Manifest& m) {
  if (m.ledgers.empty()) throw PipelineError("manifest has no certificate ledger; run certify first");
  LipschitzTable t;
  t.spec.mode = m.ledgers.front().mode;
  t.certified = m.ledgers.front().certified;
  for (const LedgerEntry& e : m.ledgers.front().layers) t.lhat.push_back(e.lhat);
  for (const CertificateLedger& l : m.ledgers) {
    if (l.mode != t.spec.mode || l.layers.size() != t.lhat.size())
      throw PipelineError("ledgers disagree on the proxy table");
    for (std::size_t i = 0; i < t.lhat.size(); ++i)
      if (l.layers[i].lhat != t.lhat[i]) throw PipelineError("ledgers disagree on the proxy table");
  }
  return t;
}

std::vector<ProfileCost> device_costs(const Manifest& m, const DeviceTable& t) {
  const Network& net = need_net(m);
  std::vector<ProfileCost> costs;
  std::set<std::string> seen;
  for (const DeviceRecord& r : t.records) {
    if (!seen.insert(r.profile_id).second) continue;
    Profile p;
    if (const Profile* known = find_profile(m, r.profile_id)) {
      p = *known;
    } else {
      try {
        p = parse_profile_key(r.profile_id, r.profile_id);
      } catch (const std::invalid_argument&) {
        throw PipelineError("device table: unknown profile id " + r.profile_id);
      }
    }
    validate_profile(net, p);
    costs.push_back(profile_cost(net, p));
  }
  return costs;
}

DeviceTable synth_device_table(const Network& net, const std::string& device_id, std::uint64_t seed,
                               std::size_t count, double noise_sigma) {
  const SyntheticDevice dev = make_synthetic_device(device_id, net.blocks.size(), seed, noise_sigma);
  std::mt19937_64 rng(seed + 1);
  std::vector<Profile> profiles = fraction_profiles(net, {0.25, 0.5, 1.0}, BitMap{1.5, 3.0, 8, 1, 0, 1});
  profiles.push_back(full_profile(net));
  std::set<std::string> keys;
  std::vector<ProfileCost> costs;
  auto add = [&](Profile p) {
    p.id.clear();
    if (keys.insert(profile_key(p)).second) costs.push_back(profile_cost(net, p));
  };
  for (const Profile& p : profiles) add(p);
  for (std::size_t tries = 0; costs.size() < count && tries < 100 * count; ++tries)
    add(random_profile(net, rng, {0, 4, 6, 8}));
  return synthesize_table(dev, costs, seed + 2);
}

PlanSetup make_plan_setup(const Manifest& m, const DeviceTable& t, std::size_t entries, const BitMap& map) {
  PlanSetup s;
  s.ctx.net = &need_net(m);
  s.stats = need_stats(m);
  s.table = table_from_manifest(m);
  s.device_id = t.device_id;
  s.ctx.menus = build_menus(*s.ctx.net, entries, map);
  const std::vector<ProfileCost> costs = device_costs(m, t);
  s.ctx.latency = fit_cost_model(t, costs, CostTarget::Latency);
  const bool energy = std::all_of(t.records.begin(), t.records.end(), [](const DeviceRecord& r) { return r.energy_mj.has_value(); });
  if (energy && !t.records.empty()) s.ctx.energy = fit_cost_model(t, costs, CostTarget::Energy);
  s.ctx.mass = certificate_mass(*s.ctx.net, s.ctx.menus, s.table, s.stats);
  return s;
}

std::vector<BudgetToken> latency_ladder(const PlanSetup& s, std::size_t count) {
  const Network& net = *s.ctx.net;
  std::vector<std::size_t> lo(net.blocks.size(), 0), hi(net.blocks.size());
  for (std::size_t l = 0; l < hi.size(); ++l) hi[l] = s.ctx.menus[l].size() - 1;
  const double a = predict(s.ctx.latency, profile_cost(net, profile_from_indices(s.ctx.menus, lo)));
  const double b = predict(s.ctx.latency, profile_cost(net, profile_from_indices(s.ctx.menus, hi)));
  std::vector<BudgetToken> out;
  for (std::size_t i = 0; i < count; ++i) {
    BudgetToken t;
    t.device = s.device_id;
    t.latency_ms = a + (b - a) * static_cast<double>(i + 1) / static_cast<double>(count);
    out.push_back(t);
  }
  return out;
}

namespace {

Enforced enforce_with_tables(const Network& net, const PlanSetup& s, const std::vector<Profile>& assignments,
                             const std::vector<Profile>& fixed_tails, bool iterate) {
  std::map<std::string, double> lat_cache;
  auto latency = [&](const Profile& p) {
    const std::string key = profile_key(p);
    auto it = lat_cache.find(key);
    if (it == lat_cache.end()) it = lat_cache.emplace(key, predict(s.ctx.latency, profile_cost(net, p))).first;
    return it->second;
  };
  auto run = [&](const LipschitzTable& table) {
    std::map<std::string, double> cache;
    return enforce_monotone(
        assignments,
        [&](const Profile& p) {
          const std::string key = profile_key(p);
          auto it = cache.find(key);
          if (it == cache.end()) it = cache.emplace(key, build_ledger(net, s.stats, table, p).delta_hat).first;
          return it->second;
        },
        latency);
  };
  if (s.table.spec.mode != ProxyMode::Conservative) return {run(s.table), s.table};

  auto tails_with = [&](const std::vector<Profile>& extra) {
    std::vector<Profile> t = fixed_tails;
    t.insert(t.end(), extra.begin(), extra.end());
    return t;
  };
  if (!iterate) {
    const LipschitzTable table = conservative_table(net, tails_with(assignments));
    return {run(table), table};
  }
  // The table must cover exactly the lattice it orders.
  LipschitzTable table = conservative_table(net, tails_with(assignments));
  MonotoneResult res = run(table);
  for (int iter = 0; iter < 16; ++iter) {
    const LipschitzTable next = conservative_table(net, tails_with(res.lattice));
    MonotoneResult again = run(next);
    table = next;
    if (again.lattice == res.lattice) return {again, table};
    res = std::move(again);
  }
  throw PipelineError("plan: conservative table did not settle");
}

}  // namespace

PlanOutcome plan_lattice(Manifest& m, const PlanSetup& s, const std::vector<BudgetToken>& budgets) {
  const Network& net = need_net(m);
  if (budgets.empty()) throw PipelineError("plan: no budgets");
  PlanOutcome out;
  std::vector<Profile> assignments;
  for (const BudgetToken& b : budgets) {
    bool inf = false;
    assignments.push_back(plan_profile(s.ctx, b, &inf));
    out.infeasible.push_back(inf);
  }
  const Enforced e = enforce_with_tables(net, s, assignments, m.profiles, true);
  out.assignments = e.res.assignments;
  out.lattice_index = e.res.lattice_index;
  out.raised = e.res.raised;
  out.dropped = e.res.dropped;

  ProfileLattice lat;
  lat.device_id = s.device_id;
  for (std::size_t i = 0; i < e.res.lattice.size(); ++i) {
    LatticeEntry entry;
    entry.profile = e.res.lattice[i];
    entry.profile.id = "L" + std::to_string(i);
    const ProfileCost pc = profile_cost(net, entry.profile);
    entry.latency_ms = predict(s.ctx.latency, pc);
    if (s.ctx.energy) entry.energy_mj = predict(*s.ctx.energy, pc);
    entry.bytes = pc.total_weight_bytes();
    lat.entries.push_back(std::move(entry));
  }
  m.lattice = std::move(lat);
  rebuild_ledgers(m, e.table);

  Vector latency, delta;
  for (std::size_t idx : out.lattice_index) {
    latency.push_back(m.lattice->entries[idx].latency_ms);
    delta.push_back(m.lattice->entries[idx].delta_hat);
  }
  out.audit = audit_monotone({}, latency, delta);
  return out;
}

AuditOutcome audit_scan(const Manifest& m, const PlanSetup& s, std::size_t pairs, const Dataset* data) {
  const Network& net = need_net(m);
  if (pairs == 0) throw PipelineError("audit: need at least one pair");
  AuditOutcome out;
  std::vector<Profile> assignments;
  for (const BudgetToken& b : latency_ladder(s, pairs + 1)) {
    bool inf = false;
    assignments.push_back(plan_profile(s.ctx, b, &inf));
    out.infeasible += inf;
  }
  const Enforced e = enforce_with_tables(net, s, assignments, manifest_profiles(m), false);
  out.distinct_profiles = e.res.lattice.size();

  const CompiledNetwork full = compile_full(net);
  Vector lat_of, delta_of, acc_of;
  for (const Profile& p : e.res.lattice) {
    lat_of.push_back(predict(s.ctx.latency, profile_cost(net, p)));
    delta_of.push_back(build_ledger(net, s.stats, e.table, p).delta_hat);
    if (data) acc_of.push_back(data_accuracy(net, full, p, *data));
  }
  Vector acc, latency, delta;
  for (std::size_t idx : e.res.lattice_index) {
    latency.push_back(lat_of[idx]);
    delta.push_back(delta_of[idx]);
    if (data) acc.push_back(acc_of[idx]);
  }
  out.result = audit_monotone(acc, latency, delta);
  return out;
}

Report build_report(const Manifest& m, const Dataset& eval, std::optional<double> epsilon) {
  const Network& net = need_net(m);
  const CalibrationStats& stats = need_stats(m);
  if (eval.x.empty()) throw PipelineError("report: evaluation data are empty");
  const LipschitzTable table = table_from_manifest(m);

  std::vector<Profile> profiles;
  std::set<std::string> ids;
  if (m.lattice)
    for (const LatticeEntry& e : m.lattice->entries)
      if (ids.insert(e.profile.id).second) profiles.push_back(e.profile);
  for (const Profile& p : m.profiles)
    if (ids.insert(p.id).second) profiles.push_back(p);
  if (profiles.empty()) throw PipelineError("report: manifest has no profiles");

  Report r;
  r.mode = to_string(table.spec.mode);
  double max_dhat = 0.0;
  for (const Profile& p : profiles) {
    const CertificateLedger* led = find_ledger(m, p.id);
    if (!led) throw PipelineError("report: profile " + p.id + " has no ledger");
    max_dhat = std::max(max_dhat, led->delta_hat);
  }
  r.epsilon = epsilon.value_or(max_dhat);
  const DiagnosticsReport d = diagnostics(net, stats, table, profiles, eval.x, r.epsilon);
  r.correlation = d.correlation;

  const CompiledNetwork full = compile_full(net);
  const double n = static_cast<double>(eval.x.size());
  for (std::size_t i = 0; i < profiles.size(); ++i) {
    const Profile& p = profiles[i];
    const ProfileDiagnostics& pd = d.profiles[i];
    ReportRow row;
    row.profile = p.id;
    row.accuracy = data_accuracy(net, full, p, eval);
    row.latency_ms = std::numeric_limits<double>::quiet_NaN();
    row.bytes = profile_cost(net, p).total_weight_bytes();
    if (m.lattice)
      for (const LatticeEntry& e : m.lattice->entries)
        if (e.profile.id == p.id) row.latency_ms = e.latency_ms;
    row.delta_hat = find_ledger(m, p.id)->delta_hat;
    row.coverage = pd.coverage;
    row.bound_coverage = 1.0 - static_cast<double>(pd.violations) / n;
    row.violation_pct = 100.0 * (1.0 - pd.coverage);
    row.mean_drift = pd.mean_drift;
    row.p95_drift = pd.p95_drift;
    row.p95_bound = pd.p95_bound;
    r.rows.push_back(row);
  }
  if (m.lattice && !m.lattice->entries.empty()) {
    Vector acc, lat, dh;
    for (std::size_t i = 0; i < m.lattice->entries.size(); ++i) {
      acc.push_back(r.rows[i].accuracy);
      lat.push_back(r.rows[i].latency_ms);
      dh.push_back(r.rows[i].delta_hat);
    }
    r.audit = audit_monotone(acc, lat, dh);
  }
  return r;
}

static const char* kReportHeader =
    "profile,accuracy,latency_ms,bytes,delta_hat,coverage,bound_coverage,violation_pct,mean_drift,p95_drift,p95_bound";

void write_report_csv(std::ostream& os, const Report& r) {
  os << kReportHeader << '\n';
  for (const ReportRow& row : r.rows)
    os << row.profile << ',' << fmt(row.accuracy) << ',' << fmt(row.latency_ms) << ',' << row.bytes << ','
       << fmt(row.delta_hat) << ',' << fmt(row.coverage) << ',' << fmt(row.bound_coverage) << ','
       << fmt(row.violation_pct) << ',' << fmt(row.mean_drift) << ',' << fmt(row.p95_drift) << ','
       << fmt(row.p95_bound) << '\n';
}

std::vector<ReportRow> read_report_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != kReportHeader) throw PipelineError("report csv: unexpected header");
  std::vector<ReportRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 11) throw PipelineError("report csv: wrong field count");
    auto num = [](const std::string& s) {
      char* end = nullptr;
      const double v = std::strtod(s.c_str(), &end);
      if (s.empty() || *end != '\0') throw PipelineError("report csv: bad number " + s);
      return v;
    };
    ReportRow row;
    row.profile = f[0];
    row.accuracy = num(f[1]);
    row.latency_ms = num(f[2]);
    row.bytes = std::stoull(f[3]);
    row.delta_hat = num(f[4]);
    row.coverage = num(f[5]);
    row.bound_coverage = num(f[6]);
    row.violation_pct = num(f[7]);
    row.mean_drift = num(f[8]);
    row.p95_drift = num(f[9]);
    row.p95_bound = num(f[10]);
    rows.push_back(row);
  }
  return rows;
}

void write_report_txt(std::ostream& os, const Report& r) {
  std::ostringstream o;
  o << std::fixed;
  o << "proxy mode: " << r.mode << "   epsilon: " << std::setprecision(6) << r.epsilon << "\n\n";
  o << std::left << std::setw(10) << "profile" << std::right << std::setw(9) << "acc%" << std::setw(12)
    << "lat_ms" << std::setw(10) << "bytes" << std::setw(12) << "delta_hat" << std::setw(10) << "cover%"
    << std::setw(10) << "bound%" << std::setw(9) << "viol%" << std::setw(12) << "p95_drift" << '\n';
  for (const ReportRow& row : r.rows) {
    o << std::left << std::setw(10) << row.profile << std::right << std::setprecision(2) << std::setw(9)
      << 100.0 * row.accuracy << std::setprecision(4) << std::setw(12);
    if (std::isnan(row.latency_ms))
      o << "-";
    else
      o << row.latency_ms;
    o << std::setw(10) << row.bytes << std::setprecision(6) << std::setw(12) << row.delta_hat
      << std::setprecision(2) << std::setw(10) << 100.0 * row.coverage << std::setw(10)
      << 100.0 * row.bound_coverage << std::setw(9) << row.violation_pct << std::setprecision(6)
      << std::setw(12) << row.p95_drift << '\n';
  }
  o << '\n' << "corr(delta_hat, mean drift): ";
  if (r.correlation)
    o << std::setprecision(4) << *r.correlation << '\n';
  else
    o << "undefined\n";
  if (r.audit)
    o << "lattice audit: " << r.audit->pairs << " pairs, latency events " << r.audit->latency_events
      << ", delta events " << r.audit->delta_events << ", accuracy events " << r.audit->accuracy_events << '\n';
  os << o.str();
}

}  // namespace ecomp
