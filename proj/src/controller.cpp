#include "ecomp/controller.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "ecomp/autodiff.hpp"

namespace ecomp {

namespace {

bool same_choice(const LayerChoice& a, const LayerChoice& b) { return a.k == b.k && a.bits == b.bits; }

bool same_layers(const Profile& a, const Profile& b) {
  if (a.layers.size() != b.layers.size()) return false;
  for (std::size_t i = 0; i < a.layers.size(); ++i)
    if (!same_choice(a.layers[i], b.layers[i])) return false;
  return true;
}

int max_bits(int a, int b) { return bit_rank(a) >= bit_rank(b) ? a : b; }

double gumbel(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double x = u(rng);
  while (x <= 0.0) x = u(rng);
  return -std::log(-std::log(x));
}

Vector softmax(const Vector& z) {
  const double m = *std::max_element(z.begin(), z.end());
  Vector p(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) s += (p[i] = std::exp(z[i] - m));
  for (double& v : p) v /= s;
  return p;
}

std::size_t argmax(const Vector& z) {
  return static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
}

Matrix random_init(std::size_t r, std::size_t c, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, stddev);
  Matrix m(r, c);
  for (double& v : m.data()) v = n(rng);
  return m;
}

}  // namespace

bool budget_leq(const BudgetToken& a, const BudgetToken& b) {
  if (a.device != b.device) return false;
  if (a.latency_ms.has_value() != b.latency_ms.has_value() || a.bytes.has_value() != b.bytes.has_value() ||
      a.energy_mj.has_value() != b.energy_mj.has_value())
    return false;
  if (a.latency_ms && *a.latency_ms > *b.latency_ms) return false;
  if (a.bytes && *a.bytes > *b.bytes) return false;
  if (a.energy_mj && *a.energy_mj > *b.energy_mj) return false;
  return true;
}

std::vector<Menu> build_menus(const Network& net, std::size_t entries, const BitMap& map, bool include_full) {
  if (entries == 0) throw ControllerError("build_menus: need at least one entry");
  std::vector<Menu> menus;
  for (const Block& b : net.blocks) {
    const std::size_t lo = b.layer.k_min(), hi = b.layer.k_max();
    Menu m;
    for (std::size_t i = 0; i < entries; ++i) {
      const std::size_t k =
          entries == 1 ? hi
                       : lo + static_cast<std::size_t>(std::llround(static_cast<double>((hi - lo) * i) /
                                                                    static_cast<double>(entries - 1)));
      const LayerChoice c{k, map.bits(k)};
      if (!m.empty() && same_choice(m.back(), c)) continue;
      m.push_back(c);
    }
    if (include_full && m.back().bits.quantized()) m.push_back({hi, {}});
    menus.push_back(std::move(m));
  }
  validate_menus(net, menus);
  return menus;
}

void validate_menus(const Network& net, const std::vector<Menu>& menus) {
  if (menus.size() != net.blocks.size()) throw ControllerError("menus: one menu per layer required");
  for (std::size_t l = 0; l < menus.size(); ++l) {
    const Menu& m = menus[l];
    if (m.empty()) throw ControllerError("menus: layer " + std::to_string(l) + " has an empty menu");
    for (std::size_t i = 0; i < m.size(); ++i) {
      net.blocks[l].layer.check_rank(m[i].k);
      for (int q : {m[i].bits.u, m[i].bits.core, m[i].bits.v})
        if (q != 0 && (q < 2 || q > 31)) throw ControllerError("menus: invalid bit-width");
      if (i > 0 && (!choice_leq(m[i - 1], m[i]) || same_choice(m[i - 1], m[i])))
        throw ControllerError("menus: layer " + std::to_string(l) + " is not a strictly increasing chain");
    }
  }
  for (const auto& unit : budget_units(net)) {
    const Menu& first = menus[unit.front()];
    for (std::size_t l : unit) {
      if (menus[l].size() != first.size()) throw ControllerError("menus: tied layers need equal menu sizes");
      for (std::size_t i = 0; i < first.size(); ++i)
        if (menus[l][i].k != first[i].k) throw ControllerError("menus: tied layers need equal ranks");
    }
  }
}

std::vector<std::vector<std::size_t>> budget_units(const Network& net) {
  std::vector<std::vector<std::size_t>> units;
  std::map<std::string, std::size_t> group_unit;
  for (std::size_t l = 0; l < net.blocks.size(); ++l) {
    const auto& g = net.blocks[l].layer.group_id();
    if (g) {
      const auto [it, fresh] = group_unit.emplace(*g, units.size());
      if (fresh) units.emplace_back();
      units[it->second].push_back(l);
    } else {
      units.push_back({l});
    }
  }
  return units;
}

Profile profile_from_indices(const std::vector<Menu>& menus, const std::vector<std::size_t>& layer_index,
                             std::string id) {
  if (layer_index.size() != menus.size()) throw ControllerError("profile_from_indices: size mismatch");
  Profile p;
  p.id = std::move(id);
  for (std::size_t l = 0; l < menus.size(); ++l) p.layers.push_back(menus[l].at(layer_index[l]));
  return p;
}

std::vector<Vector> certificate_mass(const Network& net, const std::vector<Menu>& menus,
                                     const LipschitzTable& table, const CalibrationStats& stats) {
  if (stats.fingerprint != fingerprint(net)) throw CertificateError("calibration statistics are stale");
  std::vector<Vector> mass(menus.size());
  for (std::size_t l = 0; l < menus.size(); ++l)
    for (const LayerChoice& c : menus[l])
      mass[l].push_back(table.lhat[l] * residual_norm(net.blocks[l].layer, c.k, c.bits) * stats.alpha[l]);
  return mass;
}

std::vector<std::size_t> snap_indices(const Network& net, const std::vector<Proposal>& proposal,
                                      const std::vector<Menu>& menus, const SnapOptions& opts) {
  validate_menus(net, menus);
  if (proposal.size() != menus.size()) throw ControllerError("snap: one proposal per layer required");
  const bool safety = opts.drift && opts.tolerance;
  std::vector<std::size_t> idx(menus.size());
  for (std::size_t l = 0; l < menus.size(); ++l) {
    const Menu& m = menus[l];
    const double kmax = static_cast<double>(net.blocks[l].layer.k_max());
    int qref = 0;
    for (const LayerChoice& c : m) qref = std::max(qref, effective_q(c.q()));
    double best = std::numeric_limits<double>::infinity();
    std::size_t bi = 0;
    for (std::size_t i = 0; i < m.size(); ++i) {
      const double d = std::abs(static_cast<double>(m[i].k) - proposal[l].k) / kmax +
                       opts.beta * std::abs(effective_q(m[i].q()) - proposal[l].q) / qref;
      if (d <= best + 1e-12) {  // later entries are larger; ties move up
        if (d < best) best = d;
        bi = i;
      }
    }
    if (safety) {
      while (bi < m.size() && (*opts.drift)[l][bi] > (*opts.tolerance)[l]) ++bi;
      if (bi == m.size())
        throw ControllerError("snap: no entry of layer " + std::to_string(l) + " meets its tolerance");
    }
    idx[l] = bi;
  }
  for (const auto& unit : budget_units(net)) {
    std::size_t top = 0;
    for (std::size_t l : unit) top = std::max(top, idx[l]);
    for (std::size_t l : unit) idx[l] = top;
  }
  return idx;
}

Profile snap(const Network& net, const std::vector<Proposal>& proposal, const std::vector<Menu>& menus,
             const SnapOptions& opts) {
  return profile_from_indices(menus, snap_indices(net, proposal, menus, opts));
}

Vector snap_tolerances(const Vector& reference_terms, double epsilon) {
  double total = 0.0;
  for (double t : reference_terms) total += t;
  Vector tol(reference_terms.size());
  for (std::size_t l = 0; l < tol.size(); ++l)
    tol[l] = total > 0.0 ? epsilon * reference_terms[l] / total
                         : epsilon / static_cast<double>(reference_terms.size());
  return tol;
}

MonotoneResult enforce_monotone(const std::vector<Profile>& assignments,
                                const std::function<double(const Profile&)>& delta_hat,
                                const std::function<double(const Profile&)>& latency) {
  MonotoneResult r;
  for (std::size_t b = 0; b < assignments.size(); ++b) {
    Profile p = assignments[b];
    if (b > 0) {
      const Profile& prev = r.assignments.back();
      if (prev.layers.size() != p.layers.size()) throw ControllerError("enforce_monotone: layer count mismatch");
      bool changed = false;
      for (std::size_t l = 0; l < p.layers.size(); ++l) {
        LayerChoice& c = p.layers[l];
        const LayerChoice& q = prev.layers[l];
        const LayerChoice before = c;
        c.k = std::max(c.k, q.k);
        c.bits = {max_bits(c.bits.u, q.bits.u), max_bits(c.bits.core, q.bits.core), max_bits(c.bits.v, q.bits.v)};
        changed = changed || !same_choice(before, c);
      }
      if (changed) {
        ++r.raised;
        p.id.clear();
      }
    }
    r.assignments.push_back(std::move(p));
  }
  // Distinct profiles in budget order, then pruning.
  std::vector<std::size_t> distinct_of(r.assignments.size());
  std::vector<Profile> distinct;
  for (std::size_t b = 0; b < r.assignments.size(); ++b) {
    if (distinct.empty() || !same_layers(distinct.back(), r.assignments[b])) distinct.push_back(r.assignments[b]);
    distinct_of[b] = distinct.size() - 1;
  }
  std::vector<std::size_t> kept_of(distinct.size());
  double last_delta = 0.0, last_lat = 0.0;
  for (std::size_t i = 0; i < distinct.size(); ++i) {
    const double d = delta_hat ? delta_hat(distinct[i]) : 0.0;
    const double t = latency ? latency(distinct[i]) : 0.0;
    if (!r.lattice.empty() && (d > last_delta || t < last_lat)) {
      ++r.dropped;
      kept_of[i] = r.lattice.size() - 1;
      continue;
    }
    r.lattice.push_back(distinct[i]);
    kept_of[i] = r.lattice.size() - 1;
    last_delta = d;
    last_lat = t;
  }
  for (std::size_t b = 0; b < r.assignments.size(); ++b) {
    const std::size_t li = kept_of[distinct_of[b]];
    r.lattice_index.push_back(li);
    if (!same_layers(r.assignments[b], r.lattice[li])) r.assignments[b] = r.lattice[li];
  }
  return r;
}

bool within(const Vector& cost, const Vector& limit) {
  for (std::size_t t = 0; t < cost.size(); ++t)
    if (cost[t] > limit[t]) return false;
  return true;
}

KnapsackResult greedy_knapsack(const KnapsackProblem& p) {
  const std::size_t U = p.menu_size.size();
  if (p.mass.size() != U) throw ControllerError("knapsack: mass table size mismatch");
  KnapsackResult r;
  r.index.assign(U, 0);
  Vector c = p.cost(r.index);
  if (!within(c, p.limit)) {
    r.infeasible = true;
    return r;
  }
  for (;;) {
    bool found = false;
    KnapsackStep best;
    Vector best_cost;
    for (std::size_t u = 0; u < U; ++u) {
      if (r.index[u] + 1 >= p.menu_size[u]) continue;
      std::vector<std::size_t> cand = r.index;
      ++cand[u];
      Vector cc = p.cost(cand);
      if (!within(cc, p.limit)) continue;
      const double dm = p.mass[u][r.index[u]] - p.mass[u][cand[u]];
      double dc = 0.0;
      for (std::size_t t = 0; t < cc.size(); ++t)
        dc += (cc[t] - c[t]) / (p.limit[t] > 0.0 ? p.limit[t] : 1.0);
      const double ratio = dc <= 0.0 ? std::numeric_limits<double>::infinity() : dm / dc;
      if (!found || ratio > best.ratio) {
        found = true;
        best = {u, cand[u], ratio};
        best_cost = std::move(cc);
      }
    }
    if (!found) break;
    r.index[best.unit] = best.to;
    c = std::move(best_cost);
    r.trace.push_back(best);
  }
  return r;
}

KnapsackProblem make_knapsack(const PlanContext& ctx, const BudgetToken& budget) {
  if (!ctx.net) throw ControllerError("plan: no network");
  if (!budget.valid()) throw ControllerError("plan: budget token has no target");
  if (budget.energy_mj && !ctx.energy) throw ControllerError("plan: energy target without an energy model");
  const Network& net = *ctx.net;
  validate_menus(net, ctx.menus);
  if (ctx.mass.size() != net.blocks.size()) throw ControllerError("plan: certificate mass table size mismatch");
  const auto units = budget_units(net);
  KnapsackProblem p;
  for (const auto& unit : units) {
    p.menu_size.push_back(ctx.menus[unit.front()].size());
    Vector m(p.menu_size.back(), 0.0);
    for (std::size_t l : unit)
      for (std::size_t i = 0; i < m.size(); ++i) m[i] += ctx.mass[l][i];
    p.mass.push_back(std::move(m));
  }
  if (budget.latency_ms) p.limit.push_back(*budget.latency_ms);
  if (budget.bytes) p.limit.push_back(static_cast<double>(*budget.bytes));
  if (budget.energy_mj) p.limit.push_back(*budget.energy_mj);
  p.cost = [&ctx, &net, units, budget](const std::vector<std::size_t>& idx) {
    std::vector<std::size_t> layer_idx(net.blocks.size());
    for (std::size_t u = 0; u < units.size(); ++u)
      for (std::size_t l : units[u]) layer_idx[l] = idx[u];
    const ProfileCost pc = profile_cost(net, profile_from_indices(ctx.menus, layer_idx));
    Vector c;
    if (budget.latency_ms) c.push_back(predict(ctx.latency, pc));
    if (budget.bytes) c.push_back(static_cast<double>(pc.total_weight_bytes()));
    if (budget.energy_mj) c.push_back(predict(*ctx.energy, pc));
    return c;
  };
  return p;
}

Profile plan_profile(const PlanContext& ctx, const BudgetToken& budget, bool* infeasible) {
  const KnapsackProblem p = make_knapsack(ctx, budget);
  const KnapsackResult r = greedy_knapsack(p);
  if (infeasible) *infeasible = r.infeasible;
  const auto units = budget_units(*ctx.net);
  std::vector<std::size_t> layer_idx(ctx.net->blocks.size());
  for (std::size_t u = 0; u < units.size(); ++u)
    for (std::size_t l : units[u]) layer_idx[l] = r.index[u];
  return profile_from_indices(ctx.menus, layer_idx);
}

bool ProfileLattice::totally_ordered() const {
  for (std::size_t i = 1; i < entries.size(); ++i)
    if (!profile_leq(entries[i - 1].profile, entries[i].profile)) return false;
  return true;
}

const char* to_string(SelectStatus s) {
  switch (s) {
    case SelectStatus::Ok: return "ok";
    case SelectStatus::CertWarning: return "cert_warning";
    case SelectStatus::Infeasible: return "infeasible";
  }
  return "?";
}

Selection select_runtime(const ProfileLattice& lattice, const BudgetToken& budget, double epsilon) {
  if (lattice.entries.empty()) throw ControllerError("select_runtime: empty lattice");
  std::size_t lowest = 0;
  for (std::size_t j = 1; j < lattice.entries.size(); ++j)
    if (lattice.entries[j].latency_ms < lattice.entries[lowest].latency_ms) lowest = j;
  bool has_energy = true;
  for (const LatticeEntry& e : lattice.entries) has_energy = has_energy && e.energy_mj.has_value();
  if ((!budget.device.empty() && budget.device != lattice.device_id) || (budget.energy_mj && !has_energy))
    return {lowest, SelectStatus::Infeasible};
  std::optional<std::size_t> best;
  for (std::size_t j = 0; j < lattice.entries.size(); ++j) {
    const LatticeEntry& e = lattice.entries[j];
    if (budget.latency_ms && e.latency_ms > *budget.latency_ms) continue;
    if (budget.bytes && e.bytes > *budget.bytes) continue;
    if (budget.energy_mj && *e.energy_mj > *budget.energy_mj) continue;
    if (e.delta_hat > epsilon) continue;
    if (!best || e.latency_ms < lattice.entries[*best].latency_ms) best = j;
  }
  if (best) return {*best, SelectStatus::Ok};
  return {lowest, SelectStatus::CertWarning};
}

std::size_t downshift(const ProfileLattice& lattice, std::size_t current) {
  if (current >= lattice.entries.size()) throw ControllerError("downshift: index out of range");
  return current == 0 ? 0 : current - 1;
}

AuditResult audit_monotone(const Vector& accuracy, const Vector& latency, const Vector& delta_hat) {
  std::size_t n = 0;
  for (const Vector* v : {&accuracy, &latency, &delta_hat})
    if (!v->empty()) {
      if (n != 0 && v->size() != n) throw ControllerError("audit: sequences differ in length");
      n = v->size();
    }
  AuditResult r;
  if (n < 2) return r;
  r.pairs = n - 1;
  std::size_t bad = 0;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    bool any = false;
    if (!accuracy.empty() && accuracy[i + 1] < accuracy[i]) {
      ++r.accuracy_events;
      any = true;
    }
    if (!latency.empty() && latency[i + 1] < latency[i]) {
      ++r.latency_events;
      any = true;
    }
    if (!delta_hat.empty() && delta_hat[i + 1] > delta_hat[i]) {
      ++r.delta_events;
      any = true;
    }
    bad += any;
  }
  r.violation_percent = 100.0 * static_cast<double>(bad) / static_cast<double>(r.pairs);
  return r;
}

HingeResult isotonic_hinge(const std::vector<Proposal>& a1, const std::vector<Proposal>& a2, double lambda) {
  if (a1.size() != a2.size()) throw ControllerError("isotonic_hinge: layer count mismatch");
  HingeResult h;
  const std::size_t L = a1.size();
  h.dk1.assign(L, 0.0);
  h.dq1.assign(L, 0.0);
  h.dk2.assign(L, 0.0);
  h.dq2.assign(L, 0.0);
  for (std::size_t l = 0; l < L; ++l) {
    if (a1[l].k > a2[l].k) {
      h.value += lambda * (a1[l].k - a2[l].k);
      h.dk1[l] = lambda;
      h.dk2[l] = -lambda;
    }
    if (a1[l].q > a2[l].q) {
      h.value += lambda * (a1[l].q - a2[l].q);
      h.dq1[l] = lambda;
      h.dq2[l] = -lambda;
    }
  }
  return h;
}

PolicyHead make_policy_head(const std::vector<std::size_t>& menu_sizes, const std::vector<std::string>& devices,
                            const BudgetToken& reference, std::size_t hidden, std::size_t summary_dim,
                            std::uint64_t seed) {
  if (devices.empty()) throw ControllerError("policy head: at least one device required");
  if (hidden == 0) throw ControllerError("policy head: hidden width must be positive");
  std::mt19937_64 rng(seed);
  PolicyHead h;
  h.reference = reference;
  h.devices = devices;
  h.summary_dim = summary_dim;
  h.device_embed = random_init(devices.size(), 4, 0.1, rng);
  const std::size_t F = h.feature_dim();
  h.w1 = random_init(hidden, F, 1.0 / std::sqrt(static_cast<double>(F)), rng);
  h.b1 = Matrix(1, hidden, 0.0);
  for (std::size_t n : menu_sizes) {
    if (n == 0) throw ControllerError("policy head: empty menu");
    h.w2.push_back(random_init(n, hidden, 1.0 / std::sqrt(static_cast<double>(hidden)), rng));
    h.b2.emplace_back(1, n, 0.0);
  }
  return h;
}

Vector budget_features(const PolicyHead& head, const BudgetToken& b) {
  auto ratio = [](auto target, auto ref) {
    return ref && *ref > 0 ? static_cast<double>(*target) / static_cast<double>(*ref)
                           : static_cast<double>(*target);
  };
  Vector f(6, 0.0);
  if (b.latency_ms) {
    f[0] = ratio(b.latency_ms, head.reference.latency_ms);
    f[3] = 1.0;
  }
  if (b.bytes) {
    f[1] = ratio(b.bytes, head.reference.bytes);
    f[4] = 1.0;
  }
  if (b.energy_mj) {
    f[2] = ratio(b.energy_mj, head.reference.energy_mj);
    f[5] = 1.0;
  }
  return f;
}

namespace {

std::size_t device_row(const PolicyHead& head, const std::string& device) {
  for (std::size_t i = 0; i < head.devices.size(); ++i)
    if (head.devices[i] == device) return i;
  if (device.empty()) return 0;
  throw ControllerError("policy head: unknown device '" + device + "'");
}

Vector full_features(const PolicyHead& head, const BudgetToken& b, const Vector& summary) {
  if (summary.size() != head.summary_dim) throw ControllerError("policy head: summary size mismatch");
  Vector x = budget_features(head, b);
  const std::size_t row = device_row(head, b.device);
  for (std::size_t j = 0; j < head.device_embed.cols(); ++j) x.push_back(head.device_embed(row, j));
  x.insert(x.end(), summary.begin(), summary.end());
  return x;
}

}  // namespace

std::vector<Vector> policy_logits(const PolicyHead& head, const BudgetToken& b, const Vector& summary) {
  const Vector x = full_features(head, b, summary);
  Vector hdn = matvec(head.w1, x);
  for (std::size_t i = 0; i < hdn.size(); ++i) hdn[i] = std::max(0.0, hdn[i] + head.b1(0, i));
  std::vector<Vector> out;
  for (std::size_t l = 0; l < head.w2.size(); ++l) {
    Vector z = matvec(head.w2[l], hdn);
    for (std::size_t i = 0; i < z.size(); ++i) z[i] += head.b2[l](0, i);
    out.push_back(std::move(z));
  }
  return out;
}

PolicyOutput policy_forward(const PolicyHead& head, const BudgetToken& b, const Vector& summary,
                            PolicyMode mode, std::mt19937_64* rng) {
  if (mode == PolicyMode::Train && !rng) throw ControllerError("policy_forward: Train mode needs an RNG");
  PolicyOutput out;
  for (Vector z : policy_logits(head, b, summary)) {
    if (mode == PolicyMode::Train)
      for (double& v : z) v = (v + gumbel(*rng)) / head.tau;
    out.choice.push_back(argmax(z));
    out.probs.push_back(softmax(z));
  }
  return out;
}

PolicyTables policy_tables(const PlanContext& ctx) {
  const Network& net = *ctx.net;
  validate_menus(net, ctx.menus);
  PolicyTables t;
  t.base_latency = ctx.latency.alpha0;
  for (std::size_t l = 0; l < net.blocks.size(); ++l) {
    Vector lat, k, q;
    for (const LayerChoice& c : ctx.menus[l]) {
      const LayerCost lc = layer_cost(net, l, c);
      lat.push_back(ctx.latency.comp[l] * static_cast<double>(lc.flops) +
                    ctx.latency.mem[l] * static_cast<double>(lc.bytes()));
      k.push_back(static_cast<double>(c.k));
      q.push_back(effective_q(c.q()));
    }
    t.latency.push_back(std::move(lat));
    t.k.push_back(std::move(k));
    t.q.push_back(std::move(q));
  }
  t.mass = ctx.mass;
  return t;
}

Vector train_policy(PolicyHead& head, const PolicyTables& tables, const std::vector<BudgetToken>& budgets,
                    const PolicyTrainConfig& cfg) {
  const std::size_t L = head.w2.size();
  if (tables.latency.size() != L || tables.mass.size() != L) throw ControllerError("train_policy: table size mismatch");
  for (const BudgetToken& b : budgets)
    if (!b.latency_ms || *b.latency_ms <= 0.0) throw ControllerError("train_policy: latency targets required");
  double mass_ref = 0.0, k_ref = 1.0, q_ref = 1.0;
  for (std::size_t l = 0; l < L; ++l) {
    mass_ref += *std::max_element(tables.mass[l].begin(), tables.mass[l].end());
    k_ref = std::max(k_ref, *std::max_element(tables.k[l].begin(), tables.k[l].end()));
    q_ref = std::max(q_ref, *std::max_element(tables.q[l].begin(), tables.q[l].end()));
  }
  if (mass_ref <= 0.0) mass_ref = 1.0;
  auto column = [](const Vector& v) { return Matrix(v.size(), 1, v); };

  std::vector<Matrix*> params = {&head.device_embed, &head.w1, &head.b1};
  for (std::size_t l = 0; l < L; ++l) {
    params.push_back(&head.w2[l]);
    params.push_back(&head.b2[l]);
  }
  std::vector<Matrix> velocity;
  for (Matrix* p : params) velocity.emplace_back(p->rows(), p->cols(), 0.0);
  std::mt19937_64 rng(cfg.seed);
  const std::size_t F = head.feature_dim(), D = head.device_embed.cols();
  Vector losses;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const double tau = anneal_temperature(step, cfg.steps, cfg.tau0, cfg.tau_min);
    Tape tape;
    std::vector<Tape::Id> pid;
    for (Matrix* p : params) pid.push_back(tape.leaf(*p));
    std::optional<Tape::Id> loss;
    auto accumulate = [&](Tape::Id term) { loss = loss ? tape.add(*loss, term) : term; };
    std::vector<std::vector<Tape::Id>> expected_k(budgets.size()), expected_q(budgets.size());
    for (std::size_t bi = 0; bi < budgets.size(); ++bi) {
      const BudgetToken& b = budgets[bi];
      // x = [budget features, device embedding row, summary] via placement matrices.
      Matrix place_b(6, F, 0.0), place_d(D, F, 0.0);
      for (std::size_t i = 0; i < 6; ++i) place_b(i, i) = 1.0;
      for (std::size_t i = 0; i < D; ++i) place_d(i, 6 + i) = 1.0;
      const Vector bf = budget_features(head, b);
      Matrix onehot(1, head.devices.size(), 0.0);
      onehot(0, device_row(head, b.device)) = 1.0;
      Tape::Id x = tape.matmul(tape.constant(Matrix(1, 6, bf)), tape.constant(place_b));
      const Tape::Id dev = tape.matmul(tape.constant(onehot), pid[0]);
      x = tape.add(x, tape.matmul(dev, tape.constant(place_d)));
      const Tape::Id hdn = tape.relu(tape.add(tape.matmul_nt(x, pid[1]), pid[2]));
      Tape::Id lat = tape.constant(Matrix(1, 1, tables.base_latency));
      Tape::Id mass = tape.constant(Matrix(1, 1, 0.0));
      for (std::size_t l = 0; l < L; ++l) {
        const Tape::Id logits = tape.add(tape.matmul_nt(hdn, pid[3 + 2 * l]), pid[4 + 2 * l]);
        Matrix noise(1, head.w2[l].rows());
        for (double& v : noise.data()) v = gumbel(rng);
        const Tape::Id y = tape.gumbel_softmax_st(logits, noise, tau);
        lat = tape.add(lat, tape.matmul(y, tape.constant(column(tables.latency[l]))));
        mass = tape.add(mass, tape.matmul(y, tape.constant(column(tables.mass[l]))));
        const Tape::Id p = tape.softmax_rows(logits);
        expected_k[bi].push_back(tape.scale(tape.matmul(p, tape.constant(column(tables.k[l]))), 1.0 / k_ref));
        expected_q[bi].push_back(tape.scale(tape.matmul(p, tape.constant(column(tables.q[l]))), 1.0 / q_ref));
      }
      const Tape::Id over = tape.relu(tape.add_scalar(tape.scale(lat, 1.0 / *b.latency_ms), -1.0));
      accumulate(tape.scale(over, cfg.lambda_budget / static_cast<double>(budgets.size())));
      accumulate(tape.scale(mass, cfg.lambda_cert / (mass_ref * static_cast<double>(budgets.size()))));
    }
    for (std::size_t bi = 0; bi + 1 < budgets.size(); ++bi)
      for (std::size_t l = 0; l < L; ++l) {
        accumulate(tape.scale(tape.relu(tape.sub(expected_k[bi][l], expected_k[bi + 1][l])), cfg.lambda_iso));
        accumulate(tape.scale(tape.relu(tape.sub(expected_q[bi][l], expected_q[bi + 1][l])), cfg.lambda_iso));
      }
    if (!loss) break;
    tape.backward(*loss);
    losses.push_back(tape.scalar(*loss));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Matrix& g = tape.grad(pid[i]);
      for (std::size_t j = 0; j < g.size(); ++j) {
        velocity[i].data()[j] = cfg.momentum * velocity[i].data()[j] + g.data()[j];
        params[i]->data()[j] -= cfg.lr * velocity[i].data()[j];
      }
    }
  }
  return losses;
}

}  // namespace ecomp
