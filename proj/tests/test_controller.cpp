#include <cmath>
#include <map>
#include <random>

#include "doctest.h"
#include "ecomp/controller.hpp"
#include "ecomp/synth.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace ecomp;
using ecomp::testing::additive_problem;
using ecomp::testing::oracle_trace;

namespace {

Menu chain(std::initializer_list<std::pair<std::size_t, int>> entries) {
  Menu m;
  for (auto [k, q] : entries) m.push_back({k, FactorBits::uniform(q)});
  return m;
}

ProfileLattice toy_lattice() {
  ProfileLattice lat;
  lat.device_id = "dev";
  const double lats[] = {1.0, 2.0, 3.0};
  const double deltas[] = {0.5, 0.2, 0.0};
  for (int j = 0; j < 3; ++j) {
    LatticeEntry e;
    e.profile = {"p" + std::to_string(j), {{static_cast<std::size_t>(j + 1), {}}}};
    e.latency_ms = lats[j];
    e.energy_mj = 10.0 * lats[j];
    e.bytes = 100 * static_cast<std::uint64_t>(j + 1);
    e.delta_hat = deltas[j];
    lat.entries.push_back(e);
  }
  return lat;
}

}  // namespace

TEST_CASE("budget tokens: partial order") {
  const BudgetToken a{1.0, std::nullopt, std::nullopt, "d"};
  const BudgetToken b{2.0, std::nullopt, std::nullopt, "d"};
  CHECK(budget_leq(a, b));
  CHECK_FALSE(budget_leq(b, a));
  CHECK(budget_leq(a, a));
  BudgetToken c = b;
  c.device = "e";
  CHECK_FALSE(budget_leq(a, c));
  BudgetToken d = b;
  d.bytes = 10;
  CHECK_FALSE(budget_leq(a, d));
  CHECK_FALSE(BudgetToken{}.valid());
}

TEST_CASE("menus: rank-tied chains") {
  const Network net = random_dense_network({.widths = {8, 12, 12, 3}, .seed = 60});
  const BitMap map{.a = 1.0, .b = 3.0, .q_max = 8};
  const auto menus = build_menus(net, 4, map);
  for (std::size_t l = 0; l < menus.size(); ++l) {
    CHECK(menus[l].back().k == net.blocks[l].layer.k_max());
    CHECK_FALSE(menus[l].back().bits.quantized());
    for (std::size_t i = 1; i < menus[l].size(); ++i) CHECK(choice_leq(menus[l][i - 1], menus[l][i]));
  }
  std::vector<Menu> bad = menus;
  std::swap(bad[0][0], bad[0][1]);
  CHECK_THROWS_AS(validate_menus(net, bad), ControllerError);
}

TEST_CASE("snap: fixed point, midpoint tie, escalation, tied groups") {
  Network net = random_dense_network({.widths = {8, 8, 8, 2}, .seed = 61});
  std::vector<Menu> menus(3, chain({{2, 4}, {4, 8}, {8, 0}}));
  menus[2] = chain({{1, 4}, {2, 8}});
  std::vector<Proposal> on = {{4, 8}, {2, 4}, {2, 8}};
  const auto idx = snap_indices(net, on, menus);
  CHECK(idx == std::vector<std::size_t>{1, 0, 1});

  // Midway between (2,4) and (4,8) in both coordinates: equal distance.
  const auto mid = snap_indices(net, {{3, 6}, {3, 6}, {1, 4}}, menus);
  CHECK(mid[0] == 1);
  CHECK(mid[1] == 1);

  SnapOptions opts;
  opts.drift = std::vector<Vector>{{0.9, 0.1, 0.0}, {0.1, 0.05, 0.0}, {0.0, 0.0}};
  opts.tolerance = Vector{0.5, 0.5, 0.5};
  const auto esc = snap_indices(net, {{2, 4}, {2, 4}, {1, 4}}, menus, opts);
  CHECK(esc[0] == 1);
  CHECK(esc[1] == 0);
  opts.tolerance = Vector{-1.0, 0.5, 0.5};
  CHECK_THROWS_AS(snap_indices(net, {{2, 4}, {2, 4}, {1, 4}}, menus, opts), ControllerError);

  net.blocks[0].layer.set_group_id("g");
  net.blocks[1].layer.set_group_id("g");
  const auto tied = snap_indices(net, {{2, 4}, {8, 32}, {1, 4}}, menus);
  CHECK(tied[0] == 2);
  CHECK(tied[1] == 2);

  const Vector tol = snap_tolerances({1.0, 3.0}, 0.4);
  CHECK(tol[0] == doctest::Approx(0.1));
  CHECK(tol[1] == doctest::Approx(0.3));
  CHECK(snap_tolerances({0.0, 0.0}, 0.4)[1] == doctest::Approx(0.2));
}

TEST_CASE("snap: outputs are always menu members") {
  const Network net = random_dense_network({.widths = {6, 9, 7, 3}, .seed = 62});
  const auto menus = build_menus(net, 3, {.a = 1.0, .b = 2.0, .q_max = 8});
  std::mt19937_64 rng(63);
  std::uniform_real_distribution<double> u(0.0, 40.0);
  for (int t = 0; t < 500; ++t) {
    std::vector<Proposal> p;
    for (int l = 0; l < 3; ++l) p.push_back({u(rng) / 4, u(rng)});
    const Profile s = snap(net, p, menus);
    for (std::size_t l = 0; l < 3; ++l)
      CHECK(std::find(menus[l].begin(), menus[l].end(), s.layers[l]) != menus[l].end());
  }
}

TEST_CASE("enforce_monotone: running maximum, pruning, audit") {
  auto prof = [](std::size_t k) { return Profile{"", {{k, FactorBits::uniform(8)}}}; };
  const MonotoneResult r = enforce_monotone({prof(4), prof(3), prof(5)});
  CHECK(r.assignments[1].layers[0].k == 4);
  CHECK(r.assignments[2].layers[0].k == 5);
  CHECK(r.raised == 1);
  CHECK(r.lattice.size() == 2);
  CHECK(r.lattice_index == std::vector<std::size_t>{0, 0, 1});

  const MonotoneResult same = enforce_monotone({prof(1), prof(2), prof(3)});
  CHECK(same.raised == 0);
  CHECK(same.lattice.size() == 3);

  // Δ̂ that rises at k=2 drops that profile; its budgets fall back to k=1.
  const MonotoneResult pruned = enforce_monotone(
      {prof(1), prof(2), prof(3)}, [](const Profile& p) { return p.layers[0].k == 2 ? 9.0 : 1.0 / p.layers[0].k; });
  CHECK(pruned.dropped == 1);
  CHECK(pruned.lattice.size() == 2);
  CHECK(pruned.assignments[1].layers[0].k == 1);

  std::mt19937_64 rng(64);
  std::uniform_int_distribution<std::size_t> dk(1, 8);
  std::vector<Profile> raw;
  for (int i = 0; i < 300; ++i) raw.push_back(Profile{"", {{dk(rng), {}}, {dk(rng), FactorBits::uniform(4)}}});
  const MonotoneResult m = enforce_monotone(raw);
  for (std::size_t i = 1; i < m.assignments.size(); ++i) CHECK(profile_leq(m.assignments[i - 1], m.assignments[i]));
}

TEST_CASE("audit_monotone: planted events") {
  CHECK(audit_monotone({}, {1.0}, {}).pairs == 0);
  const AuditResult clean = audit_monotone({0.5, 0.6, 0.6}, {1, 2, 3}, {0.3, 0.2, 0.2});
  CHECK(clean.latency_events + clean.delta_events + clean.accuracy_events == 0);
  const AuditResult swapped = audit_monotone({}, {1, 3, 2, 4}, {});
  CHECK(swapped.latency_events == 1);
  CHECK(swapped.violation_percent == doctest::Approx(100.0 / 3.0));
  CHECK(audit_monotone({0.9, 0.8}, {}, {0.1, 0.2}).delta_events == 1);
  CHECK_THROWS_AS(audit_monotone({1, 2}, {1}, {}), ControllerError);
}

TEST_CASE("greedy_knapsack: trivial budgets and the infeasible flag") {
  const KnapsackProblem p = additive_problem({{1, 2, 4}, {1, 3, 5}}, {{5, 3, 2}, {6, 2, 1}}, 1e9);
  CHECK(greedy_knapsack(p).index == std::vector<std::size_t>{2, 2});
  const KnapsackProblem tight = additive_problem({{1, 2, 4}, {1, 3, 5}}, {{5, 3, 2}, {6, 2, 1}}, 2.0);
  const KnapsackResult r = greedy_knapsack(tight);
  CHECK(r.index == std::vector<std::size_t>{0, 0});
  CHECK_FALSE(r.infeasible);
  const KnapsackResult bad = greedy_knapsack(additive_problem({{1, 2}, {1, 3}}, {{1, 0}, {1, 0}}, 1.5));
  CHECK(bad.infeasible);
  CHECK(bad.index == std::vector<std::size_t>{0, 0});
}

TEST_CASE("greedy_knapsack: 2-layer hand-set toy equals exhaustive optimum") {
  // Unit-cost steps with diminishing returns: greedy is optimal here.
  const std::vector<Vector> cost = {{0, 1, 2, 3}, {0, 1, 2, 3}};
  const std::vector<Vector> mass = {{10, 4, 2, 1}, {9, 6, 4.5, 4}};
  for (double limit : {0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0}) {
    const KnapsackResult g = greedy_knapsack(additive_problem(cost, mass, limit));
    double best = INFINITY;
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j)
        if (cost[0][i] + cost[1][j] <= limit) best = std::min(best, mass[0][i] + mass[1][j]);
    CHECK(mass[0][g.index[0]] + mass[1][g.index[1]] == best);
  }
}

TEST_CASE("greedy_knapsack: trace matches the enumeration oracle; result is maximal") {
  std::mt19937_64 rng(65);
  std::uniform_real_distribution<double> u(0.1, 1.0);
  for (int inst = 0; inst < 10; ++inst) {
    const std::size_t U = 3 + inst % 2;
    std::vector<Vector> cost(U), mass(U);
    double total = 0.0;
    for (std::size_t k = 0; k < U; ++k) {
      double c = u(rng), m = 5.0 + u(rng);
      for (std::size_t i = 0; i < 5; ++i) {
        cost[k].push_back(c);
        mass[k].push_back(m);
        c += u(rng);
        m -= u(rng);
      }
      total += cost[k].back();
    }
    const KnapsackProblem p = additive_problem(cost, mass, 0.6 * total);
    const KnapsackResult g = greedy_knapsack(p);
    std::vector<std::size_t> oracle_idx;
    const auto trace = oracle_trace(p, &oracle_idx);
    CHECK(g.index == oracle_idx);
    REQUIRE(g.trace.size() == trace.size());
    for (std::size_t s = 0; s < trace.size(); ++s) {
      CHECK(g.trace[s].unit == trace[s].unit);
      CHECK(g.trace[s].to == trace[s].to);
    }
    CHECK(within(p.cost(g.index), p.limit));
    for (std::size_t k = 0; k < U; ++k)
      if (g.index[k] + 1 < 5) {
        auto up = g.index;
        ++up[k];
        CHECK_FALSE(within(p.cost(up), p.limit));
      }
  }
}

TEST_CASE("plan_profile: respects the cost model budget on a network") {
  const Network net = random_dense_network({.widths = {8, 16, 16, 3}, .seed = 66});
  PlanContext ctx;
  ctx.net = &net;
  ctx.menus = build_menus(net, 4, {.a = 1.0, .b = 3.0, .q_max = 8});
  std::vector<Profile> grid;
  std::vector<ProfileCost> costs;
  std::mt19937_64 rng(67);
  for (int i = 0; i < 40; ++i) {
    Profile p = random_profile(net, rng, {0, 3, 4, 8});
    p.id = "g" + std::to_string(i);
    costs.push_back(profile_cost(net, p));
  }
  const SyntheticDevice dev = make_synthetic_device("dev", 3, 68, 0.0);
  ctx.latency = fit_cost_model(synthesize_table(dev, costs, 69), costs);
  std::vector<Vector> xs;
  for (int i = 0; i < 20; ++i) xs.push_back(random_input(8, rng));
  ctx.mass = certificate_mass(net, ctx.menus, lipschitz_proxy(net, {}), calibrate(net, xs));

  const Profile lo = profile_from_indices(ctx.menus, {0, 0, 0});
  const Profile hi = profile_from_indices(ctx.menus, {ctx.menus[0].size() - 1, ctx.menus[1].size() - 1, ctx.menus[2].size() - 1});
  const double lmin = predict(ctx.latency, profile_cost(net, lo)), lmax = predict(ctx.latency, profile_cost(net, hi));
  std::vector<Profile> assigned;
  for (int i = 0; i <= 20; ++i) {
    const double target = lmin + (lmax - lmin) * i / 20.0;
    bool infeasible = true;
    const Profile p = plan_profile(ctx, {target, std::nullopt, std::nullopt, "dev"}, &infeasible);
    CHECK_FALSE(infeasible);
    CHECK(predict(ctx.latency, profile_cost(net, p)) <= target);
    assigned.push_back(p);
  }
  CHECK(assigned.front() == lo);
  CHECK(assigned.back() == hi);
  bool infeasible = false;
  plan_profile(ctx, {lmin * 0.5, std::nullopt, std::nullopt, "dev"}, &infeasible);
  CHECK(infeasible);
  CHECK_THROWS_AS(plan_profile(ctx, {std::nullopt, std::nullopt, 1.0, "dev"}), ControllerError);
}

TEST_CASE("select_runtime and downshift") {
  const ProfileLattice lat = toy_lattice();
  CHECK(lat.totally_ordered());
  Selection s = select_runtime(lat, {10.0, std::nullopt, std::nullopt, ""}, 1.0);
  CHECK(s.index == 0);
  CHECK(s.status == SelectStatus::Ok);
  s = select_runtime(lat, {10.0, std::nullopt, std::nullopt, "dev"}, 0.0);
  CHECK(s.index == 2);
  CHECK(s.status == SelectStatus::Ok);
  s = select_runtime(lat, {0.5, std::nullopt, std::nullopt, "dev"}, 1.0);
  CHECK(s.index == 0);
  CHECK(s.status == SelectStatus::CertWarning);
  s = select_runtime(lat, {2.5, 150u, std::nullopt, "dev"}, 1.0);
  CHECK(s.index == 0);
  s = select_runtime(lat, {10.0, std::nullopt, std::nullopt, "other"}, 1.0);
  CHECK(s.status == SelectStatus::Infeasible);
  ProfileLattice no_energy = lat;
  for (auto& e : no_energy.entries) e.energy_mj.reset();
  CHECK(select_runtime(no_energy, {std::nullopt, std::nullopt, 5.0, ""}, 1.0).status == SelectStatus::Infeasible);

  ProfileLattice tie = lat;
  tie.entries[1].latency_ms = 1.0;
  tie.entries[0].delta_hat = 0.2;
  CHECK(select_runtime(tie, {10.0, std::nullopt, std::nullopt, ""}, 0.3).index == 0);

  CHECK(downshift(lat, 0) == 0);
  CHECK(downshift(lat, 2) == 1);
  std::size_t j = 2;
  for (int i = 0; i < 2; ++i) j = downshift(lat, j);
  CHECK(j == 0);
}

TEST_CASE("isotonic hinge: values and flat side") {
  const HingeResult a = isotonic_hinge({{3, 4}}, {{5, 8}}, 0.7);
  CHECK(a.value == 0.0);
  CHECK(a.dk1[0] == 0.0);
  const HingeResult b = isotonic_hinge({{5, 4}}, {{3, 8}}, 0.7);
  CHECK(b.value == doctest::Approx(1.4));
  CHECK(b.dk1[0] == 0.7);
  CHECK(b.dk2[0] == -0.7);
}

TEST_CASE("policy head: eval determinism and sampling frequencies") {
  BudgetToken ref{10.0, std::nullopt, std::nullopt, "dev"};
  PolicyHead h = make_policy_head({2, 3}, {"dev"}, ref, 8, 0, 70);
  const BudgetToken b{5.0, std::nullopt, std::nullopt, "dev"};
  const PolicyOutput e1 = policy_forward(h, b, {}, PolicyMode::Eval);
  const PolicyOutput e2 = policy_forward(h, b, {}, PolicyMode::Eval);
  CHECK(e1.choice == e2.choice);
  for (const Vector& p : e1.probs) {
    double s = 0.0;
    for (double v : p) s += v;
    CHECK(s == doctest::Approx(1.0));
  }

  for (Matrix& w : h.w2) w = Matrix(w.rows(), w.cols(), 0.0);
  h.b2[0](0, 0) = 5.0;
  h.tau = 0.01;
  std::mt19937_64 rng(71);
  int hits = 0, counts[3] = {0, 0, 0};
  const int N = 10000;
  for (int i = 0; i < N; ++i) {
    const PolicyOutput o = policy_forward(h, b, {}, PolicyMode::Train, &rng);
    hits += o.choice[0] == 0;
    ++counts[o.choice[1]];
  }
  CHECK(hits > 0.99 * N);
  const double sd = std::sqrt(N * (1.0 / 3) * (2.0 / 3));
  for (int c : counts) CHECK(std::abs(c - N / 3.0) <= 3 * sd);
}

TEST_CASE("policy head: training lowers the loss and orders budgets") {
  const Network net = random_dense_network({.widths = {8, 16, 16, 3}, .seed = 72});
  PlanContext ctx;
  ctx.net = &net;
  ctx.menus = build_menus(net, 4, {.a = 1.0, .b = 3.0, .q_max = 8});
  std::mt19937_64 rng(73);
  std::vector<ProfileCost> costs;
  for (int i = 0; i < 40; ++i) {
    Profile p = random_profile(net, rng, {0, 3, 4, 8});
    p.id = "g" + std::to_string(i);
    costs.push_back(profile_cost(net, p));
  }
  ctx.latency = fit_cost_model(synthesize_table(make_synthetic_device("dev", 3, 74, 0.0), costs, 75), costs);
  std::vector<Vector> xs;
  for (int i = 0; i < 20; ++i) xs.push_back(random_input(8, rng));
  ctx.mass = certificate_mass(net, ctx.menus, lipschitz_proxy(net, {}), calibrate(net, xs));
  const PolicyTables t = policy_tables(ctx);
  double lmin = t.base_latency, lmax = t.base_latency;
  for (const Vector& v : t.latency) {
    lmin += v.front();
    lmax += v.back();
  }
  std::vector<BudgetToken> budgets;
  for (int i = 0; i < 5; ++i) budgets.push_back({lmin + (lmax - lmin) * (0.1 + 0.2 * i), std::nullopt, std::nullopt, "dev"});
  std::vector<std::size_t> sizes;
  for (const Menu& m : ctx.menus) sizes.push_back(m.size());
  PolicyHead h = make_policy_head(sizes, {"dev"}, {lmax, std::nullopt, std::nullopt, "dev"}, 16, 0, 76);
  const Vector loss = train_policy(h, t, budgets, {.steps = 400, .lr = 0.02, .seed = 77});
  double first = 0, last = 0;
  for (int i = 0; i < 40; ++i) {
    first += loss[i];
    last += loss[loss.size() - 1 - i];
  }
  CHECK(last < first);
  // Eval choices, raised to a monotone sequence, stay members of the menus.
  std::vector<Profile> eval;
  for (const BudgetToken& b : budgets) {
    const PolicyOutput o = policy_forward(h, b, {}, PolicyMode::Eval);
    eval.push_back(profile_from_indices(ctx.menus, o.choice));
  }
  const MonotoneResult m = enforce_monotone(eval);
  for (std::size_t i = 1; i < m.assignments.size(); ++i) CHECK(profile_leq(m.assignments[i - 1], m.assignments[i]));
}
