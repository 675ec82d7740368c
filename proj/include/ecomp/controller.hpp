#pragma once

// Budget-conditioned profile control: budget tokens, per-layer menus, snapping,
// budget monotonicity, greedy allocation, a Gumbel-softmax policy head and
// runtime selection over an exported lattice.

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "ecomp/certificate.hpp"
#include "ecomp/cost.hpp"
#include "ecomp/network.hpp"

namespace ecomp {

class ControllerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct BudgetToken {
  std::optional<double> latency_ms;
  std::optional<std::uint64_t> bytes;
  std::optional<double> energy_mj;
  std::string device;

  bool valid() const { return latency_ms || bytes || energy_mj; }
};

// a ≼ b: same device, same targets present, each target of a ≤ that of b.
bool budget_leq(const BudgetToken& a, const BudgetToken& b);

// A layer's deployable choices as a chain, strictly increasing under choice_leq.
using Menu = std::vector<LayerChoice>;

// Effective bit-width used on normalized scales; full precision counts as 32.
inline int effective_q(int q) { return q > 0 ? q : 32; }

// `entries` ranks spread evenly over [k_min, k_max] with rank-tied bits from
// `map`; optionally topped by (k_max, full precision).
std::vector<Menu> build_menus(const Network& net, std::size_t entries, const BitMap& map,
                              bool include_full = true);
void validate_menus(const Network& net, const std::vector<Menu>& menus);

// Layers that must move together: tied groups in order of first appearance.
std::vector<std::vector<std::size_t>> budget_units(const Network& net);

Profile profile_from_indices(const std::vector<Menu>& menus, const std::vector<std::size_t>& layer_index,
                             std::string id = {});

// Per-layer certificate mass L̂_ℓ·‖ΔW_ℓ(k, q)‖₂·α_ℓ for every menu entry.
std::vector<Vector> certificate_mass(const Network& net, const std::vector<Menu>& menus,
                                     const LipschitzTable& table, const CalibrationStats& stats);

struct SnapOptions {
  double beta = 1.0;
  // drift[ℓ][i] is entry i's certificate contribution; entries above the
  // layer's tolerance are skipped upward.
  std::optional<std::vector<Vector>> drift;
  std::optional<Vector> tolerance;
};

struct Proposal {
  double k = 0.0;
  double q = 0.0;  // effective bits
};

// Nearest entry under |k−k̂|/k_max + β|q−q̂|/q_ref (q_ref the menu's largest
// effective q); ties go to the larger entry. Tied layers take their group's
// largest index. Returns menu indices per layer.
std::vector<std::size_t> snap_indices(const Network& net, const std::vector<Proposal>& proposal,
                                      const std::vector<Menu>& menus, const SnapOptions& opts = {});
Profile snap(const Network& net, const std::vector<Proposal>& proposal, const std::vector<Menu>& menus,
             const SnapOptions& opts = {});
// ε times each layer's share of the reference certificate terms (uniform if all zero).
Vector snap_tolerances(const Vector& reference_terms, double epsilon);

struct MonotoneResult {
  std::vector<Profile> assignments;  // one per budget, componentwise non-decreasing
  std::vector<Profile> lattice;      // distinct kept profiles, ascending
  std::vector<std::size_t> lattice_index;  // budget → lattice entry
  std::size_t raised = 0;   // budgets changed by the running maximum
  std::size_t dropped = 0;  // distinct profiles removed by pruning
};

// Running componentwise maximum over the budget-ordered assignments (the
// smallest upward correction), then pruning of distinct profiles whose Δ̂
// exceeds, or whose latency falls below, the last kept profile. Budgets on a
// pruned profile fall back to the last kept one.
MonotoneResult enforce_monotone(const std::vector<Profile>& assignments,
                                const std::function<double(const Profile&)>& delta_hat = {},
                                const std::function<double(const Profile&)>& latency = {});

// Generic greedy allocation over units with chain menus.
struct KnapsackProblem {
  std::vector<std::size_t> menu_size;  // per unit
  std::vector<Vector> mass;            // [unit][index], lower is better
  // Cost per active target for a full index vector; compared with `limit`.
  std::function<Vector(const std::vector<std::size_t>&)> cost;
  Vector limit;
};

struct KnapsackStep {
  std::size_t unit = 0;
  std::size_t to = 0;
  double ratio = 0.0;
};

struct KnapsackResult {
  std::vector<std::size_t> index;
  bool infeasible = false;
  std::vector<KnapsackStep> trace;
};

bool within(const Vector& cost, const Vector& limit);
// Starts at all-minimum; each step applies the single-unit upgrade with the
// largest Δmass/Δcost (Δcost normalized by the limits, non-positive Δcost
// ranks first, ties to the lower unit) among those that stay within the
// limits. Stops when no upgrade fits.
KnapsackResult greedy_knapsack(const KnapsackProblem& p);

struct PlanContext {
  const Network* net = nullptr;
  std::vector<Menu> menus;
  CostModel latency;
  std::optional<CostModel> energy;
  std::vector<Vector> mass;  // certificate_mass(...)
};

// Knapsack over the network's budget units for one budget token. The cost
// callback refers to `ctx`, which must outlive the problem.
KnapsackProblem make_knapsack(const PlanContext& ctx, const BudgetToken& budget);
Profile plan_profile(const PlanContext& ctx, const BudgetToken& budget, bool* infeasible = nullptr);

struct LatticeEntry {
  Profile profile;
  double latency_ms = 0.0;
  std::optional<double> energy_mj;
  std::uint64_t bytes = 0;
  double delta_hat = 0.0;
  std::optional<double> measured_latency_ms;
};

struct ProfileLattice {
  std::string device_id;
  std::vector<LatticeEntry> entries;  // ascending

  bool totally_ordered() const;
};

enum class SelectStatus { Ok, CertWarning, Infeasible };
const char* to_string(SelectStatus s);

struct Selection {
  std::size_t index = 0;
  SelectStatus status = SelectStatus::Ok;
};

// argmin latency subject to every present budget target and Δ̂ ≤ ε; ties to
// the lower index. No feasible entry: lowest latency with CertWarning. A
// device mismatch or an energy target without energy predictions:
// lowest latency with Infeasible.
Selection select_runtime(const ProfileLattice& lattice, const BudgetToken& budget, double epsilon);
// One step tighter, clamped at the first entry.
std::size_t downshift(const ProfileLattice& lattice, std::size_t current);

struct AuditResult {
  std::size_t pairs = 0;
  std::size_t accuracy_events = 0;  // looser budget, lower accuracy
  std::size_t latency_events = 0;   // looser budget, lower latency
  std::size_t delta_events = 0;     // looser budget, higher Δ̂
  double violation_percent = 0.0;   // pairs with any event
};

// Scans adjacent pairs of a budget-ascending sequence. Empty vectors skip
// that check.
AuditResult audit_monotone(const Vector& accuracy, const Vector& latency, const Vector& delta_hat);

// Isotonic hinge λ Σ_ℓ max(0, k_ℓ(b₁)−k_ℓ(b₂)) + max(0, q_ℓ(b₁)−q_ℓ(b₂)) on
// expected assignments for b₁ ≼ b₂.
struct HingeResult {
  double value = 0.0;
  Vector dk1, dq1, dk2, dq2;
};
HingeResult isotonic_hinge(const std::vector<Proposal>& a1, const std::vector<Proposal>& a2, double lambda);

// Two-layer perceptron mapping [budget features ⊕ device embedding ⊕ summary]
// to one logit row per layer menu.
struct PolicyHead {
  BudgetToken reference;             // normalizers for the budget scalars
  std::vector<std::string> devices;  // rows of device_embed
  Matrix device_embed;               // devices × 4
  std::size_t summary_dim = 0;
  Matrix w1, b1;                     // H × F, 1 × H
  std::vector<Matrix> w2, b2;        // per layer: |P_ℓ| × H, 1 × |P_ℓ|
  double tau = 1.0;

  std::size_t feature_dim() const { return 6 + device_embed.cols() + summary_dim; }
};

PolicyHead make_policy_head(const std::vector<std::size_t>& menu_sizes, const std::vector<std::string>& devices,
                            const BudgetToken& reference, std::size_t hidden, std::size_t summary_dim,
                            std::uint64_t seed);

// [lat/ref, bytes/ref, energy/ref, present flags ×3] (absent targets give 0).
Vector budget_features(const PolicyHead& head, const BudgetToken& b);

struct PolicyOutput {
  std::vector<std::size_t> choice;
  std::vector<Vector> probs;  // soft distribution (Train) or softmax of logits (Eval)
};

enum class PolicyMode { Train, Eval };

// Eval: argmax of the logits, deterministic. Train: one-hot of
// argmax((logits + Gumbel)/τ) with the matching soft distribution.
PolicyOutput policy_forward(const PolicyHead& head, const BudgetToken& b, const Vector& summary,
                            PolicyMode mode, std::mt19937_64* rng = nullptr);
std::vector<Vector> policy_logits(const PolicyHead& head, const BudgetToken& b, const Vector& summary);

struct PolicyTables {
  double base_latency = 0.0;
  std::vector<Vector> latency;  // [layer][entry] additive latency share
  std::vector<Vector> mass;     // [layer][entry] certificate mass
  std::vector<Vector> k;        // [layer][entry]
  std::vector<Vector> q;        // [layer][entry] effective bits
};

PolicyTables policy_tables(const PlanContext& ctx);

struct PolicyTrainConfig {
  std::size_t steps = 300;
  double lr = 0.05;
  double momentum = 0.9;
  double lambda_budget = 1.0;
  double lambda_cert = 1.0;
  double lambda_iso = 1.0;
  double tau0 = 2.0, tau_min = 0.3;
  std::uint64_t seed = 0;
};

// Trains on budget-ascending latency tokens with the straight-through
// relaxation: hinge(latency/target − 1), certificate mass, and the isotonic
// hinge over adjacent tokens. Returns the loss per step.
Vector train_policy(PolicyHead& head, const PolicyTables& tables, const std::vector<BudgetToken>& budgets,
                    const PolicyTrainConfig& cfg);

}  // namespace ecomp
