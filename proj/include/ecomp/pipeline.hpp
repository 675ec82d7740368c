#pragma once

// End-to-end steps over a manifest: certify, plan a lattice against a device
// table, the adjacent-budget audit and the diagnostics report. The CLI is a
// thin shell over these.

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "ecomp/controller.hpp"
#include "ecomp/manifest.hpp"
#include "ecomp/train.hpp"

namespace ecomp {

class PipelineError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

Dataset to_dataset(const ToyData& d);
std::vector<Vector> calibration_rows(const ToyRun& run);

// Exported model of a toy run: calibration on the first calib_n training rows,
// template profiles with conservative ledgers and payloads.
Manifest trained_manifest(const ToyRun& run, std::uint64_t seed);

// Tiny / Med / Max: round(frac·k_max) clamped to the range, rank-tied bits.
std::vector<Profile> fraction_profiles(const Network& net, const Vector& fracs, const BitMap& map);

// Replaces calibration and every ledger. Conservative L̂ covers the tails of
// `extra` plus every profile already in the manifest (lattice included);
// `extra` is appended to the manifest profiles. Lattice Δ̂ and payloads are
// refreshed.
void certify_manifest(Manifest& m, const std::vector<Vector>& calibration, const ProxySpec& spec,
                      const std::vector<Profile>& extra = {});

// L̂ carried by the manifest's ledgers (all ledgers share one table).
LipschitzTable table_from_manifest(const Manifest& m);

// Records resolve against manifest profiles by id, then as profile keys.
std::vector<ProfileCost> device_costs(const Manifest& m, const DeviceTable& t);

// Synthetic device table over the template profiles, the full profile and
// random profiles up to `count`; record ids are profile keys.
DeviceTable synth_device_table(const Network& net, const std::string& device_id, std::uint64_t seed,
                               std::size_t count = 64, double noise_sigma = 0.03);

struct PlanSetup {
  PlanContext ctx;
  LipschitzTable table;
  CalibrationStats stats;
  std::string device_id;
};

// Menus of `entries` ranks per layer with rank-tied bits; latency (and energy,
// if every record carries it) fitted by NNLS.
PlanSetup make_plan_setup(const Manifest& m, const DeviceTable& t, std::size_t entries, const BitMap& map);

// `count` latency targets spaced evenly over (min, max] of the menu range.
std::vector<BudgetToken> latency_ladder(const PlanSetup& s, std::size_t count);

struct PlanOutcome {
  std::vector<Profile> assignments;  // per budget, after enforcement
  std::vector<std::size_t> lattice_index;
  std::vector<bool> infeasible;      // greedy found no in-budget profile
  AuditResult audit;                 // budget order, latency and Δ̂
  std::size_t raised = 0, dropped = 0;
};

// greedy → enforce_monotone → lattice ("L0", "L1", ...) with ledgers and
// payloads written into `m`. Conservative tables are re-derived until the
// lattice they cover is stable.
PlanOutcome plan_lattice(Manifest& m, const PlanSetup& s, const std::vector<BudgetToken>& budgets);

struct AuditOutcome {
  AuditResult result;
  std::size_t distinct_profiles = 0;
  std::size_t infeasible = 0;
};

// `pairs + 1` ascending latency budgets, planned and enforced without touching
// the manifest; accuracy (if data are given) on the labelled set.
AuditOutcome audit_scan(const Manifest& m, const PlanSetup& s, std::size_t pairs, const Dataset* data);

struct ReportRow {
  std::string profile;
  double accuracy = 0.0;  // against labels, or agreement with the full model
  double latency_ms = 0.0;  // NaN when no lattice entry
  std::uint64_t bytes = 0;
  double delta_hat = 0.0;
  double coverage = 0.0;        // drift ≤ ε
  double bound_coverage = 0.0;  // drift ≤ pointwise bound
  double violation_pct = 0.0;   // drift > ε, percent
  double mean_drift = 0.0, p95_drift = 0.0, p95_bound = 0.0;
};

struct Report {
  double epsilon = 0.0;
  std::string mode;
  std::vector<ReportRow> rows;
  std::optional<double> correlation;  // Pearson(Δ̂, mean drift)
  std::optional<AuditResult> audit;   // lattice order
};

// Rows are lattice entries (if any), then remaining manifest profiles. ε
// defaults to the largest Δ̂.
Report build_report(const Manifest& m, const Dataset& eval, std::optional<double> epsilon);
// Columns: profile,accuracy,latency_ms,bytes,delta_hat,coverage,bound_coverage,
// violation_pct,mean_drift,p95_drift,p95_bound (%.17g).
void write_report_csv(std::ostream& os, const Report& r);
std::vector<ReportRow> read_report_csv(std::istream& is);
void write_report_txt(std::ostream& os, const Report& r);

}  // namespace ecomp
