// ecomp command-line tool. Machine-readable stdout lines start with "ECOMP ".
//
// Exit codes:
//   0  success (select: profile within budget and tolerance)
//   1  usage error
//   2  input error: unreadable or malformed file, stale fingerprint, bad config
//   3  select: no profile meets budget and tolerance (certificate warning)
//   4  select: budget infeasible (device mismatch, missing energy model)
//   5  verification failed (manifest check, audit events)

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>

#include <CLI11.hpp>

#include "ecomp/manifest.hpp"
#include "ecomp/pipeline.hpp"
#include "ecomp/synth.hpp"
#include "ecomp/train.hpp"

using namespace ecomp;

namespace {

constexpr int kUsage = 1, kInput = 2, kCertWarning = 3, kInfeasible = 4, kVerify = 5;

struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string num(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

void line(const std::string& text) { std::cout << "ECOMP " << text << '\n'; }

Dataset load_dataset(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot read " + path);
  return read_dataset_csv(is);
}

void save_dataset(const std::string& path, const Dataset& d) {
  std::ostringstream os;
  write_dataset_csv(os, d);
  write_text_atomic(path, os.str());
}

DeviceTable load_device(const std::string& path, const std::string& id) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot read " + path);
  return read_device_csv(is, id);
}

Activation parse_act(const std::string& s) { return activation_from_string(s); }

int verify_and_print(const Manifest& m) {
  const ManifestCheck chk = verify_manifest(m);
  for (const std::string& p : chk.problems) std::cerr << "verify: " << p << '\n';
  line("verify ok=" + std::to_string(chk.ok()) + " ledgers=" + std::to_string(chk.ledgers_checked) +
       " payloads=" + std::to_string(chk.payloads_checked) + " max_error=" + num(chk.max_ledger_error));
  return chk.ok() ? 0 : kVerify;
}

struct Common {
  std::uint64_t seed = 0;
};

// ---- synth ----------------------------------------------------------------

struct SynthModelOpts {
  std::string out;
  std::vector<std::size_t> widths = {16, 32, 32, 2};
  std::vector<std::size_t> channels;
  std::size_t image = 4, kernel = 3, classes = 3;
  std::string hidden = "relu";
  bool norms = false, residual = false;
};

int run_synth_model(const SynthModelOpts& o, const Common& c) {
  Network net;
  if (!o.channels.empty()) {
    net = random_conv_network({.height = o.image, .width = o.image, .channels = o.channels, .kernel = o.kernel,
                               .classes = o.classes, .act = parse_act(o.hidden), .seed = c.seed});
  } else {
    net = random_dense_network({.widths = o.widths, .hidden = parse_act(o.hidden), .norms = o.norms,
                                .residual = o.residual, .seed = c.seed});
  }
  Manifest m = raw_manifest(net);
  m.provenance = {c.seed, "", "synth model"};
  write_manifest(o.out, m);
  line("synth model layers=" + std::to_string(m.raw.size()) + " out=" + o.out);
  return 0;
}

struct SynthDataOpts {
  std::string out;
  std::size_t n = 500, dim = 16, modes = 6;
  double centre = 1.0, spread = 1.0;
};

int run_synth_data(const SynthDataOpts& o, const Common& c) {
  const ToyData d = make_toy_data(o.n, o.dim, c.seed, o.modes, o.centre, o.spread);
  save_dataset(o.out, to_dataset(d));
  line("synth data rows=" + std::to_string(d.size()) + " dim=" + std::to_string(o.dim) + " out=" + o.out);
  return 0;
}

struct SynthDeviceOpts {
  std::string model, out, device = "synthetic";
  std::size_t count = 64;
  double noise = 0.03;
};

int run_synth_device(const SynthDeviceOpts& o, const Common& c) {
  const Manifest m = read_manifest(o.model);
  if (!m.net) throw InputError("synth device: manifest has no elastic model");
  const DeviceTable t = synth_device_table(*m.net, o.device, c.seed, o.count, o.noise);
  std::ostringstream os;
  write_device_csv(os, t);
  write_text_atomic(o.out, os.str());
  line("synth device id=" + o.device + " records=" + std::to_string(t.records.size()) + " out=" + o.out);
  return 0;
}

// ---- decompose ------------------------------------------------------------

struct DecomposeOpts {
  std::string in, out;
  std::size_t k_max = 0;
  std::vector<std::string> kinds;
};

int run_decompose(const DecomposeOpts& o, const Common&) {
  const Manifest raw = read_manifest(o.in);
  std::vector<LayerKind> kinds;
  for (const std::string& k : o.kinds) {
    try {
      kinds.push_back(layer_kind_from_string(k));
    } catch (const std::exception&) {
      throw InputError("decompose: unsupported layer kind " + k);
    }
  }
  const DecomposeResult d = decompose(raw, o.k_max ? std::optional<std::size_t>(o.k_max) : std::nullopt, kinds);
  bool within = true;
  for (std::size_t l = 0; l < d.net.blocks.size(); ++l) {
    const bool ok = d.relative_error[l] <= 1e-7;
    within = within && ok;
    const ElasticLayer& L = d.net.blocks[l].layer;
    line("decompose layer=" + std::to_string(l) + " name=" + d.net.blocks[l].name + " kind=" + to_string(L.kind()) +
         " k_max=" + std::to_string(L.k_max()) + " rel_error=" + num(d.relative_error[l]) +
         " within_tol=" + std::to_string(ok));
  }
  Manifest m;
  m.height = raw.height;
  m.width = raw.width;
  m.net = d.net;
  m.provenance = {raw.provenance.seed, raw.provenance.config_hash, "decompose"};
  write_manifest(o.out, m);
  line("decompose layers=" + std::to_string(d.net.blocks.size()) + " within_tol=" + std::to_string(within) +
       " out=" + o.out);
  return 0;
}

// ---- certify --------------------------------------------------------------

struct CertifyOpts {
  std::string model, calib, out, mode = "conservative";
  std::vector<std::string> profiles;  // id=key
  std::vector<double> fracs = {0.25, 0.5, 1.0};
  std::size_t power_steps = 5;
};

BitMap default_bitmap() { return BitMap{1.5, 3.0, 8, 1, 0, 1}; }

int run_certify(const CertifyOpts& o, const Common& c) {
  Manifest m = read_manifest(o.model);
  if (!m.net) throw InputError("certify: manifest has no elastic model");
  const Dataset calib = load_dataset(o.calib);
  ProxySpec spec;
  spec.mode = proxy_mode_from_string(o.mode);
  spec.steps = o.power_steps;
  spec.seed = c.seed;
  std::vector<Profile> extra;
  for (const std::string& s : o.profiles) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw InputError("certify: profile must be id=key, got " + s);
    try {
      extra.push_back(parse_profile_key(s.substr(eq + 1), s.substr(0, eq)));
    } catch (const std::invalid_argument& e) {
      throw InputError(std::string("certify: ") + e.what());
    }
  }
  if (extra.empty() && m.profiles.empty()) extra = fraction_profiles(*m.net, o.fracs, default_bitmap());
  certify_manifest(m, calib.x, spec, extra);
  m.provenance.seed = c.seed;
  m.provenance.command = "certify";
  write_manifest(o.out, m);
  for (const CertificateLedger& l : m.ledgers)
    line("certify profile=" + l.profile_id + " mode=" + to_string(l.mode) + " certified=" +
         (l.certified ? "true" : "false") + " delta_hat=" + num(l.delta_hat));
  return verify_and_print(m);
}

// ---- plan -----------------------------------------------------------------

struct PlanOpts {
  std::string model, device_csv, device = "synthetic", out;
  std::vector<double> latency, energy;
  std::vector<std::uint64_t> bytes;
  std::size_t budgets = 3, entries = 6;
};

int run_plan(const PlanOpts& o, const Common& c) {
  Manifest m = read_manifest(o.model);
  const PlanSetup s = make_plan_setup(m, load_device(o.device_csv, o.device), o.entries, default_bitmap());
  std::vector<BudgetToken> budgets;
  const std::size_t n = std::max({o.latency.size(), o.energy.size(), o.bytes.size()});
  if (n == 0) {
    budgets = latency_ladder(s, o.budgets);
  } else {
    auto check = [n](std::size_t size, const char* name) {
      if (size != 0 && size != n) throw InputError(std::string("plan: --") + name + " needs one value per budget");
    };
    check(o.latency.size(), "latency-ms");
    check(o.energy.size(), "energy-mj");
    check(o.bytes.size(), "bytes");
    for (std::size_t i = 0; i < n; ++i) {
      BudgetToken b;
      b.device = o.device;
      if (!o.latency.empty()) b.latency_ms = o.latency[i];
      if (!o.energy.empty()) b.energy_mj = o.energy[i];
      if (!o.bytes.empty()) b.bytes = o.bytes[i];
      budgets.push_back(b);
    }
    for (std::size_t i = 1; i < n; ++i)
      if (!budget_leq(budgets[i - 1], budgets[i])) throw InputError("plan: budgets must be ascending");
  }
  const PlanOutcome out = plan_lattice(m, s, budgets);
  m.provenance.seed = c.seed;
  m.provenance.command = "plan";
  write_manifest(o.out, m);
  std::size_t flagged = 0;
  for (std::size_t i = 0; i < budgets.size(); ++i) {
    const LatticeEntry& e = m.lattice->entries[out.lattice_index[i]];
    flagged += out.infeasible[i];
    line("plan budget=" + std::to_string(i) + " latency_target=" + (budgets[i].latency_ms ? num(*budgets[i].latency_ms) : "-") +
         " profile=" + e.profile.id + " latency_ms=" + num(e.latency_ms) + " bytes=" + std::to_string(e.bytes) +
         " delta_hat=" + num(e.delta_hat) + " infeasible=" + std::to_string(out.infeasible[i]));
  }
  line("plan lattice=" + std::to_string(m.lattice->entries.size()) + " raised=" + std::to_string(out.raised) +
       " dropped=" + std::to_string(out.dropped) + " audit_latency=" + std::to_string(out.audit.latency_events) +
       "/" + std::to_string(out.audit.pairs) + " audit_delta=" + std::to_string(out.audit.delta_events) + "/" +
       std::to_string(out.audit.pairs) + " flagged=" + std::to_string(flagged) +
       " cost_mape=" + num(s.ctx.latency.mape_percent));
  const int v = verify_and_print(m);
  if (v) return v;
  return out.audit.latency_events || out.audit.delta_events ? kVerify : 0;
}

// ---- select ---------------------------------------------------------------

struct SelectOpts {
  std::string manifest, device;
  std::optional<double> latency, energy;
  std::optional<std::uint64_t> bytes;
  double epsilon = 0.0;
};

int run_select(const SelectOpts& o, const Common&) {
  const Manifest m = read_manifest(o.manifest);
  if (!m.lattice || m.lattice->entries.empty()) throw InputError("select: manifest has no lattice; run plan first");
  BudgetToken b;
  b.latency_ms = o.latency;
  b.energy_mj = o.energy;
  b.bytes = o.bytes;
  b.device = o.device.empty() ? m.lattice->device_id : o.device;
  if (!b.valid()) {
    std::cerr << "select: give at least one of --latency-ms, --bytes, --energy-mj\n";
    return kUsage;
  }
  const Selection s = select_runtime(*m.lattice, b, o.epsilon);
  const LatticeEntry& e = m.lattice->entries[s.index];
  line("select profile=" + e.profile.id + " latency_ms=" + num(e.latency_ms) + " bytes=" + std::to_string(e.bytes) +
       " delta_hat=" + num(e.delta_hat) + " status=" + to_string(s.status));
  switch (s.status) {
    case SelectStatus::Ok: return 0;
    case SelectStatus::CertWarning: return kCertWarning;
    case SelectStatus::Infeasible: return kInfeasible;
  }
  return 0;
}

// ---- report ---------------------------------------------------------------

struct ReportOpts {
  std::string manifest, eval, out_prefix;
  std::optional<double> epsilon;
};

int run_report(const ReportOpts& o, const Common&) {
  const Manifest m = read_manifest(o.manifest);
  if (!std::filesystem::exists(o.eval)) throw InputError("report: evaluation data missing: " + o.eval);
  const Report r = build_report(m, load_dataset(o.eval), o.epsilon);
  std::ostringstream csv, txt;
  write_report_csv(csv, r);
  write_report_txt(txt, r);
  write_text_atomic(o.out_prefix + ".csv", csv.str());
  write_text_atomic(o.out_prefix + ".txt", txt.str());
  for (const ReportRow& row : r.rows)
    line("report profile=" + row.profile + " accuracy=" + num(row.accuracy) + " delta_hat=" + num(row.delta_hat) +
         " coverage=" + num(row.coverage) + " bound_coverage=" + num(row.bound_coverage));
  line("report epsilon=" + num(r.epsilon) + " correlation=" + (r.correlation ? num(*r.correlation) : "nan") +
       " out=" + o.out_prefix);
  return 0;
}

// ---- train ----------------------------------------------------------------

struct TrainOpts {
  std::string config, out_dir, resume;
  std::size_t steps = 0, stop_at = 0;
};

int run_train(const TrainOpts& o, const Common& c) {
  TrainConfig cfg;
  if (!o.config.empty()) cfg = parse_train_config(read_text(o.config));
  if (o.steps) cfg.steps = o.steps;
  std::optional<TrainState> resume;
  std::uint64_t seed = c.seed;
  if (!o.resume.empty()) {
    resume = load_checkpoint(read_text(o.resume));
    seed = resume->seed;
  }
  const ToyRun run = train_toy(cfg, seed, resume ? &*resume : nullptr,
                               o.stop_at ? std::optional<std::size_t>(o.stop_at) : std::nullopt);
  std::filesystem::create_directories(o.out_dir);
  const std::string dir = o.out_dir + "/";
  write_text_atomic(dir + "checkpoint.json", checkpoint_json(run.state));
  std::ostringstream metrics;
  write_metrics_csv(metrics, run.state.metrics);
  write_text_atomic(dir + "metrics.csv", metrics.str());
  write_text_atomic(dir + "config.json", train_config_json(cfg));
  if (run.state.step < cfg.steps && !run.state.diverged) {
    line("train seed=" + std::to_string(seed) + " step=" + std::to_string(run.state.step) + " paused=1");
    return 0;
  }
  const Manifest m = trained_manifest(run, seed);
  write_manifest(dir + "model.json", m);
  save_dataset(dir + "calib.csv", Dataset{calibration_rows(run), {}});
  save_dataset(dir + "eval.csv", to_dataset(run.eval));
  std::ostringstream dev;
  write_device_csv(dev, synth_device_table(run.net, "toy-cpu", cfg.device_seed));
  write_text_atomic(dir + "device.csv", dev.str());
  const TrainReport& r = run.report;
  for (std::size_t i = 0; i < r.profile_ids.size(); ++i)
    line("train profile=" + r.profile_ids[i] + " accuracy=" + num(r.accuracy[i]) + " delta_hat=" + num(r.delta_hat[i]));
  line("train seed=" + std::to_string(seed) + " steps=" + std::to_string(run.state.step) +
       " final_loss=" + num(r.final_loss) + " full_accuracy=" + num(r.full_accuracy) +
       " violation_rate_tiny=" + num(r.violation_rate_tiny) + " aborted=" + std::to_string(r.aborted_steps) +
       " diverged=" + std::to_string(r.diverged) + " config_hash=" + config_hash(cfg));
  return r.diverged ? kVerify : 0;
}

// ---- audit ----------------------------------------------------------------

struct AuditOpts {
  std::string manifest, device_csv, device = "synthetic", eval;
  std::size_t pairs = 2000, entries = 6;
};

int run_audit(const AuditOpts& o, const Common&) {
  const Manifest m = read_manifest(o.manifest);
  const PlanSetup s = make_plan_setup(m, load_device(o.device_csv, o.device), o.entries, default_bitmap());
  std::optional<Dataset> data;
  if (!o.eval.empty()) data = load_dataset(o.eval);
  const AuditOutcome a = audit_scan(m, s, o.pairs, data ? &*data : nullptr);
  const AuditResult& r = a.result;
  line("audit pairs=" + std::to_string(r.pairs) + " latency_events=" + std::to_string(r.latency_events) +
       " delta_events=" + std::to_string(r.delta_events) +
       " accuracy_events=" + (data ? std::to_string(r.accuracy_events) : std::string("-")) +
       " profiles=" + std::to_string(a.distinct_profiles) + " infeasible=" + std::to_string(a.infeasible));
  return r.latency_events || r.delta_events ? kVerify : 0;
}

struct VerifyOpts {
  std::string manifest;
};

int run_verify(const VerifyOpts& o, const Common&) { return verify_and_print(read_manifest(o.manifest)); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ecomp: elastic low-rank and quantized compression with drift certificates"};
  app.require_subcommand(1);
  Common common;
  auto add_seed = [&](CLI::App* sub) { sub->add_option("--seed", common.seed, "random seed")->capture_default_str(); };

  CLI::App* synth = app.add_subcommand("synth", "generate synthetic models, data and device tables");
  synth->require_subcommand(1);
  SynthModelOpts smo;
  CLI::App* s_model = synth->add_subcommand("model", "random raw (unfactorized) model manifest");
  s_model->add_option("--out", smo.out)->required();
  s_model->add_option("--widths", smo.widths, "dense widths, input first")->delimiter(',')->capture_default_str();
  s_model->add_option("--channels", smo.channels, "conv channels, input first (selects a conv model)")->delimiter(',');
  s_model->add_option("--image", smo.image, "conv input height and width")->capture_default_str();
  s_model->add_option("--kernel", smo.kernel)->capture_default_str();
  s_model->add_option("--classes", smo.classes, "conv head outputs")->capture_default_str();
  s_model->add_option("--hidden", smo.hidden, "hidden activation: identity, relu, gelu")->capture_default_str();
  s_model->add_flag("--norms", smo.norms, "frozen affine norms on hidden blocks");
  s_model->add_flag("--residual", smo.residual, "residual connections on square hidden blocks");
  add_seed(s_model);
  SynthDataOpts sdo;
  CLI::App* s_data = synth->add_subcommand("data", "labelled toy classification data (CSV)");
  s_data->add_option("--out", sdo.out)->required();
  s_data->add_option("--n", sdo.n)->capture_default_str();
  s_data->add_option("--dim", sdo.dim)->capture_default_str();
  s_data->add_option("--modes", sdo.modes)->capture_default_str();
  s_data->add_option("--centre-scale", sdo.centre)->capture_default_str();
  s_data->add_option("--spread", sdo.spread)->capture_default_str();
  add_seed(s_data);
  SynthDeviceOpts svo;
  CLI::App* s_dev = synth->add_subcommand("device", "device table from a planted synthetic device");
  s_dev->add_option("--model", svo.model)->required();
  s_dev->add_option("--out", svo.out)->required();
  s_dev->add_option("--device", svo.device)->capture_default_str();
  s_dev->add_option("--count", svo.count, "number of profiles")->capture_default_str();
  s_dev->add_option("--noise", svo.noise, "lognormal noise sigma")->capture_default_str();
  add_seed(s_dev);

  DecomposeOpts deo;
  CLI::App* dec = app.add_subcommand("decompose", "factorize a raw model at full rank");
  dec->add_option("--in", deo.in)->required();
  dec->add_option("--out", deo.out)->required();
  dec->add_option("--k-max", deo.k_max, "cap on every layer's rank range (0: none)")->capture_default_str();
  dec->add_option("--kinds", deo.kinds, "per-layer kind: dense_svd, dense_cp, conv_tucker2")->delimiter(',');
  add_seed(dec);

  CertifyOpts ceo;
  CLI::App* cer = app.add_subcommand("certify", "calibrate and write certificate ledgers");
  cer->add_option("--model", ceo.model)->required();
  cer->add_option("--calib", ceo.calib, "calibration CSV")->required();
  cer->add_option("--out", ceo.out)->required();
  cer->add_option("--mode", ceo.mode, "conservative or poweriter")
      ->check(CLI::IsMember({"conservative", "poweriter"}))
      ->capture_default_str();
  cer->add_option("--profile", ceo.profiles, "id=k:qu.qc.qv|... (repeatable)");
  cer->add_option("--fracs", ceo.fracs, "rank fractions for default profiles")->delimiter(',');
  cer->add_option("--power-steps", ceo.power_steps)->capture_default_str();
  add_seed(cer);

  PlanOpts plo;
  CLI::App* pl = app.add_subcommand("plan", "build the profile lattice for a device");
  pl->add_option("--model", plo.model)->required();
  pl->add_option("--device-csv", plo.device_csv)->required();
  pl->add_option("--device", plo.device)->capture_default_str();
  pl->add_option("--out", plo.out)->required();
  pl->add_option("--latency-ms", plo.latency, "latency targets, ascending")->delimiter(',');
  pl->add_option("--bytes", plo.bytes, "weight byte targets, ascending")->delimiter(',');
  pl->add_option("--energy-mj", plo.energy, "energy targets, ascending")->delimiter(',');
  pl->add_option("--budgets", plo.budgets, "latency ladder size when no targets are given")->capture_default_str();
  pl->add_option("--entries", plo.entries, "menu ranks per layer")->capture_default_str();
  add_seed(pl);

  SelectOpts seo;
  CLI::App* sel = app.add_subcommand("select", "pick the lattice profile for a budget");
  sel->add_option("--manifest", seo.manifest)->required();
  sel->add_option("--latency-ms", seo.latency);
  sel->add_option("--bytes", seo.bytes);
  sel->add_option("--energy-mj", seo.energy);
  sel->add_option("--device", seo.device, "defaults to the lattice device");
  sel->add_option("--epsilon", seo.epsilon, "drift tolerance on delta_hat")->capture_default_str();
  add_seed(sel);

  ReportOpts reo;
  CLI::App* rep = app.add_subcommand("report", "coverage, correlation and monotonicity tables");
  rep->add_option("--manifest", reo.manifest)->required();
  rep->add_option("--eval", reo.eval, "evaluation CSV")->required();
  rep->add_option("--out-prefix", reo.out_prefix, "writes <prefix>.csv and <prefix>.txt")->required();
  rep->add_option("--epsilon", reo.epsilon, "coverage tolerance (default: largest delta_hat)");
  add_seed(rep);

  TrainOpts tro;
  CLI::App* tr = app.add_subcommand("train", "train the toy elastic model");
  tr->add_option("--config", tro.config, "JSON config overlay");
  tr->add_option("--out-dir", tro.out_dir)->required();
  tr->add_option("--resume", tro.resume, "checkpoint to continue from");
  tr->add_option("--steps", tro.steps, "override the configured step count");
  tr->add_option("--stop-at", tro.stop_at, "pause after this step");
  add_seed(tr);

  AuditOpts auo;
  CLI::App* au = app.add_subcommand("audit", "adjacent-budget monotonicity scan");
  au->add_option("--manifest", auo.manifest)->required();
  au->add_option("--device-csv", auo.device_csv)->required();
  au->add_option("--device", auo.device)->capture_default_str();
  au->add_option("--eval", auo.eval, "labelled CSV for the accuracy column");
  au->add_option("--pairs", auo.pairs)->capture_default_str();
  au->add_option("--entries", auo.entries)->capture_default_str();
  add_seed(au);

  VerifyOpts veo;
  CLI::App* ver = app.add_subcommand("verify", "recompute and check a manifest");
  ver->add_option("--manifest", veo.manifest)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsage;
  }

  try {
    if (s_model->parsed()) return run_synth_model(smo, common);
    if (s_data->parsed()) return run_synth_data(sdo, common);
    if (s_dev->parsed()) return run_synth_device(svo, common);
    if (dec->parsed()) return run_decompose(deo, common);
    if (cer->parsed()) return run_certify(ceo, common);
    if (pl->parsed()) return run_plan(plo, common);
    if (sel->parsed()) return run_select(seo, common);
    if (rep->parsed()) return run_report(reo, common);
    if (tr->parsed()) return run_train(tro, common);
    if (au->parsed()) return run_audit(auo, common);
    if (ver->parsed()) return run_verify(veo, common);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kInput;
  }
  return kUsage;
}
