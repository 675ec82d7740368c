#include <optional>
#include <string>

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "ecomp/controller.hpp"
#include "ecomp/cost.hpp"
#include "ecomp/manifest.hpp"
#include "ecomp/pipeline.hpp"

namespace py = pybind11;
using namespace ecomp;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Matrix to_matrix(const Array& a) {
  if (a.ndim() != 2) throw std::invalid_argument("expected a 2-D array");
  const auto r = a.unchecked<2>();
  Matrix m(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)));
  for (py::ssize_t i = 0; i < r.shape(0); ++i)
    for (py::ssize_t j = 0; j < r.shape(1); ++j) m(i, j) = r(i, j);
  return m;
}

Array to_array(const Matrix& m) {
  Array a({m.rows(), m.cols()});
  auto w = a.mutable_unchecked<2>();
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) w(i, j) = m(i, j);
  return a;
}

Array to_array(const Vector& v) {
  Array a(static_cast<py::ssize_t>(v.size()));
  std::copy(v.begin(), v.end(), a.mutable_data());
  return a;
}

const Network& need_net(const Manifest& m) {
  if (!m.net) throw ManifestError("manifest holds no elastic model");
  return *m.net;
}

// Profile by id; None means the full-precision, full-rank model.
Profile resolve(const Manifest& m, const std::optional<std::string>& id) {
  if (!id) return full_profile(need_net(m));
  const Profile* p = find_profile(m, *id);
  if (!p) throw ManifestError("unknown profile " + *id);
  return *p;
}

py::dict check_dict(const ManifestCheck& c) {
  py::dict d;
  d["ok"] = c.ok();
  d["problems"] = c.problems;
  d["max_ledger_error"] = c.max_ledger_error;
  d["payloads_checked"] = c.payloads_checked;
  d["ledgers_checked"] = c.ledgers_checked;
  return d;
}

py::list lattice_list(const Manifest& m) {
  py::list out;
  if (!m.lattice) return out;
  for (const LatticeEntry& e : m.lattice->entries) {
    py::dict d;
    d["id"] = e.profile.id;
    d["key"] = profile_key(e.profile);
    d["latency_ms"] = e.latency_ms;
    d["energy_mj"] = e.energy_mj;
    d["bytes"] = e.bytes;
    d["delta_hat"] = e.delta_hat;
    out.append(d);
  }
  return out;
}

}  // namespace

PYBIND11_MODULE(_ecomp, mod) {
  mod.attr("__version__") = "0.1.0";
  py::register_exception<ManifestError>(mod, "ManifestError", PyExc_ValueError);

  mod.def(
      "svd",
      [](const Array& w) {
        const SvdFactors f = svd_full(to_matrix(w));
        return py::make_tuple(to_array(f.u), to_array(f.sigma), to_array(f.v));
      },
      py::arg("w"), "Thin SVD (U, sigma, V) with W = U diag(sigma) V^T and sigma descending.");

  mod.def(
      "expected_bytes",
      [](const Manifest& m, const std::string& id) {
        return profile_cost(need_net(m), resolve(m, id)).total_weight_bytes();
      },
      py::arg("manifest"), py::arg("profile"));

  py::class_<Manifest>(mod, "Manifest")
      .def_static("load", &read_manifest, py::arg("path"))
      .def_static("from_json", &manifest_from_string, py::arg("text"))
      .def("to_json", &manifest_to_string)
      .def("save", [](const Manifest& m, const std::string& path) { write_manifest(path, m); }, py::arg("path"))
      .def("verify", [](const Manifest& m, double tol) { return check_dict(verify_manifest(m, tol)); },
           py::arg("tol") = 1e-10)
      .def_property_readonly("profile_ids",
                             [](const Manifest& m) {
                               std::vector<std::string> ids;
                               for (const Profile& p : m.profiles) ids.push_back(p.id);
                               if (m.lattice)
                                 for (const LatticeEntry& e : m.lattice->entries) ids.push_back(e.profile.id);
                               return ids;
                             })
      .def_property_readonly("lattice", &lattice_list)
      .def_property_readonly("input_dim", [](const Manifest& m) { return need_net(m).input_dim(); })
      .def(
          "delta_hat",
          [](const Manifest& m, const std::string& id) {
            const CertificateLedger* l = find_ledger(m, id);
            if (!l) throw ManifestError("no ledger for profile " + id);
            return l->delta_hat;
          },
          py::arg("profile"))
      .def(
          "logits",
          [](const Manifest& m, const Array& x, std::optional<std::string> profile) {
            const Matrix xs = to_matrix(x);
            const CompiledNetwork c = compile(need_net(m), resolve(m, profile));
            Matrix out;
            for (std::size_t i = 0; i < xs.rows(); ++i) {
              const Vector row = xs.row(i);
              const Vector y = forward(c, row).logits;
              if (i == 0) out = Matrix(xs.rows(), y.size());
              for (std::size_t j = 0; j < y.size(); ++j) out(i, j) = y[j];
            }
            return to_array(out);
          },
          py::arg("x"), py::arg("profile") = py::none(), "Logits for each row of x (n x input_dim).")
      .def(
          "select",
          [](const Manifest& m, std::optional<double> latency_ms, std::optional<std::uint64_t> bytes,
             std::optional<double> energy_mj, std::optional<std::string> device, double epsilon) {
            if (!m.lattice || m.lattice->entries.empty()) throw ManifestError("manifest has no lattice");
            BudgetToken b{latency_ms, bytes, energy_mj, device.value_or(m.lattice->device_id)};
            if (!b.valid()) throw std::invalid_argument("give at least one budget target");
            const Selection s = select_runtime(*m.lattice, b, epsilon);
            return py::make_tuple(m.lattice->entries[s.index].profile.id, std::string(to_string(s.status)));
          },
          py::kw_only(), py::arg("latency_ms") = py::none(), py::arg("bytes") = py::none(),
          py::arg("energy_mj") = py::none(), py::arg("device") = py::none(), py::arg("epsilon") = 0.0,
          "Lowest-latency lattice entry meeting the budget with delta_hat <= epsilon; returns (id, status).");

  mod.def(
      "plan_synthetic",
      [](Manifest m, const std::string& device, std::uint64_t seed, std::size_t budgets, std::size_t entries) {
        const DeviceTable t = synth_device_table(need_net(m), device, seed);
        const PlanSetup s = make_plan_setup(m, t, entries, BitMap{1.5, 3.0, 8, 1, 0, 1});
        plan_lattice(m, s, latency_ladder(s, budgets));
        return m;
      },
      py::arg("manifest"), py::arg("device") = "toy-cpu", py::arg("seed") = 11, py::arg("budgets") = 3,
      py::arg("entries") = 6, "Copy of the manifest with a lattice planned on a synthetic device table.");

  mod.def(
      "train_toy",
      [](std::uint64_t seed, std::optional<std::size_t> steps, double cert_weight) {
        TrainConfig cfg;
        if (steps) cfg.steps = *steps;
        cfg.weights.cert = cert_weight;
        ToyRun run;
        {
          py::gil_scoped_release release;
          run = train_toy(cfg, seed);
        }
        py::dict report;
        report["profile_ids"] = run.report.profile_ids;
        report["accuracy"] = run.report.accuracy;
        report["full_accuracy"] = run.report.full_accuracy;
        report["violation_rate_tiny"] = run.report.violation_rate_tiny;
        report["delta_hat"] = run.report.delta_hat;
        report["final_loss"] = run.report.final_loss;
        report["diverged"] = run.report.diverged;
        return py::make_tuple(trained_manifest(run, seed), report);
      },
      py::arg("seed") = 3407, py::arg("steps") = py::none(), py::arg("cert_weight") = 0.2,
      "Trains the two-class toy model; returns (manifest, report).");
}
