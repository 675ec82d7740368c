#include "ecomp/cost.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <random>
#include <sstream>

namespace ecomp {

std::uint64_t flops_dense_svd(std::uint64_t m, std::uint64_t n, std::uint64_t k) {
  if (k == 0) throw CostError("flops_dense_svd: k must be at least 1");
  return 2 * n * k + k + 2 * m * k;
}

std::uint64_t flops_dense_full(std::uint64_t m, std::uint64_t n) { return 2 * m * n; }

std::uint64_t flops_conv_tucker2(std::uint64_t c_o, std::uint64_t c_i, std::uint64_t h,
                                 std::uint64_t w, std::uint64_t H, std::uint64_t W,
                                 std::uint64_t r_o, std::uint64_t r_i) {
  if (r_o == 0 || r_i == 0 || r_o > c_o || r_i > c_i)
    throw CostError("flops_conv_tucker2: ranks must lie within the channel counts");
  return 2 * H * W * (c_i * r_i + r_o * r_i * h * w + c_o * r_o);
}

std::uint64_t flops_conv_full(std::uint64_t c_o, std::uint64_t c_i, std::uint64_t h,
                              std::uint64_t w, std::uint64_t H, std::uint64_t W) {
  return 2 * c_o * c_i * h * w * H * W;
}

std::uint64_t tensor_bytes(std::uint64_t count, int q) {
  const std::uint64_t bits = count * static_cast<std::uint64_t>(storage_bits(q));
  return (bits + 7) / 8;
}

std::uint64_t bytes_of(const ElasticLayer& layer, std::size_t k, const FactorBits& bits) {
  layer.check_rank(k);
  if (layer.is_conv()) {
    const auto [r_o, r_i] = layer.conv_ranks(k);
    return tensor_bytes(layer.out_dim() * r_o, bits.u) +
           tensor_bytes(r_o * r_i * layer.kernel_h() * layer.kernel_w(), bits.core) +
           tensor_bytes(layer.in_dim() * r_i, bits.v);
  }
  return tensor_bytes(layer.out_dim() * k, bits.u) + tensor_bytes(k, bits.core) +
         tensor_bytes(layer.in_dim() * k, bits.v);
}

std::uint64_t ProfileCost::total_flops() const {
  std::uint64_t s = 0;
  for (const LayerCost& c : layers) s += c.flops;
  return s;
}

std::uint64_t ProfileCost::total_weight_bytes() const {
  std::uint64_t s = 0;
  for (const LayerCost& c : layers) s += c.weight_bytes;
  return s;
}

LayerCost layer_cost(const Network& net, std::size_t l, const LayerChoice& c) {
  const ElasticLayer& layer = net.blocks.at(l).layer;
  LayerCost out;
  out.weight_bytes = bytes_of(layer, c.k, c.bits);
  std::uint64_t act_elems = 0;
  if (layer.is_conv()) {
    const auto [r_o, r_i] = layer.conv_ranks(c.k);
    out.flops = flops_conv_tucker2(layer.out_dim(), layer.in_dim(), layer.kernel_h(), layer.kernel_w(),
                                   net.height, net.width, r_o, r_i);
    act_elems = net.spatial() * (layer.in_dim() + r_i + r_o + layer.out_dim());
  } else {
    out.flops = flops_dense_svd(layer.out_dim(), layer.in_dim(), c.k);
    act_elems = layer.in_dim() + c.k + layer.out_dim();
  }
  out.activation_bytes = (act_elems * kActivationBits + 7) / 8;
  return out;
}

ProfileCost profile_cost(const Network& net, const Profile& p) {
  validate_profile(net, p);
  ProfileCost pc;
  pc.profile_id = device_profile_id(p);
  for (std::size_t l = 0; l < net.blocks.size(); ++l) pc.layers.push_back(layer_cost(net, l, p.layers[l]));
  return pc;
}

std::string device_profile_id(const Profile& p) { return p.id.empty() ? profile_key(p) : p.id; }

namespace {

std::string fmt(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

double parse_double(const std::string& s, const std::string& what) {
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    throw CostError("device table: bad " + what + " '" + s + "'");
  }
  if (pos != s.size() || !std::isfinite(v)) throw CostError("device table: bad " + what + " '" + s + "'");
  return v;
}

double log_uniform(std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(std::log(lo), std::log(hi));
  return std::exp(u(rng));
}

double linear(double c0, const Vector& comp, const Vector& mem, const ProfileCost& c) {
  if (comp.size() != c.layers.size() || mem.size() != c.layers.size())
    throw CostError("cost model layer count does not match the profile");
  double s = c0;
  for (std::size_t l = 0; l < c.layers.size(); ++l)
    s += comp[l] * static_cast<double>(c.layers[l].flops) + mem[l] * static_cast<double>(c.layers[l].bytes());
  return s;
}

// Least squares on a column subset; falls back to ridge-stabilized normal
// equations if the subset is numerically rank deficient.
Vector subset_ls(const Matrix& a, std::span<const double> b, const std::vector<std::size_t>& cols) {
  Matrix sub(a.rows(), cols.size());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < cols.size(); ++j) sub(i, j) = a(i, cols[j]);
  try {
    return least_squares(sub, b);
  } catch (const LinalgError&) {
    const Matrix g = matmul_tn(sub, sub);
    const Vector atb = matvec_t(sub, b);
    const Matrix x = solve_spd(g, Matrix::column(atb));
    return x.col(0);
  }
}

}  // namespace

void write_device_csv(std::ostream& os, const DeviceTable& t) {
  os << "profile_id,latency_ms,energy_mj\n";
  for (const DeviceRecord& r : t.records) {
    if (r.profile_id.find(',') != std::string::npos) throw CostError("device table: profile id contains a comma");
    os << r.profile_id << ',' << fmt(r.latency_ms) << ',';
    if (r.energy_mj) os << fmt(*r.energy_mj);
    os << '\n';
  }
}

DeviceTable read_device_csv(std::istream& is, const std::string& device_id) {
  DeviceTable t;
  t.device_id = device_id;
  std::string line;
  if (!std::getline(is, line)) throw CostError("device table: empty input");
  const auto header = split_csv(line);
  if (header.size() != 3 || header[0] != "profile_id" || header[1] != "latency_ms" || header[2] != "energy_mj")
    throw CostError("device table: expected header profile_id,latency_ms,energy_mj");
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto f = split_csv(line);
    if (f.size() != 3) throw CostError("device table: line " + std::to_string(lineno) + " needs 3 fields");
    DeviceRecord r;
    r.profile_id = f[0];
    r.latency_ms = parse_double(f[1], "latency");
    if (r.latency_ms <= 0.0) throw CostError("device table: latency must be positive");
    if (!f[2].empty()) r.energy_mj = parse_double(f[2], "energy");
    t.records.push_back(std::move(r));
  }
  return t;
}

double SyntheticDevice::latency(const ProfileCost& c) const { return linear(launch_ms, comp, mem, c); }
double SyntheticDevice::energy(const ProfileCost& c) const { return linear(energy0, energy_comp, energy_mem, c); }

SyntheticDevice make_synthetic_device(const std::string& id, std::size_t layers, std::uint64_t seed,
                                      double noise_sigma) {
  std::mt19937_64 rng(seed);
  SyntheticDevice d;
  d.device_id = id;
  d.noise_sigma = noise_sigma;
  d.launch_ms = 0.02 * static_cast<double>(layers);
  d.energy0 = 0.05 * static_cast<double>(layers);
  for (std::size_t l = 0; l < layers; ++l) {
    d.comp.push_back(log_uniform(rng, 1e-6, 1e-5));
    d.mem.push_back(log_uniform(rng, 1e-5, 1e-4));
    d.energy_comp.push_back(log_uniform(rng, 1e-5, 1e-4));
    d.energy_mem.push_back(log_uniform(rng, 1e-4, 1e-3));
  }
  return d;
}

DeviceTable synthesize_table(const SyntheticDevice& dev, const std::vector<ProfileCost>& costs,
                             std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  DeviceTable t;
  t.device_id = dev.device_id;
  t.noise_model = "synthetic lognormal sigma=" + fmt(dev.noise_sigma);
  for (const ProfileCost& c : costs) {
    DeviceRecord r;
    r.profile_id = c.profile_id;
    r.latency_ms = dev.latency(c) * std::exp(dev.noise_sigma * normal(rng));
    r.energy_mj = dev.energy(c) * std::exp(dev.noise_sigma * normal(rng));
    t.records.push_back(std::move(r));
  }
  return t;
}

Vector nnls(const Matrix& a, std::span<const double> b, std::size_t max_iter) {
  const std::size_t n = a.cols();
  if (b.size() != a.rows()) throw CostError("nnls: shape mismatch");
  if (max_iter == 0) max_iter = 3 * n + 10;
  double anorm = 0.0;
  for (double v : a.data()) anorm = std::max(anorm, std::abs(v));
  const double tol = 10.0 * std::numeric_limits<double>::epsilon() * anorm *
                     static_cast<double>(std::max(a.rows(), n));
  Vector x(n, 0.0);
  std::vector<bool> passive(n, false);
  auto gradient = [&] {
    Vector r(b.begin(), b.end());
    const Vector ax = matvec(a, x);
    for (std::size_t i = 0; i < r.size(); ++i) r[i] -= ax[i];
    return matvec_t(a, r);
  };
  auto solve_passive = [&] {
    std::vector<std::size_t> cols;
    for (std::size_t j = 0; j < n; ++j)
      if (passive[j]) cols.push_back(j);
    const Vector sp = subset_ls(a, b, cols);
    Vector s(n, 0.0);
    for (std::size_t i = 0; i < cols.size(); ++i) s[cols[i]] = sp[i];
    return s;
  };
  for (std::size_t outer = 0; outer < max_iter; ++outer) {
    const Vector w = gradient();
    std::size_t best = n;
    double wmax = tol;
    for (std::size_t j = 0; j < n; ++j)
      if (!passive[j] && w[j] > wmax) {
        wmax = w[j];
        best = j;
      }
    if (best == n) break;
    passive[best] = true;
    Vector s = solve_passive();
    for (std::size_t inner = 0; inner < 3 * n + 10; ++inner) {
      double alpha = std::numeric_limits<double>::infinity();
      bool bad = false;
      for (std::size_t j = 0; j < n; ++j)
        if (passive[j] && s[j] <= 0.0) {
          bad = true;
          const double denom = x[j] - s[j];
          alpha = std::min(alpha, denom > 0.0 ? x[j] / denom : 0.0);
        }
      if (!bad) break;
      for (std::size_t j = 0; j < n; ++j) x[j] += alpha * (s[j] - x[j]);
      for (std::size_t j = 0; j < n; ++j)
        if (passive[j] && x[j] <= tol) {
          passive[j] = false;
          x[j] = 0.0;
        }
      s = solve_passive();
    }
    x = s;
    for (double& v : x) v = std::max(v, 0.0);
  }
  return x;
}

CostModel fit_cost_model(const DeviceTable& table, const std::vector<ProfileCost>& costs,
                         CostTarget target) {
  if (costs.empty()) throw CostError("fit_cost_model: no profile costs");
  const std::size_t L = costs.front().layers.size();
  std::map<std::string, const ProfileCost*> by_id;
  for (const ProfileCost& c : costs) {
    if (c.layers.size() != L) throw CostError("fit_cost_model: inconsistent layer counts");
    by_id[c.profile_id] = &c;
  }
  const std::size_t p = 1 + 2 * L;
  std::vector<const ProfileCost*> rows;
  Vector y;
  for (const DeviceRecord& r : table.records) {
    const auto it = by_id.find(r.profile_id);
    if (it == by_id.end()) throw CostError("fit_cost_model: unknown profile id '" + r.profile_id + "'");
    const double v = target == CostTarget::Latency ? r.latency_ms : r.energy_mj.value_or(-1.0);
    if (target == CostTarget::Energy && !r.energy_mj) throw CostError("fit_cost_model: record lacks energy");
    rows.push_back(it->second);
    y.push_back(v);
  }
  if (rows.size() < p)
    throw CostError("fit_cost_model: underdetermined (" + std::to_string(rows.size()) + " observations, " +
                    std::to_string(p) + " coefficients)");
  Matrix a(rows.size(), p);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    a(i, 0) = 1.0;
    for (std::size_t l = 0; l < L; ++l) {
      a(i, 1 + l) = static_cast<double>(rows[i]->layers[l].flops);
      a(i, 1 + L + l) = static_cast<double>(rows[i]->layers[l].bytes());
    }
  }
  // Column scaling keeps the active-set solves well conditioned.
  Vector scale(p, 0.0);
  bool any_feature = false;
  for (std::size_t j = 0; j < p; ++j) {
    for (std::size_t i = 0; i < a.rows(); ++i) scale[j] = std::max(scale[j], std::abs(a(i, j)));
    if (j > 0 && scale[j] > 0.0) any_feature = true;
  }
  if (!any_feature) throw CostError("fit_cost_model: all features are zero");
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < p; ++j) a(i, j) = scale[j] > 0.0 ? a(i, j) / scale[j] : 0.0;
  Vector x = nnls(a, y);
  for (std::size_t j = 0; j < p; ++j) x[j] = scale[j] > 0.0 ? x[j] / scale[j] : 0.0;

  CostModel m;
  m.device_id = table.device_id;
  m.target = target;
  m.alpha0 = x[0];
  m.comp.assign(x.begin() + 1, x.begin() + 1 + static_cast<long>(L));
  m.mem.assign(x.begin() + 1 + static_cast<long>(L), x.end());
  double mean = 0.0;
  for (double v : y) mean += v / static_cast<double>(y.size());
  double ss_res = 0.0, ss_tot = 0.0, ape = 0.0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double pr = predict(m, *rows[i]);
    ss_res += (pr - y[i]) * (pr - y[i]);
    ss_tot += (y[i] - mean) * (y[i] - mean);
    ape += std::abs(pr - y[i]) / std::abs(y[i]);
  }
  m.r2 = ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : (ss_res == 0.0 ? 1.0 : 0.0);
  m.mape_percent = 100.0 * ape / static_cast<double>(rows.size());
  return m;
}

double predict(const CostModel& m, const ProfileCost& c) { return linear(m.alpha0, m.comp, m.mem, c); }

double mape_percent(const CostModel& m, const DeviceTable& table, const std::vector<ProfileCost>& costs) {
  std::map<std::string, const ProfileCost*> by_id;
  for (const ProfileCost& c : costs) by_id[c.profile_id] = &c;
  if (table.records.empty()) throw CostError("mape: empty table");
  double s = 0.0;
  for (const DeviceRecord& r : table.records) {
    const auto it = by_id.find(r.profile_id);
    if (it == by_id.end()) throw CostError("mape: unknown profile id '" + r.profile_id + "'");
    const double y = m.target == CostTarget::Latency ? r.latency_ms : r.energy_mj.value();
    s += std::abs(predict(m, *it->second) - y) / std::abs(y);
  }
  return 100.0 * s / static_cast<double>(table.records.size());
}

std::uint64_t threshold_rank_dense(std::uint64_t m, std::uint64_t n) {
  if (m == 0 || n == 0) throw CostError("threshold_rank_dense: dimensions must be positive");
  return m * n / (m + n);
}

std::uint64_t break_even_rank_exact(std::uint64_t m, std::uint64_t n) {
  if (m == 0 || n == 0) throw CostError("break_even_rank_exact: dimensions must be positive");
  // (2m + 2n + 1)k < 2mn
  const std::uint64_t per = 2 * m + 2 * n + 1, full = 2 * m * n;
  return (full - 1) / per;
}

double threshold_rho_conv(std::uint64_t h, std::uint64_t w) {
  if (h == 0 || w == 0) throw CostError("threshold_rho_conv: kernel dimensions must be positive");
  return 1.0 / std::sqrt(static_cast<double>(h * w));
}

std::size_t monotone_cost_violations(const CostModel& m, const std::vector<Profile>& profiles,
                                     const std::vector<ProfileCost>& costs) {
  if (profiles.size() != costs.size()) throw CostError("monotone check: size mismatch");
  Vector pred;
  for (const ProfileCost& c : costs) pred.push_back(predict(m, c));
  std::size_t v = 0;
  for (std::size_t i = 0; i < profiles.size(); ++i)
    for (std::size_t j = 0; j < profiles.size(); ++j)
      if (i != j && pred[i] > pred[j] && profile_leq(profiles[i], profiles[j])) ++v;
  return v;
}

}  // namespace ecomp
