#pragma once

// Oracles and generators shared by the unit suites and the acceptance run.

#include <cmath>
#include <random>
#include <vector>

#include "ecomp/controller.hpp"
#include "ecomp/train.hpp"
#include "test_support.hpp"

namespace ecomp::testing {

// Brute-force re-run of the greedy rule: at each step enumerate the whole
// menu product, keep profiles one unit-upgrade away that fit, and take the
// best ratio (lowest unit on ties).
inline std::vector<KnapsackStep> oracle_trace(const KnapsackProblem& p, std::vector<std::size_t>* final_index) {
  const std::size_t U = p.menu_size.size();
  std::vector<std::vector<std::size_t>> all(1);
  for (std::size_t u = 0; u < U; ++u) {
    std::vector<std::vector<std::size_t>> next;
    for (const auto& pre : all)
      for (std::size_t i = 0; i < p.menu_size[u]; ++i) {
        auto v = pre;
        v.push_back(i);
        next.push_back(v);
      }
    all = std::move(next);
  }
  std::vector<std::size_t> cur(U, 0);
  std::vector<KnapsackStep> trace;
  for (;;) {
    const Vector c = p.cost(cur);
    bool found = false;
    KnapsackStep best;
    std::vector<std::size_t> best_idx;
    for (const auto& cand : all) {
      std::size_t diff = 0, unit = 0;
      for (std::size_t u = 0; u < U; ++u)
        if (cand[u] != cur[u]) {
          ++diff;
          unit = u;
        }
      if (diff != 1 || cand[unit] != cur[unit] + 1) continue;
      const Vector cc = p.cost(cand);
      if (!within(cc, p.limit)) continue;
      double dc = 0.0;
      for (std::size_t t = 0; t < cc.size(); ++t) dc += (cc[t] - c[t]) / p.limit[t];
      const double dm = p.mass[unit][cur[unit]] - p.mass[unit][cand[unit]];
      const double ratio = dc <= 0 ? INFINITY : dm / dc;
      if (!found || ratio > best.ratio || (ratio == best.ratio && unit < best.unit)) {
        found = true;
        best = {unit, cand[unit], ratio};
        best_idx = cand;
      }
    }
    if (!found) break;
    cur = best_idx;
    trace.push_back(best);
  }
  *final_index = cur;
  return trace;
}

inline KnapsackProblem additive_problem(const std::vector<Vector>& cost, const std::vector<Vector>& mass, double limit) {
  KnapsackProblem p;
  for (const Vector& c : cost) p.menu_size.push_back(c.size());
  p.mass = mass;
  p.limit = {limit};
  p.cost = [cost](const std::vector<std::size_t>& idx) {
    double s = 0.0;
    for (std::size_t u = 0; u < idx.size(); ++u) s += cost[u][idx[u]];
    return Vector{s};
  };
  return p;
}

inline LayerParams random_layer(std::size_t m, std::size_t n, std::mt19937_64& rng) {
  const std::size_t r = std::min(m, n);
  LayerParams p;
  p.u = random_matrix(m, r, rng, 0.6);
  p.v = random_matrix(n, r, rng, 0.6);
  p.sigma = Matrix(1, r);
  std::uniform_real_distribution<double> pos(0.5, 2.0);
  for (double& s : p.sigma.data()) s = pos(rng);
  p.bias = random_matrix(1, m, rng, 0.3);
  auto ls = [](const Matrix& t) { return Matrix(1, 1, std::log(max_abs(t.data()) / 127.0)); };
  p.log_su = ls(p.u);
  p.log_sc = ls(p.sigma);
  p.log_sv = ls(p.v);
  p.mask_logits = random_matrix(1, r, rng);
  return p;
}

inline TrainModel random_model(const std::vector<std::size_t>& widths, std::mt19937_64& rng) {
  TrainModel m;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    m.layers.push_back(random_layer(widths[l + 1], widths[l], rng));
    m.acts.push_back(l + 2 == widths.size() ? Activation::Identity : Activation::Relu);
  }
  return m;
}

inline LossInputs base_inputs(const TrainModel& m, const Matrix& x, const std::vector<std::size_t>& y,
                       std::mt19937_64& rng) {
  LossInputs in;
  in.x = &x;
  in.y = &y;
  for (const LayerParams& p : m.layers) {
    in.profile.layers.push_back({p.sigma.cols(), {}});
    in.mask_noise.push_back(random_vector(p.sigma.cols(), rng));
    in.lhat.push_back(1.5);
    in.alpha.push_back(2.0);
    in.budget.slope.push_back(0.01);
    in.budget.offset.push_back(0.05);
  }
  in.budget.base = 0.1;
  in.budget.target = 0.2;
  in.tau = 0.7;
  return in;
}

}  // namespace ecomp::testing
