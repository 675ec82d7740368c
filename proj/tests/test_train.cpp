#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <sstream>

#include "doctest.h"
#include "ecomp/elastic.hpp"
#include "ecomp/train.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace ecomp;
using ecomp::testing::random_matrix;
using ecomp::testing::random_vector;
using ecomp::testing::base_inputs;
using ecomp::testing::random_model;

namespace {

// --- straight-line scalar oracle ------------------------------------------

Matrix quant_oracle(const Matrix& t, double log_s, int bits) {
  if (bits <= 0) return t;
  const double top = std::pow(2.0, bits - 1) - 1.0;
  const double s = std::exp(log_s) * 127.0 / top;
  Matrix out = t;
  for (double& x : out.data()) x = s * std::clamp(std::nearbyint(x / s), -top, top);
  return out;
}

Vector mask_oracle(const Matrix& logits, const Vector& noise, std::size_t k, double tau) {
  const std::size_t n = logits.cols();
  if (k >= n) return Vector(n, 1.0);
  Vector g(n);
  for (std::size_t i = 0; i < n; ++i) g[i] = logits(0, i) + noise[i];
  Vector s = g;
  std::sort(s.begin(), s.end(), std::greater<>());
  const double thr = 0.5 * (s[k - 1] + s[k]);
  Vector m(n);
  for (std::size_t i = 0; i < n; ++i) m[i] = 1.0 / (1.0 + std::exp(-(g[i] - thr) / tau));
  return m;
}

Matrix weight_oracle(const Matrix& u, const Vector& sig, const Matrix& v) {
  Matrix w(u.rows(), v.rows());
  for (std::size_t i = 0; i < u.rows(); ++i)
    for (std::size_t j = 0; j < v.rows(); ++j)
      for (std::size_t a = 0; a < sig.size(); ++a) w(i, j) += u(i, a) * sig[a] * v(j, a);
  return w;
}

Vector logits_oracle(const std::vector<Matrix>& ws, const TrainModel& m, const Vector& x) {
  Vector a = x;
  for (std::size_t l = 0; l < ws.size(); ++l) {
    Vector z(ws[l].rows());
    for (std::size_t i = 0; i < z.size(); ++i) {
      z[i] = m.layers[l].bias(0, i);
      for (std::size_t j = 0; j < a.size(); ++j) z[i] += ws[l](i, j) * a[j];
      if (m.acts[l] == Activation::Relu) z[i] = std::max(0.0, z[i]);
    }
    a = z;
  }
  return a;
}

Vector log_softmax(const Vector& z) {
  const double mx = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double v : z) s += std::exp(v - mx);
  Vector out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] - mx - std::log(s);
  return out;
}

double kl_oracle(const Vector& p, const Vector& q) {
  const Vector lp = log_softmax(p), lq = log_softmax(q);
  double k = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) k += std::exp(lp[i]) * (lp[i] - lq[i]);
  return k;
}

double spectral_oracle(const Matrix& d) {
  const auto ev = ecomp::testing::jacobi_eigenvalues(matmul_nt(d, d));
  return std::sqrt(std::max(0.0, ev.front()));
}

TrainConfig small_config() {
  TrainConfig c;
  c.train_n = 400;
  c.eval_n = 100;
  c.calib_n = 64;
  c.steps = 40;
  c.batch = 16;
  c.refresh_every = 10;
  c.resvd_every = 20;
  c.log_every = 1;
  return c;
}

}  // namespace

TEST_CASE("full profile collapses to the task loss plus the budget term") {
  std::mt19937_64 rng(1);
  const TrainModel m = random_model({5, 6, 4, 3}, rng);
  const Matrix x = random_matrix(7, 5, rng);
  const Matrix xa = random_matrix(7, 5, rng);
  const std::vector<std::size_t> y = {0, 1, 2, 0, 1, 2, 2};
  LossInputs in = base_inputs(m, x, y, rng);
  in.x_aug = &xa;
  in.weights.sd = 0.7;
  in.weights.aug = 0.3;
  in.weights.cert = 0.4;
  in.weights.budget = 0.0;
  const LossTerms t0 = total_loss(m, in);
  CHECK(t0.sd == 0.0);
  CHECK(t0.aug == 0.0);
  CHECK(t0.delta_hat == 0.0);
  CHECK(t0.cert == 0.0);
  CHECK(t0.total == t0.task);

  in.weights.budget = 0.3;
  const LossTerms t1 = total_loss(m, in);
  CHECK(t1.budget > 0.0);
  CHECK(t1.total == t1.task + 0.3 * t1.budget);
}

TEST_CASE("drift cap is exactly zero when the bound is under epsilon") {
  std::mt19937_64 rng(2);
  const TrainModel m = random_model({4, 5, 3}, rng);
  const Matrix x = random_matrix(3, 4, rng);
  const std::vector<std::size_t> y = {0, 1, 2};
  LossInputs in = base_inputs(m, x, y, rng);
  in.profile.layers[0] = {2, FactorBits::uniform(6)};
  in.weights.cert = 1.0;
  in.weights.epsilon = 1e6;
  const LossTerms t = total_loss(m, in);
  CHECK(t.delta_hat > 0.0);
  CHECK(t.cert == 0.0);
}

TEST_CASE("two-class single example matches a straight-line recomputation") {
  std::mt19937_64 rng(3);
  const TrainModel m = random_model({3, 2, 2}, rng);
  const Matrix x(1, 3, {0.8, -1.1, 0.4});
  const Matrix xa(1, 3, {0.83, -1.06, 0.37});
  const std::vector<std::size_t> y = {1};
  LossInputs in;
  in.x = &x;
  in.y = &y;
  in.x_aug = &xa;
  in.profile.layers = {{1, {4, 3, 4}}, {2, {5, 5, 5}}};
  in.mask_noise = {{0.3, -0.2}, {0.1, 0.4}};
  in.tau = 0.6;
  in.weights = {0.5, 0.2, 0.3, 0.4, 0.0, 0.01, 0.0};
  in.lhat = {1.3, 0.7};
  in.alpha = {2.0, 1.0};
  in.budget.base = 0.05;
  in.budget.offset = {0.02, 0.01};
  in.budget.slope = {0.03, 0.02};
  in.budget.target = 0.08;
  const LossTerms t = total_loss(m, in);

  std::vector<Matrix> full, comp;
  double dhat = 0.0, lat = in.budget.base;
  for (std::size_t l = 0; l < 2; ++l) {
    const LayerParams& p = m.layers[l];
    const FactorBits b = in.profile.layers[l].bits;
    full.push_back(weight_oracle(p.u, p.sigma.storage(), p.v));
    const Vector mask = mask_oracle(p.mask_logits, in.mask_noise[l], in.profile.layers[l].k, in.tau);
    const Matrix sq = quant_oracle(p.sigma, p.log_sc(0, 0), b.core);
    Vector sm(mask.size());
    double msum = 0.0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
      sm[i] = sq(0, i) * mask[i];
      msum += mask[i];
    }
    comp.push_back(weight_oracle(quant_oracle(p.u, p.log_su(0, 0), b.u), sm, quant_oracle(p.v, p.log_sv(0, 0), b.v)));
    dhat += in.lhat[l] * in.alpha[l] * spectral_oracle(full[l] - comp[l]);
    lat += in.budget.offset[l] + in.budget.slope[l] * msum;
  }
  const Vector zf = logits_oracle(full, m, x.storage());
  const Vector zc = logits_oracle(comp, m, x.storage());
  const double task = -log_softmax(zf)[1];
  const double sd = kl_oracle(zf, zc);
  const double aug = kl_oracle(logits_oracle(full, m, xa.storage()), logits_oracle(comp, m, xa.storage()));
  const double cert = std::max(0.0, dhat - in.weights.epsilon);
  const double bud = std::max(0.0, lat / in.budget.target - 1.0);
  const double total = task + 0.5 * sd + 0.2 * aug + 0.3 * cert + 0.4 * bud;

  CHECK(sd > 0.0);
  CHECK(cert > 0.0);
  CHECK(bud > 0.0);
  CHECK(std::abs(t.task - task) < 1e-10);
  CHECK(std::abs(t.sd - sd) < 1e-10);
  CHECK(std::abs(t.aug - aug) < 1e-10);
  CHECK(std::abs(t.delta_hat - dhat) < 1e-10);
  CHECK(std::abs(t.cert - cert) < 1e-10);
  CHECK(std::abs(t.budget - bud) < 1e-10);
  CHECK(std::abs(t.total - total) < 1e-10);
}

TEST_CASE("total loss gradient matches central differences under frozen rounding") {
  std::mt19937_64 rng(4);
  const TrainModel m = random_model({4, 5, 3}, rng);
  const Matrix x = random_matrix(3, 4, rng);
  const Matrix xa = random_matrix(3, 4, rng);
  const std::vector<std::size_t> y = {2, 0, 1};
  LossInputs in = base_inputs(m, x, y, rng);
  in.x_aug = &xa;
  in.profile.layers = {{2, {6, 5, 6}}, {2, {}}};
  in.weights = {0.5, 0.2, 0.3, 0.4, 0.0, 0.5, 0.0};
  in.frozen_at = &m;
  TrainModel g;
  const LossTerms base = total_loss(m, in, &g);
  REQUIRE(base.cert > 0.0);

  // Flat views in the model's parameter order.
  auto flat = [](TrainModel& t) {
    std::vector<double*> out;
    for (LayerParams& p : t.layers)
      for (Matrix* q : {&p.u, &p.sigma, &p.v, &p.bias, &p.log_su, &p.log_sc, &p.log_sv, &p.mask_logits})
        for (double& v : q->data()) out.push_back(&v);
    return out;
  };
  TrainModel work = m;
  const std::vector<double*> wp = flat(work);
  const std::vector<double*> gp = flat(g);
  std::uniform_int_distribution<std::size_t> pick(0, wp.size() - 1);
  std::size_t accepted = 0, attempts = 0, worst_i = 0;
  double worst = 0.0;
  while (accepted < 200 && attempts < 2000) {
    ++attempts;
    const std::size_t i = pick(rng);
    const double h = 1e-5, keep = *wp[i];
    *wp[i] = keep + h;
    const LossTerms fp = total_loss(work, in);
    *wp[i] = keep - h;
    const LossTerms fm = total_loss(work, in);
    *wp[i] = keep;
    if (std::min({base.kink_margin, fp.kink_margin, fm.kink_margin}) < 1e-6) continue;
    const double fd = (fp.total - fm.total) / (2 * h);
    const double an = *gp[i];
    const double err = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-4});
    if (err > worst) {
      worst = err;
      worst_i = i;
    }
    ++accepted;
  }
  INFO("worst parameter " << worst_i << " relative error " << worst);
  CHECK(accepted == 200);
  CHECK(worst < 1e-4);
}

TEST_CASE("rank sampler mixture") {
  RankSampler s{1, 16, 100, {4, 8, 16}};
  std::mt19937_64 rng(5);
  SUBCASE("uniform at t = 0") {
    std::vector<double> count(17, 0.0);
    const int n = 10000;
    for (int i = 0; i < n; ++i) count[s.sample(0, rng)] += 1.0;
    double chi2 = 0.0;
    const double e = n / 16.0;
    for (std::size_t k = 1; k <= 16; ++k) chi2 += (count[k] - e) * (count[k] - e) / e;
    CHECK(count[0] == 0.0);
    CHECK(chi2 < 37.70);  // χ²₁₅ at 0.999
  }
  SUBCASE("profile support after annealing") {
    std::set<std::size_t> seen;
    for (int i = 0; i < 2000; ++i) seen.insert(s.sample(100 + i % 7, rng));
    CHECK(seen == std::set<std::size_t>{4, 8, 16});
  }
  SUBCASE("half-way mixture weights") {
    CHECK(s.gamma(50) == 0.5);
    const int n = 20000;
    int outside = 0;
    for (int i = 0; i < n; ++i) {
      const std::size_t k = s.sample(50, rng);
      if (k != 4 && k != 8 && k != 16) ++outside;
    }
    // Uniform draws miss the profile set with probability 13/16.
    const double p = 0.5 * 13.0 / 16.0;
    const double sd = std::sqrt(p * (1 - p) / n);
    CHECK(std::abs(outside / double(n) - p) < 3 * sd);
  }
  SUBCASE("probabilities sum to one") {
    for (std::size_t t : {0, 30, 50, 100, 150}) {
      double total = 0.0;
      for (std::size_t k = 0; k <= 17; ++k) total += s.probability(k, t);
      CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("lambda warmup ramps linearly") {
  CHECK(lambda_warmup(0.4, 0, 100) == 0.0);
  CHECK(lambda_warmup(0.4, 50, 100) == doctest::Approx(0.2).epsilon(1e-15));
  CHECK(lambda_warmup(0.4, 100, 100) == 0.4);
  CHECK(lambda_warmup(0.4, 250, 100) == 0.4);
  CHECK(lambda_warmup(0.4, 0, 0) == 0.4);
}

TEST_CASE("config parsing rejects unknown keys and wrong types") {
  const TrainConfig c = parse_train_config(R"({"steps": 12, "weights": {"cert": 0.0}, "optimizer": "adamw"})");
  CHECK(c.steps == 12);
  CHECK(c.weights.cert == 0.0);
  CHECK(c.weights.sd == TrainConfig{}.weights.sd);
  CHECK(c.optimizer == OptimizerKind::AdamW);
  CHECK(config_hash(parse_train_config(train_config_json(c))) == config_hash(c));
  CHECK(config_hash(c) != config_hash(TrainConfig{}));
  CHECK_THROWS_AS(parse_train_config(R"({"stepz": 1})"), TrainError);
  CHECK_THROWS_AS(parse_train_config(R"({"steps": "many"})"), TrainError);
  CHECK_THROWS_AS(parse_train_config(R"({"steps": 1.5})"), TrainError);
  CHECK_THROWS_AS(parse_train_config(R"({"weights": {"nope": 1}})"), TrainError);
  CHECK_THROWS_AS(parse_train_config(R"({"optimizer": "rmsprop"})"), TrainError);
  CHECK_THROWS_AS(parse_train_config("[1, 2]"), TrainError);
}

TEST_CASE("training is deterministic and resumes bit-for-bit") {
  const TrainConfig c = small_config();
  const ToyRun a = train_toy(c, 3407);
  const ToyRun b = train_toy(c, 3407);
  CHECK(checkpoint_json(a.state) == checkpoint_json(b.state));
  CHECK(a.report.final_loss == b.report.final_loss);

  const ToyRun head = train_toy(c, 3407, nullptr, 17);
  CHECK(head.state.step == 17);
  const TrainState loaded = load_checkpoint(checkpoint_json(head.state));
  CHECK(checkpoint_json(loaded) == checkpoint_json(head.state));
  const ToyRun tail = train_toy(c, 3407, &loaded);
  CHECK(checkpoint_json(tail.state) == checkpoint_json(a.state));

  const ToyRun other = train_toy(c, 2025);
  CHECK(checkpoint_json(other.state) != checkpoint_json(a.state));
}

TEST_CASE("logged schedules follow their closed forms") {
  const TrainConfig c = small_config();
  const ToyRun r = train_toy(c, 9157);
  REQUIRE(r.state.metrics.size() == c.steps);
  const std::size_t anneal = static_cast<std::size_t>(c.anneal_frac * c.steps);
  const std::size_t warm = static_cast<std::size_t>(c.weights.warmup_frac * c.steps);
  for (const MetricRow& row : r.state.metrics) {
    const double t = static_cast<double>(row.step);
    CHECK(row.tau == std::max(c.tau_min, c.tau0 * std::pow(0.5, t / anneal)));
    CHECK(row.gamma == std::max(0.0, 1.0 - t / anneal));
    CHECK(row.lam_sd == doctest::Approx(c.weights.sd * std::min(1.0, t / warm)).epsilon(1e-15));
    CHECK(row.lam_cert == doctest::Approx(c.weights.cert * std::min(1.0, t / warm)).epsilon(1e-15));
  }
  std::ostringstream os;
  write_metrics_csv(os, r.state.metrics);
  const std::string csv = os.str();
  CHECK(csv.rfind("step,tau,gamma,", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == static_cast<long>(c.steps + 1));
}

TEST_CASE("short toy run learns and reports per-profile results") {
  TrainConfig c;
  c.steps = 200;
  const ToyRun r = train_toy(c, 2025);
  CHECK_FALSE(r.report.diverged);
  CHECK(r.report.aborted_steps == 0);
  CHECK(r.report.full_accuracy > 0.8);
  REQUIRE(r.report.profile_ids == std::vector<std::string>{"tiny", "med", "max"});
  for (double a : r.report.accuracy) CHECK(a > 0.6);
  CHECK(r.report.violation_rate_tiny >= 0.0);
  CHECK(r.report.violation_rate_tiny <= 1.0);
  CHECK(r.report.delta_hat[2] <= r.report.delta_hat[0]);
  const ToyData eval = toy_eval_data(c);
  CHECK(eval.size() == 500);
  CHECK(toy_train_data(c).size() == 2000);
}

TEST_CASE("re-factorization preserves the effective weights") {
  std::mt19937_64 rng(6);
  TrainModel m = random_model({6, 5, 4}, rng);
  std::vector<Matrix> before;
  for (const LayerParams& p : m.layers) before.push_back(effective_weight(p));
  reorthogonalize(m);
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    CHECK(frobenius_norm(effective_weight(m.layers[l]) - before[l]) < 1e-10);
    const Matrix utu = matmul_tn(m.layers[l].u, m.layers[l].u);
    CHECK(frobenius_norm(utu - Matrix::identity(utu.rows())) < 1e-10);
    for (std::size_t i = 1; i < m.layers[l].sigma.cols(); ++i)
      CHECK(m.layers[l].sigma(0, i) <= m.layers[l].sigma(0, i - 1));
  }
  const Network net = to_network(m);
  for (std::size_t l = 0; l < m.layers.size(); ++l)
    CHECK(frobenius_norm(truncate_dense(net.blocks[l].layer, net.blocks[l].layer.k_max()) - before[l]) < 1e-10);
}

TEST_CASE("toy data is reproducible and balanced") {
  const ToyData a = make_toy_data(1000, 16, 7);
  const ToyData b = make_toy_data(1000, 16, 7);
  CHECK(a.x == b.x);
  CHECK(a.y == b.y);
  const auto ones = std::count(a.y.begin(), a.y.end(), std::size_t{1});
  CHECK(ones > 400);
  CHECK(ones < 600);
  CHECK_THROWS_AS(make_toy_data(10, 0, 1), TrainError);
}
