#pragma once

// Desk-scale training of an elastic dense classifier with the joint
// objective: task CE on the full model, self-distillation and augmentation
// consistency toward a sampled compressed profile, a drift-cap hinge on Δ̂
// and a relaxed budget hinge.

#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "ecomp/certificate.hpp"
#include "ecomp/cost.hpp"
#include "ecomp/network.hpp"

namespace ecomp {

class TrainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ToyData {
  Matrix x;  // n × dim
  std::vector<std::size_t> y;

  std::size_t size() const { return y.size(); }
  Vector row(std::size_t i) const { return x.row(i); }
  std::vector<Vector> rows(std::size_t begin, std::size_t end) const;
};

// Two classes, each a mixture of `modes` isotropic Gaussians whose centres
// alternate between the classes.
ToyData make_toy_data(std::size_t n, std::size_t dim, std::uint64_t seed, std::size_t modes = 6,
                      double centre_scale = 1.0, double spread = 1.0);

struct LossWeights {
  double sd = 0.5;
  double aug = 0.2;
  double cert = 0.2;
  double budget = 0.3;
  double iso = 0.1;      // used by the policy head trainer
  double epsilon = 0.5;  // drift tolerance for the cap
  double warmup_frac = 0.15;
};

// p_t(k) = γ_t·U[k_min, k_max] + (1−γ_t)·U(K_profiles), γ_t = max(0, 1 − t/T).
struct RankSampler {
  std::size_t k_min = 1, k_max = 1;
  std::size_t horizon = 0;
  std::vector<std::size_t> profile_ranks;

  double gamma(std::size_t t) const;
  double probability(std::size_t k, std::size_t t) const;
  std::size_t sample(std::size_t t, std::mt19937_64& rng) const;
};

// Linear ramp 0 → base over warmup_steps, then constant.
double lambda_warmup(double base, std::size_t t, std::size_t warmup_steps);

struct LayerParams {
  Matrix u, sigma, v;   // m×r, 1×r, n×r
  Matrix bias;          // 1×m
  Matrix log_su, log_sc, log_sv;  // 1×1 log-scales at the 8-bit reference
  Matrix mask_logits;   // 1×r
};

struct TrainModel {
  std::vector<LayerParams> layers;
  std::vector<Activation> acts;

  std::size_t parameter_count() const;
};

// Effective full weight U·diag(σ)·Vᵀ.
Matrix effective_weight(const LayerParams& p);
// SVD of the effective weights; Network ranks span [1, min(m, n)].
Network to_network(const TrainModel& m);
// Re-factorizes every layer, re-initializes mask logits and scales.
void reorthogonalize(TrainModel& m);
TrainModel model_from_network(const Network& net);

// Relaxed latency base + Σ_ℓ (offset_ℓ + slope_ℓ·Σ mask_ℓ) at the sampled bits.
struct BudgetRelax {
  double base = 0.0;
  Vector offset, slope;
  double target = 1.0;
};

struct LossInputs {
  const Matrix* x = nullptr;
  const std::vector<std::size_t>* y = nullptr;
  const Matrix* x_aug = nullptr;
  Profile profile;
  std::vector<Vector> mask_noise;  // per layer, length r
  double tau = 1.0;
  LossWeights weights;             // effective (warmed-up) coefficients
  Vector lhat, alpha;              // certificate constants
  BudgetRelax budget;
  // Freezes rounding decisions at this model's values (smooth surrogate).
  const TrainModel* frozen_at = nullptr;
};

struct LossTerms {
  double task = 0, sd = 0, aug = 0, cert = 0, budget = 0, total = 0;
  double delta_hat = 0;
  double kink_margin = 0;
};

// Gradients, if requested, have the layout of the model.
LossTerms total_loss(const TrainModel& model, const LossInputs& in, TrainModel* grads = nullptr);

enum class OptimizerKind { Sgd, AdamW };

struct TrainConfig {
  std::vector<std::size_t> widths = {16, 32, 32, 2};
  Activation hidden = Activation::Relu;
  std::size_t train_n = 2000, eval_n = 500, calib_n = 256;
  std::uint64_t data_seed = 7;
  std::size_t modes = 6;
  double centre_scale = 1.0, spread = 1.0;
  std::size_t steps = 600, batch = 64;
  OptimizerKind optimizer = OptimizerKind::Sgd;
  double lr = 0.02, momentum = 0.9, weight_decay = 0.0;
  double grad_clip = 5.0;  // global L2 norm; 0 disables
  double adam_beta1 = 0.9, adam_beta2 = 0.999;
  LossWeights weights;
  double aug_sigma = 0.05;
  double anneal_frac = 0.5;
  double tau0 = 2.0, tau_min = 0.3;
  Vector curriculum = {0.4, 0.4, 0.2};
  std::size_t refresh_every = 25, resvd_every = 50, log_every = 10;
  std::size_t power_steps = 5;
  double ema_decay = 0.99;
  BitMap bitmap{1.5, 3.0, 8, 1, 0, 1};
  Vector profile_fracs = {0.25, 0.5, 1.0};  // Tiny / Med / Max rank fractions
  std::uint64_t device_seed = 11;
  double mask_spacing = 3.0;
  double divergence_factor = 10.0;
  std::size_t divergence_window = 100;
};

// JSON object; unknown keys and wrong types are errors.
TrainConfig parse_train_config(const std::string& json_text);
std::string train_config_json(const TrainConfig& c);
std::string config_hash(const TrainConfig& c);

struct MetricRow {
  std::size_t step = 0;
  double tau = 0, gamma = 0, lam_sd = 0, lam_aug = 0, lam_cert = 0;
  LossTerms terms;
  std::string ranks;  // "k0/k1/..."
  bool aborted = false;
};

struct TrainState {
  std::size_t step = 0;
  std::uint64_t seed = 0;
  std::mt19937_64 rng;
  TrainModel model;
  std::vector<Matrix> slot1, slot2;  // optimizer buffers, model parameter order
  std::vector<Ema> lhat, alpha;
  double initial_loss = 0.0;
  std::size_t over_count = 0;
  bool diverged = false;
  std::vector<MetricRow> metrics;
};

std::string checkpoint_json(const TrainState& s);
TrainState load_checkpoint(const std::string& json_text);
void write_metrics_csv(std::ostream& os, const std::vector<MetricRow>& rows);

// Tiny / Med / Max templates: rank fraction of k_max with rank-tied bits.
std::vector<Profile> template_profiles(const Network& net, const TrainConfig& cfg);
// Cost model fitted on a planted synthetic device for the toy shapes.
CostModel toy_cost_model(const Network& net, const TrainConfig& cfg, SyntheticDevice* device = nullptr);

double accuracy(const Network& net, const Profile& p, const ToyData& d);
double accuracy_full(const Network& net, const ToyData& d);
// Fraction of samples with logit drift above ε.
double violation_rate(const Network& net, const Profile& p, const ToyData& d, double epsilon);

struct TrainReport {
  std::vector<std::string> profile_ids;
  Vector accuracy;           // per template profile
  double full_accuracy = 0.0;
  double violation_rate_tiny = 0.0;
  Vector delta_hat;          // per template, conservative mode
  double final_loss = 0.0;
  bool diverged = false;
  std::size_t aborted_steps = 0;
};

struct ToyRun {
  TrainConfig cfg;
  TrainState state;
  ToyData train, eval;
  Network net;  // exported (re-factorized) model
  TrainReport report;
};

ToyData toy_train_data(const TrainConfig& cfg);
ToyData toy_eval_data(const TrainConfig& cfg);

// Runs until cfg.steps (or `stop_at`), from `resume` if given.
ToyRun train_toy(const TrainConfig& cfg, std::uint64_t seed, const TrainState* resume = nullptr,
                 std::optional<std::size_t> stop_at = std::nullopt);

}  // namespace ecomp
