#include <cmath>
#include <random>

#include "doctest.h"
#include "ecomp/quant.hpp"
#include "test_support.hpp"

using namespace ecomp;

namespace {
QuantSpec tensor_spec(int bits, double s) {
  QuantSpec spec;
  spec.bits = bits;
  spec.scales = {s};
  return spec;
}
}  // namespace

TEST_CASE("calibrate_scale: max-range formula") {
  Matrix t(2, 2, {0.3, -12.7, 5.0, 1.0});
  const QuantSpec s = calibrate_scale(t, {.bits = 8});
  CHECK(s.scales[0] == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(calibrate_scale(Matrix(3, 3), {.bits = 4}).scales[0] == 1.0);
}

TEST_CASE("calibrate_scale: per-channel on diag(1,10)") {
  const double d[] = {1, 10};
  const QuantSpec s =
      calibrate_scale(Matrix::diagonal(d), {.bits = 8, .granularity = Granularity::PerChannel});
  REQUIRE(s.scales.size() == 2);
  CHECK(s.scales[0] == doctest::Approx(1.0 / 127));
  CHECK(s.scales[1] == doctest::Approx(10.0 / 127));
}

TEST_CASE("calibrate_scale: percentile clipping") {
  Vector vals(1000);
  for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = static_cast<double>(i + 1);
  Matrix t(1, 1000, vals);
  const QuantSpec s =
      calibrate_scale(t, {.bits = 8, .clip = ClipMode::Percentile, .percentile = 99.0});
  // type-7: h = 999·0.99 = 989.01 → 990 + 0.01
  CHECK(s.scales[0] == doctest::Approx(990.01 / 127).epsilon(1e-12));
  CHECK(percentile({5.0}, 50) == 5.0);
  CHECK(percentile({1.0, 3.0}, 50) == 2.0);
}

TEST_CASE("quantize: grid points are fixed points; ties to even; saturation") {
  const QuantSpec spec = tensor_spec(8, 0.1);
  Matrix grid(1, 5, {-12.7, -0.1, 0.0, 0.3, 12.7});
  const Matrix back = fake_quantize(grid, spec);
  for (std::size_t j = 0; j < 5; ++j) CHECK(back(0, j) == doctest::Approx(grid(0, j)).epsilon(1e-15));

  // 0.5 and 0.25 scale give exact binary ties.
  const QuantSpec half = tensor_spec(8, 0.5);
  Matrix ties(1, 4, {0.25, 0.75, 1.25, -0.25});
  const QuantizedFactor q = quantize(ties, half);
  CHECK(q.codes == std::vector<std::int32_t>{0, 2, 2, 0});
  // Entry 0.55 at s = 0.1: u = 5.5 (up to representation) rounds to 6.
  CHECK(quantize(Matrix(1, 1, {0.55}), spec).codes[0] == 6);
  CHECK(quantize(Matrix(1, 1, {1e6}), spec).codes[0] == 127);
  CHECK(quantize(Matrix(1, 1, {-1e6}), spec).codes[0] == -127);
}

TEST_CASE("dequantize: idempotent, zeros, half-step bound") {
  std::mt19937_64 rng(1);
  const Matrix t = ecomp::testing::random_matrix(6, 5, rng);
  const QuantSpec spec = calibrate_scale(t, {.bits = 8});
  const Matrix d1 = fake_quantize(t, spec);
  CHECK(fake_quantize(d1, spec) == d1);
  for (std::size_t i = 0; i < t.size(); ++i)
    CHECK(std::abs(t.data()[i] - d1.data()[i]) <= spec.scales[0] / 2 * (1 + 1e-12));
  QuantizedFactor z{spec, 2, 2, {0, 0, 0, 0}};
  CHECK(dequantize(z) == Matrix(2, 2));
}

TEST_CASE("quantize: nearest worst case over a fine grid") {
  const QuantSpec spec = tensor_spec(4, 0.37);
  const double top = 7 * 0.37;
  for (int i = -10000; i <= 10000; ++i) {
    const double x = top * i / 10000.0;
    const double d = fake_quantize(Matrix(1, 1, {x}), spec)(0, 0);
    REQUIRE(std::abs(x - d) <= 0.37 / 2 + 1e-15);
  }
}

TEST_CASE("quantize: stochastic rounding determinism and unbiasedness") {
  QuantSpec spec = tensor_spec(8, 0.1);
  spec.rounding = Rounding::Stochastic;
  spec.seed = 99;
  Matrix t(1, 20000, 0.234);
  const QuantizedFactor a = quantize(t, spec);
  const QuantizedFactor b = quantize(t, spec);
  CHECK(a.codes == b.codes);
  double mean = 0.0;
  for (auto c : a.codes) {
    CHECK((c == 2 || c == 3));
    mean += c * 0.1;
  }
  mean /= static_cast<double>(a.codes.size());
  CHECK(std::abs(mean - 0.234) <= 4 * 0.05 / std::sqrt(20000.0));
  spec.seed = 100;
  CHECK(quantize(t, spec).codes != a.codes);
}

TEST_CASE("per-channel error never exceeds per-tensor error") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    Matrix t = ecomp::testing::random_matrix(5, 7, rng);
    // Uneven row magnitudes make the comparison informative.
    for (std::size_t j = 0; j < 7; ++j) t(trial % 5, j) *= 20.0;
    const Matrix pt = fake_quantize(t, calibrate_scale(t, {.bits = 4}));
    const Matrix pc = fake_quantize(
        t, calibrate_scale(t, {.bits = 4, .granularity = Granularity::PerChannel}));
    CHECK(frobenius_norm(t - pc) <= frobenius_norm(t - pt) + 1e-12);
  }
}

TEST_CASE("ste_gradient: pass-through, saturation, finite differences") {
  const QuantSpec spec = tensor_spec(4, 0.25);  // range ±1.75
  Matrix up(2, 2, {1.0, -2.0, 0.5, 3.0});
  Matrix in_range(2, 2, {0.1, -0.3, 1.2, 0.61});
  CHECK(ste_gradient(up, in_range, spec).d_t == up);
  Matrix sat(2, 2, {5.0, -5.0, 9.0, -3.0});
  const SteGradient gs = ste_gradient(up, sat, spec);
  CHECK(gs.d_t == Matrix(2, 2));
  CHECK(gs.d_log_scale[0] == 0.0);

  // Mixed: two in range, two saturated. Oracle: central differences of the
  // frozen-rounding surrogate with loss Σ up ⊙ Q.
  Matrix t0(2, 2, {0.33, -4.0, 1.07, 2.5});
  const SteGradient g = ste_gradient(up, t0, spec);
  const Vector ls0 = {std::log(0.25)};
  auto loss = [&](const Matrix& t, const Vector& ls) {
    const Matrix q = ste_surrogate(t, ls, t0, spec);
    double s = 0.0;
    for (std::size_t i = 0; i < 4; ++i) s += up.data()[i] * q.data()[i];
    return s;
  };
  const double h = 1e-6;
  for (std::size_t i = 0; i < 4; ++i) {
    Matrix p = t0, m = t0;
    p.data()[i] += h;
    m.data()[i] -= h;
    const double fd = (loss(p, ls0) - loss(m, ls0)) / (2 * h);
    CHECK(std::abs(fd - g.d_t.data()[i]) <= 1e-6);
  }
  const double fd_s = (loss(t0, {ls0[0] + h}) - loss(t0, {ls0[0] - h})) / (2 * h);
  CHECK(std::abs(fd_s - g.d_log_scale[0]) <= 1e-6);
  // Surrogate agrees with the real quantizer at the expansion point.
  CHECK(frobenius_norm(ste_surrogate(t0, ls0, t0, spec) - fake_quantize(t0, spec)) <= 1e-15);
}

TEST_CASE("bias_correction") {
  const QuantSpec spec = tensor_spec(8, 0.1);
  // Constant off-grid tensor: δ is the single-element rounding error.
  std::vector<Matrix> batch = {Matrix(3, 3, 0.123)};
  const Vector d = bias_correction(batch, spec);
  CHECK(d[0] == doctest::Approx(0.123 - 0.1).epsilon(1e-12));
  // Symmetric error distribution.
  std::vector<Matrix> sym = {Matrix(1, 2, {0.02, -0.02})};
  CHECK(std::abs(bias_correction(sym, spec)[0]) <= 1e-15);
  // Corrected mean error vanishes on the calibration batch.
  std::mt19937_64 rng(8);
  QuantSpec pc = calibrate_scale(ecomp::testing::random_matrix(4, 6, rng),
                                 {.bits = 3, .granularity = Granularity::PerChannel});
  std::vector<Matrix> cal;
  for (int i = 0; i < 5; ++i) cal.push_back(ecomp::testing::random_matrix(4, 6, rng));
  const Vector delta = bias_correction(cal, pc);
  for (std::size_t c = 0; c < 4; ++c) {
    double err = 0.0;
    for (const Matrix& t : cal) {
      const Matrix q = fake_quantize(t, pc);
      for (std::size_t j = 0; j < 6; ++j) err += t(c, j) - (q(c, j) + delta[c]);
    }
    CHECK(std::abs(err / 30.0) <= 1e-10);
  }
  CHECK_THROWS_AS(bias_correction({}, spec), LinalgError);
}
