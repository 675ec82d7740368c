#include <cmath>
#include <random>

#include "doctest.h"
#include "ecomp/linalg.hpp"
#include "test_support.hpp"

using namespace ecomp;
using ecomp::testing::random_matrix;

TEST_CASE("svd_full: identity 3x3 reconstructs exactly") {
  const Matrix eye = Matrix::identity(3);
  const SvdFactors f = svd_full(eye, 3);
  for (double s : f.sigma) CHECK(s == doctest::Approx(1.0).epsilon(1e-14));
  const Matrix r = f.reconstruct();
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) CHECK(std::abs(r(i, j) - eye(i, j)) <= 1e-10);
}

TEST_CASE("svd_full: diag(5,3,1) truncated at 2") {
  const double d[] = {5, 3, 1};
  const Matrix w = Matrix::diagonal(d);
  const SvdFactors f = svd_full(w, 2);
  REQUIRE(f.sigma.size() == 2);
  CHECK(f.sigma[0] == doctest::Approx(5.0));
  CHECK(f.sigma[1] == doctest::Approx(3.0));
  CHECK(spectral_norm_exact(w - f.reconstruct()) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("svd_full: random 8x6 against the Gram-eigen oracle") {
  std::mt19937_64 rng(11);
  const Matrix w = random_matrix(8, 6, rng);
  const SvdFactors f = svd_full(w, 6);
  CHECK(frobenius_norm(w - f.reconstruct()) <= 1e-8 * frobenius_norm(w));
  const auto ev = ecomp::testing::jacobi_eigenvalues(ecomp::testing::gram(w));
  for (std::size_t i = 0; i < 6; ++i)
    CHECK(std::abs(f.sigma[i] - std::sqrt(ev[i])) <= 1e-7);
  CHECK(ecomp::testing::max_orthonormality_defect(f.u) <= 1e-8);
  CHECK(ecomp::testing::max_orthonormality_defect(f.v) <= 1e-8);
  for (std::size_t i = 0; i + 1 < 6; ++i) CHECK(f.sigma[i] >= f.sigma[i + 1]);
}

TEST_CASE("svd_full: wide and rank-deficient inputs") {
  std::mt19937_64 rng(5);
  const Matrix a = random_matrix(4, 2, rng);
  const Matrix b = random_matrix(2, 7, rng);
  const Matrix w = matmul(a, b);  // 4x7, rank 2
  const SvdFactors f = svd_full(w, 4);
  CHECK(frobenius_norm(w - f.reconstruct()) <= 1e-10 * frobenius_norm(w));
  CHECK(f.sigma[2] <= 1e-12 * f.sigma[0]);
  CHECK(ecomp::testing::max_orthonormality_defect(f.u) <= 1e-8);
  CHECK(ecomp::testing::max_orthonormality_defect(f.v) <= 1e-8);

  const Matrix zero(3, 3);
  const SvdFactors z = svd_full(zero, 3);
  for (double s : z.sigma) CHECK(s == 0.0);
  CHECK(ecomp::testing::max_orthonormality_defect(z.u) <= 1e-12);
}

TEST_CASE("svd_full: errors") {
  CHECK_THROWS_AS(svd_full(Matrix(3, 2), 3), LinalgError);
  Matrix bad(2, 2);
  bad(0, 0) = std::nan("");
  CHECK_THROWS_AS(svd_full(bad, 1), LinalgError);
}

TEST_CASE("svd_full: Eckart-Young residual identity") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    const Matrix w = random_matrix(12, 9, rng);
    const SvdFactors f = svd_full(w);
    for (std::size_t k = 1; k < f.rank(); ++k) {
      const double resid = ecomp::testing::oracle_spectral_norm(w - f.reconstruct(k));
      CHECK(std::abs(resid - f.sigma[k]) <= 1e-7);
    }
  }
}

TEST_CASE("spectral_norm: diagonal, zero, and random cases") {
  const double d[] = {4, 2};
  CHECK(spectral_norm(Matrix::diagonal(d), 50, 1) == doctest::Approx(4.0).epsilon(1e-6));
  CHECK(spectral_norm(Matrix(5, 5), 10, 1) == 0.0);

  std::mt19937_64 rng(7);
  const Matrix w = random_matrix(10, 10, rng);
  const double exact = svd_full(w, 1).sigma[0];
  CHECK(std::abs(spectral_norm(w, 100, 3) - exact) <= 1e-6 * exact);
  // Transposition invariance and determinism.
  CHECK(std::abs(spectral_norm(w, 100, 3) - spectral_norm(w.transpose(), 100, 3)) <= 1e-6);
  CHECK(spectral_norm(w, 7, 42) == spectral_norm(w, 7, 42));
  CHECK_THROWS_AS(spectral_norm(w, 0, 1), LinalgError);
}

TEST_CASE("tucker2_fit: exact at full rank") {
  std::mt19937_64 rng(9);
  const Tensor4 w = ecomp::testing::random_tensor(4, 3, 3, 3, rng);
  const Tucker2Factors f = tucker2_fit(w, 4, 3, 2);
  CHECK(relative_error(w, f) <= 1e-8);
  CHECK(ecomp::testing::max_orthonormality_defect(f.u_out) <= 1e-8);
  CHECK(ecomp::testing::max_orthonormality_defect(f.u_in) <= 1e-8);
}

TEST_CASE("tucker2_fit: 1x1 kernels with unequal channels complete the basis") {
  std::mt19937_64 rng(10);
  for (auto [o, i] : {std::pair<std::size_t, std::size_t>{6, 2}, {2, 5}}) {
    const Tensor4 w = ecomp::testing::random_tensor(o, i, 1, 1, rng);
    const Tucker2Factors f = tucker2_fit(w, o, i, 1);
    CHECK(f.u_out.cols() == o);
    CHECK(f.u_in.cols() == i);
    CHECK(relative_error(w, f) <= 1e-10);
    CHECK(ecomp::testing::max_orthonormality_defect(f.u_out) <= 1e-10);
    CHECK(ecomp::testing::max_orthonormality_defect(f.u_in) <= 1e-10);
  }
}

TEST_CASE("tucker2_fit: planted rank-(1,1) recovery") {
  std::mt19937_64 rng(13);
  const Vector u = ecomp::testing::random_vector(5, rng);
  const Vector v = ecomp::testing::random_vector(4, rng);
  const Vector g = ecomp::testing::random_vector(9, rng);
  Tensor4 w(5, 4, 3, 3);
  for (std::size_t o = 0; o < 5; ++o)
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t s = 0; s < 9; ++s) w(o, i, s / 3, s % 3) = u[o] * v[i] * g[s];
  const Tucker2Factors f = tucker2_fit(w, 1, 1, 3);
  CHECK(relative_error(w, f) <= 1e-6);
}

TEST_CASE("tucker2_fit: error non-increasing in sweeps") {
  std::mt19937_64 rng(21);
  const Tensor4 w = ecomp::testing::random_tensor(6, 5, 3, 3, rng);
  double prev = relative_error(w, tucker2_fit(w, 2, 2, 0));
  for (std::size_t s = 1; s <= 5; ++s) {
    const double e = relative_error(w, tucker2_fit(w, 2, 2, s));
    CHECK(e <= prev + 1e-12);
    prev = e;
  }
  CHECK_THROWS_AS(tucker2_fit(w, 7, 2, 1), LinalgError);
}

TEST_CASE("cp_fit: rank-1 outer product recovered exactly") {
  std::mt19937_64 rng(17);
  const Vector u = ecomp::testing::random_vector(5, rng);
  const Vector v = ecomp::testing::random_vector(3, rng);
  Matrix w(5, 3);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 3; ++j) w(i, j) = u[i] * v[j];
  for (CpInit init : {CpInit::LeadingSingularVectors, CpInit::Random}) {
    const CpFactors f = cp_fit(w, 1, 10, {init, 4});
    CHECK(frobenius_norm(w - f.reconstruct()) <= 1e-8 * frobenius_norm(w));
    CHECK(norm2(f.a1.col(0)) == doctest::Approx(1.0));
    CHECK(norm2(f.a2.col(0)) == doctest::Approx(1.0));
  }
}

TEST_CASE("cp_fit: full rank matches svd reconstruction error; sorted weights") {
  std::mt19937_64 rng(19);
  const Matrix w = random_matrix(7, 4, rng);
  const CpFactors f = cp_fit(w, 4, 20, {CpInit::Random, 8});
  const double svd_err = frobenius_norm(w - svd_full(w, 4).reconstruct());
  CHECK(std::abs(frobenius_norm(w - f.reconstruct()) - svd_err) <= 1e-6);
  for (std::size_t j = 0; j + 1 < f.rank(); ++j) CHECK(f.lambda[j] >= f.lambda[j + 1]);
  CHECK_THROWS_AS(cp_fit(w, 5, 1), LinalgError);
}

TEST_CASE("cp_fit: ALS error trace non-increasing") {
  std::mt19937_64 rng(23);
  const Matrix w = random_matrix(9, 7, rng);
  const Vector trace = cp_error_trace(w, 3, 15, {CpInit::Random, 2});
  for (std::size_t i = 1; i < trace.size(); ++i) CHECK(trace[i] <= trace[i - 1] * (1 + 1e-12));
  // Converges toward the Eckart-Young optimum.
  const SvdFactors s = svd_full(w);
  double tail = 0.0;
  for (std::size_t i = 3; i < s.rank(); ++i) tail += s.sigma[i] * s.sigma[i];
  CHECK(trace.back() >= std::sqrt(tail) - 1e-9);
}

TEST_CASE("spectral_gap_penalty") {
  const double flat[] = {3, 3, 3};
  CHECK(spectral_gap_penalty(flat, 0.1) == 0.0);
  const double two[] = {5, 1};
  CHECK(spectral_gap_penalty(two, 0.5) == doctest::Approx(3.5));
  const double edge[] = {2, 1, 0};
  CHECK(spectral_gap_penalty(edge, 1.0) == 0.0);
}

TEST_CASE("least_squares and solve_spd") {
  std::mt19937_64 rng(29);
  const Matrix a = random_matrix(10, 4, rng);
  const Vector x_true = {1.0, -2.0, 0.5, 3.0};
  const Vector b = matvec(a, x_true);
  const Vector x = least_squares(a, b);
  for (std::size_t i = 0; i < 4; ++i) CHECK(x[i] == doctest::Approx(x_true[i]).epsilon(1e-10));
  const Matrix g = matmul_tn(a, a);
  const Matrix rhs = Matrix::column(matvec(g, x_true));
  const Matrix y = solve_spd(g, rhs);
  for (std::size_t i = 0; i < 4; ++i) CHECK(y(i, 0) == doctest::Approx(x_true[i]).epsilon(1e-9));
}
