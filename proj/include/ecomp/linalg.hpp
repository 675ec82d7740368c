#pragma once

// Dense numerical kernels for desk-scale factorized layers: row-major
// matrices, rank-4 kernels, one-sided Jacobi SVD, power iteration,
// Tucker-2 (HOSVD + HOOI) and two-way CP-ALS fitting.

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ecomp {

using Vector = std::vector<double>;

class LinalgError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix identity(std::size_t n);
  static Matrix diagonal(std::span<const double> d);
  static Matrix column(std::span<const double> v);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& storage() const { return data_; }

  Matrix transpose() const;
  Vector col(std::size_t j) const;
  Vector row(std::size_t i) const;
  void set_col(std::size_t j, std::span<const double> v);
  // First k columns.
  Matrix leading_cols(std::size_t k) const;

  bool operator==(const Matrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix matmul(const Matrix& a, const Matrix& b);
// aᵀ·b without materializing the transpose.
Matrix matmul_tn(const Matrix& a, const Matrix& b);
// a·bᵀ without materializing the transpose.
Matrix matmul_nt(const Matrix& a, const Matrix& b);
Vector matvec(const Matrix& a, std::span<const double> x);
Vector matvec_t(const Matrix& a, std::span<const double> x);
Matrix operator+(const Matrix& a, const Matrix& b);
Matrix operator-(const Matrix& a, const Matrix& b);
Matrix operator*(double s, const Matrix& a);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> v);
double frobenius_norm(const Matrix& a);
double max_abs(std::span<const double> v);
bool all_finite(std::span<const double> v);
void require_finite(std::span<const double> v, const std::string& what);

// C_out × C_in × h × w kernel, row-major in that index order.
class Tensor4 {
 public:
  Tensor4() = default;
  Tensor4(std::size_t c_out, std::size_t c_in, std::size_t h, std::size_t w, double fill = 0.0);
  Tensor4(std::size_t c_out, std::size_t c_in, std::size_t h, std::size_t w,
          std::vector<double> data);

  std::size_t c_out() const { return c_out_; }
  std::size_t c_in() const { return c_in_; }
  std::size_t h() const { return h_; }
  std::size_t w() const { return w_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t o, std::size_t i, std::size_t y, std::size_t x) {
    return data_[((o * c_in_ + i) * h_ + y) * w_ + x];
  }
  double operator()(std::size_t o, std::size_t i, std::size_t y, std::size_t x) const {
    return data_[((o * c_in_ + i) * h_ + y) * w_ + x];
  }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  // Mode-1 unfolding: C_out × (C_in·h·w). Same memory layout.
  Matrix unfold_out() const;
  // Mode-2 unfolding: C_in × (C_out·h·w).
  Matrix unfold_in() const;
  static Tensor4 fold_out(const Matrix& m, std::size_t c_in, std::size_t h, std::size_t w);

  // W ×₁ m : contracts the C_out mode with m (r × C_out).
  Tensor4 mode_out_product(const Matrix& m) const;
  // W ×₂ m : contracts the C_in mode with m (r × C_in).
  Tensor4 mode_in_product(const Matrix& m) const;

  bool operator==(const Tensor4& other) const = default;

 private:
  std::size_t c_out_ = 0, c_in_ = 0, h_ = 0, w_ = 0;
  std::vector<double> data_;
};

double frobenius_norm(const Tensor4& t);
Tensor4 operator-(const Tensor4& a, const Tensor4& b);

struct SvdFactors {
  Matrix u;      // m × r
  Vector sigma;  // r, non-increasing
  Matrix v;      // n × r

  std::size_t rank() const { return sigma.size(); }
  // U_{:,1:k} Σ_{1:k} V_{:,1:k}ᵀ
  Matrix reconstruct(std::size_t k) const;
  Matrix reconstruct() const { return reconstruct(rank()); }
};

struct Tucker2Factors {
  Matrix u_out;  // C_out × r_o
  Tensor4 core;  // r_o × r_i × h × w
  Matrix u_in;   // C_in × r_i

  std::size_t rank_out() const { return u_out.cols(); }
  std::size_t rank_in() const { return u_in.cols(); }
  // Recomposition using the leading (r_o, r_i) block of the factors.
  Tensor4 reconstruct(std::size_t r_o, std::size_t r_i) const;
  Tensor4 reconstruct() const { return reconstruct(rank_out(), rank_in()); }
};

struct CpFactors {
  Matrix a1;      // d1 × r, unit columns
  Matrix a2;      // d2 × r, unit columns
  Vector lambda;  // r, non-increasing, ≥ 0

  std::size_t rank() const { return lambda.size(); }
  Matrix reconstruct(std::size_t r) const;
  Matrix reconstruct() const { return reconstruct(rank()); }
};

// Thin SVD truncated to k_max components via one-sided (Hestenes) Jacobi.
// Singular values are sorted non-increasing; ties keep column order.
SvdFactors svd_full(const Matrix& w, std::size_t k_max);
SvdFactors svd_full(const Matrix& w);

// Largest singular value, exact up to rounding (via svd_full).
double spectral_norm_exact(const Matrix& w);

// Power-iteration estimate of σ_max. Stops after `iters` steps or when the
// relative change of the estimate drops below 1e-9. Zero matrix gives 0.
double spectral_norm(const Matrix& w, std::size_t iters = 100, std::uint64_t seed = 0);

// Channel-only Tucker-2 fit: HOSVD initialization followed by `sweeps`
// alternating (HOOI) updates.
Tucker2Factors tucker2_fit(const Tensor4& w, std::size_t r_o, std::size_t r_i,
                           std::size_t sweeps);
double relative_error(const Tensor4& w, const Tucker2Factors& f);

enum class CpInit { LeadingSingularVectors, Random };

struct CpOptions {
  CpInit init = CpInit::LeadingSingularVectors;
  std::uint64_t seed = 0;
};

// Rank-r CP (sum of outer products) fit of a matrix by alternating least
// squares; output columns unit-norm with weights sorted descending.
CpFactors cp_fit(const Matrix& w, std::size_t r, std::size_t sweeps, const CpOptions& opts = {});
// Frobenius reconstruction error after each sweep (entry 0 = initialization).
Vector cp_error_trace(const Matrix& w, std::size_t r, std::size_t sweeps,
                      const CpOptions& opts = {});

// Σ_i max(0, σ_i − σ_{i+1} − δ)
double spectral_gap_penalty(std::span<const double> sigma, double delta);

// Orthonormal basis of the column space (modified Gram-Schmidt with
// re-orthogonalization); rank-deficient columns are replaced by completions.
Matrix orthonormalize_columns(const Matrix& a);

// Least squares min ‖A x − b‖₂ via Householder QR. A must have full column rank.
Vector least_squares(const Matrix& a, std::span<const double> b);

// Solves (G) X = B for symmetric positive definite G (Cholesky); a tiny
// diagonal ridge is added if G is numerically singular.
Matrix solve_spd(const Matrix& g, const Matrix& b);

}  // namespace ecomp
