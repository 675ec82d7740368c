#include "ecomp/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace ecomp {

namespace {

constexpr double kEps = std::numeric_limits<double>::epsilon();

void check_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw LinalgError(std::string(op) + ": shape mismatch");
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Matrix

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw LinalgError("Matrix: data length " + std::to_string(data_.size()) +
                      " does not match " + std::to_string(rows) + "x" + std::to_string(cols));
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::diagonal(std::span<const double> d) {
  Matrix m(d.size(), d.size());
  for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
  return m;
}

Matrix Matrix::column(std::span<const double> v) {
  return Matrix(v.size(), 1, std::vector<double>(v.begin(), v.end()));
}

Matrix Matrix::transpose() const {
  Matrix t(cols_, rows_);
  for (std::size_t i = 0; i < rows_; ++i)
    for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
  return t;
}

Vector Matrix::col(std::size_t j) const {
  Vector c(rows_);
  for (std::size_t i = 0; i < rows_; ++i) c[i] = (*this)(i, j);
  return c;
}

Vector Matrix::row(std::size_t i) const {
  return Vector(data_.begin() + static_cast<std::ptrdiff_t>(i * cols_),
                data_.begin() + static_cast<std::ptrdiff_t>((i + 1) * cols_));
}

void Matrix::set_col(std::size_t j, std::span<const double> v) {
  for (std::size_t i = 0; i < rows_; ++i) (*this)(i, j) = v[i];
}

Matrix Matrix::leading_cols(std::size_t k) const {
  if (k > cols_) throw LinalgError("leading_cols: k exceeds column count");
  Matrix out(rows_, k);
  for (std::size_t i = 0; i < rows_; ++i)
    for (std::size_t j = 0; j < k; ++j) out(i, j) = (*this)(i, j);
  return out;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw LinalgError("matmul: inner dimension mismatch");
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t p = 0; p < a.cols(); ++p) {
      const double aip = a(i, p);
      if (aip == 0.0) continue;
      for (std::size_t j = 0; j < b.cols(); ++j) c(i, j) += aip * b(p, j);
    }
  }
  return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw LinalgError("matmul_tn: inner dimension mismatch");
  Matrix c(a.cols(), b.cols());
  for (std::size_t p = 0; p < a.rows(); ++p) {
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double api = a(p, i);
      if (api == 0.0) continue;
      for (std::size_t j = 0; j < b.cols(); ++j) c(i, j) += api * b(p, j);
    }
  }
  return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw LinalgError("matmul_nt: inner dimension mismatch");
  Matrix c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.rows(); ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < a.cols(); ++p) s += a(i, p) * b(j, p);
      c(i, j) = s;
    }
  }
  return c;
}

Vector matvec(const Matrix& a, std::span<const double> x) {
  if (a.cols() != x.size()) throw LinalgError("matvec: dimension mismatch");
  Vector y(a.rows(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j) s += a(i, j) * x[j];
    y[i] = s;
  }
  return y;
}

Vector matvec_t(const Matrix& a, std::span<const double> x) {
  if (a.rows() != x.size()) throw LinalgError("matvec_t: dimension mismatch");
  Vector y(a.cols(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double xi = x[i];
    for (std::size_t j = 0; j < a.cols(); ++j) y[j] += a(i, j) * xi;
  }
  return y;
}

Matrix operator+(const Matrix& a, const Matrix& b) {
  check_same_shape(a, b, "operator+");
  Matrix c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c.data()[i] += b.data()[i];
  return c;
}

Matrix operator-(const Matrix& a, const Matrix& b) {
  check_same_shape(a, b, "operator-");
  Matrix c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c.data()[i] -= b.data()[i];
  return c;
}

Matrix operator*(double s, const Matrix& a) {
  Matrix c = a;
  for (double& x : c.data()) x *= s;
  return c;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(std::span<const double> v) {
  // Scaled accumulation keeps tiny and huge entries representable.
  double scale = 0.0, ssq = 1.0;
  for (double x : v) {
    if (x == 0.0) continue;
    const double ax = std::abs(x);
    if (scale < ax) {
      ssq = 1.0 + ssq * (scale / ax) * (scale / ax);
      scale = ax;
    } else {
      ssq += (ax / scale) * (ax / scale);
    }
  }
  return scale * std::sqrt(ssq);
}

double frobenius_norm(const Matrix& a) { return norm2(a.data()); }

double max_abs(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

void require_finite(std::span<const double> v, const std::string& what) {
  if (!all_finite(v)) throw LinalgError(what + ": non-finite entry");
}

// ---------------------------------------------------------------------------
// Tensor4

Tensor4::Tensor4(std::size_t c_out, std::size_t c_in, std::size_t h, std::size_t w, double fill)
    : c_out_(c_out), c_in_(c_in), h_(h), w_(w), data_(c_out * c_in * h * w, fill) {}

Tensor4::Tensor4(std::size_t c_out, std::size_t c_in, std::size_t h, std::size_t w,
                 std::vector<double> data)
    : c_out_(c_out), c_in_(c_in), h_(h), w_(w), data_(std::move(data)) {
  if (data_.size() != c_out * c_in * h * w) throw LinalgError("Tensor4: data length mismatch");
}

Matrix Tensor4::unfold_out() const {
  return Matrix(c_out_, c_in_ * h_ * w_, data_);
}

Matrix Tensor4::unfold_in() const {
  Matrix m(c_in_, c_out_ * h_ * w_);
  const std::size_t hw = h_ * w_;
  for (std::size_t o = 0; o < c_out_; ++o)
    for (std::size_t i = 0; i < c_in_; ++i)
      for (std::size_t s = 0; s < hw; ++s) m(i, o * hw + s) = data_[(o * c_in_ + i) * hw + s];
  return m;
}

Tensor4 Tensor4::fold_out(const Matrix& m, std::size_t c_in, std::size_t h, std::size_t w) {
  if (m.cols() != c_in * h * w) throw LinalgError("fold_out: shape mismatch");
  return Tensor4(m.rows(), c_in, h, w, m.storage());
}

Tensor4 Tensor4::mode_out_product(const Matrix& m) const {
  if (m.cols() != c_out_) throw LinalgError("mode_out_product: shape mismatch");
  const Matrix r = matmul(m, unfold_out());
  return fold_out(r, c_in_, h_, w_);
}

Tensor4 Tensor4::mode_in_product(const Matrix& m) const {
  if (m.cols() != c_in_) throw LinalgError("mode_in_product: shape mismatch");
  const std::size_t r = m.rows();
  const std::size_t hw = h_ * w_;
  Tensor4 out(c_out_, r, h_, w_);
  for (std::size_t o = 0; o < c_out_; ++o)
    for (std::size_t a = 0; a < r; ++a)
      for (std::size_t i = 0; i < c_in_; ++i) {
        const double mai = m(a, i);
        if (mai == 0.0) continue;
        const double* src = &data_[(o * c_in_ + i) * hw];
        double* dst = &out.data_[(o * r + a) * hw];
        for (std::size_t s = 0; s < hw; ++s) dst[s] += mai * src[s];
      }
  return out;
}

double frobenius_norm(const Tensor4& t) { return norm2(t.data()); }

Tensor4 operator-(const Tensor4& a, const Tensor4& b) {
  if (a.c_out() != b.c_out() || a.c_in() != b.c_in() || a.h() != b.h() || a.w() != b.w())
    throw LinalgError("Tensor4 operator-: shape mismatch");
  Tensor4 c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c.data()[i] -= b.data()[i];
  return c;
}

// ---------------------------------------------------------------------------
// Factor reconstructions

Matrix SvdFactors::reconstruct(std::size_t k) const {
  if (k > rank()) throw LinalgError("SvdFactors::reconstruct: k exceeds rank");
  Matrix us(u.rows(), k);
  for (std::size_t i = 0; i < u.rows(); ++i)
    for (std::size_t j = 0; j < k; ++j) us(i, j) = u(i, j) * sigma[j];
  return matmul_nt(us, v.leading_cols(k));
}

Tensor4 Tucker2Factors::reconstruct(std::size_t r_o, std::size_t r_i) const {
  if (r_o > rank_out() || r_i > rank_in())
    throw LinalgError("Tucker2Factors::reconstruct: rank exceeds stored rank");
  Tensor4 g(r_o, r_i, core.h(), core.w());
  for (std::size_t a = 0; a < r_o; ++a)
    for (std::size_t b = 0; b < r_i; ++b)
      for (std::size_t y = 0; y < core.h(); ++y)
        for (std::size_t x = 0; x < core.w(); ++x) g(a, b, y, x) = core(a, b, y, x);
  return g.mode_out_product(u_out.leading_cols(r_o)).mode_in_product(u_in.leading_cols(r_i));
}

Matrix CpFactors::reconstruct(std::size_t r) const {
  if (r > rank()) throw LinalgError("CpFactors::reconstruct: r exceeds rank");
  Matrix scaled(a1.rows(), r);
  for (std::size_t i = 0; i < a1.rows(); ++i)
    for (std::size_t j = 0; j < r; ++j) scaled(i, j) = a1(i, j) * lambda[j];
  return matmul_nt(scaled, a2.leading_cols(r));
}

// ---------------------------------------------------------------------------
// Orthonormalization and small solvers

Matrix orthonormalize_columns(const Matrix& a) {
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  if (n > m) throw LinalgError("orthonormalize_columns: more columns than rows");
  Matrix q(m, n);
  std::size_t basis_probe = 0;
  for (std::size_t j = 0; j < n; ++j) {
    Vector v = a.col(j);
    const double original = norm2(v);
    bool accepted = false;
    for (int attempt = 0; attempt < static_cast<int>(m) + 2 && !accepted; ++attempt) {
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t p = 0; p < j; ++p) {
          double s = 0.0;
          for (std::size_t i = 0; i < m; ++i) s += q(i, p) * v[i];
          for (std::size_t i = 0; i < m; ++i) v[i] -= s * q(i, p);
        }
      }
      const double nv = norm2(v);
      if (nv > 1e-10 * std::max(1.0, original) && nv > 0.0) {
        for (std::size_t i = 0; i < m; ++i) q(i, j) = v[i] / nv;
        accepted = true;
      } else {
        // Column is dependent on previous ones: complete with a unit vector.
        v.assign(m, 0.0);
        v[basis_probe % m] = 1.0;
        ++basis_probe;
      }
    }
    if (!accepted) throw LinalgError("orthonormalize_columns: failed to complete basis");
  }
  return q;
}

Vector least_squares(const Matrix& a_in, std::span<const double> b_in) {
  const std::size_t m = a_in.rows();
  const std::size_t n = a_in.cols();
  if (b_in.size() != m) throw LinalgError("least_squares: dimension mismatch");
  if (n > m) throw LinalgError("least_squares: underdetermined system");
  Matrix a = a_in;
  Vector b(b_in.begin(), b_in.end());
  const double scale = std::max(frobenius_norm(a), 1e-300);
  for (std::size_t k = 0; k < n; ++k) {
    double alpha = 0.0;
    for (std::size_t i = k; i < m; ++i) alpha += a(i, k) * a(i, k);
    alpha = std::sqrt(alpha);
    if (alpha <= 1e-13 * scale) throw LinalgError("least_squares: rank-deficient system");
    if (a(k, k) > 0) alpha = -alpha;
    Vector v(m - k);
    for (std::size_t i = k; i < m; ++i) v[i - k] = a(i, k);
    v[0] -= alpha;
    const double vnorm2 = dot(v, v);
    if (vnorm2 == 0.0) continue;
    for (std::size_t j = k; j < n; ++j) {
      double s = 0.0;
      for (std::size_t i = k; i < m; ++i) s += v[i - k] * a(i, j);
      s = 2.0 * s / vnorm2;
      for (std::size_t i = k; i < m; ++i) a(i, j) -= s * v[i - k];
    }
    double s = 0.0;
    for (std::size_t i = k; i < m; ++i) s += v[i - k] * b[i];
    s = 2.0 * s / vnorm2;
    for (std::size_t i = k; i < m; ++i) b[i] -= s * v[i - k];
  }
  Vector x(n, 0.0);
  for (std::size_t k = n; k-- > 0;) {
    double s = b[k];
    for (std::size_t j = k + 1; j < n; ++j) s -= a(k, j) * x[j];
    x[k] = s / a(k, k);
  }
  return x;
}

Matrix solve_spd(const Matrix& g, const Matrix& b) {
  const std::size_t n = g.rows();
  if (g.cols() != n || b.rows() != n) throw LinalgError("solve_spd: shape mismatch");
  double ridge = 0.0;
  double trace = 0.0;
  for (std::size_t i = 0; i < n; ++i) trace += g(i, i);
  for (int attempt = 0; attempt < 8; ++attempt) {
    Matrix l(n, n);
    bool ok = true;
    for (std::size_t j = 0; j < n && ok; ++j) {
      double d = g(j, j) + ridge;
      for (std::size_t p = 0; p < j; ++p) d -= l(j, p) * l(j, p);
      if (d <= 1e-14 * std::max(trace, 1e-300)) {
        ok = false;
        break;
      }
      l(j, j) = std::sqrt(d);
      for (std::size_t i = j + 1; i < n; ++i) {
        double s = g(i, j);
        for (std::size_t p = 0; p < j; ++p) s -= l(i, p) * l(j, p);
        l(i, j) = s / l(j, j);
      }
    }
    if (!ok) {
      ridge = ridge == 0.0 ? 1e-12 * std::max(trace, 1e-300) : ridge * 100.0;
      continue;
    }
    Matrix x = b;
    for (std::size_t c = 0; c < b.cols(); ++c) {
      for (std::size_t i = 0; i < n; ++i) {
        double s = x(i, c);
        for (std::size_t p = 0; p < i; ++p) s -= l(i, p) * x(p, c);
        x(i, c) = s / l(i, i);
      }
      for (std::size_t i = n; i-- > 0;) {
        double s = x(i, c);
        for (std::size_t p = i + 1; p < n; ++p) s -= l(p, i) * x(p, c);
        x(i, c) = s / l(i, i);
      }
    }
    return x;
  }
  throw LinalgError("solve_spd: matrix is not positive definite");
}

// ---------------------------------------------------------------------------
// SVD

namespace {

// One-sided Jacobi on a tall matrix (rows ≥ cols). Returns all cols()
// components sorted by non-increasing singular value.
SvdFactors jacobi_svd_tall(const Matrix& w) {
  const std::size_t m = w.rows();
  const std::size_t n = w.cols();
  Matrix a = w;
  Matrix v = Matrix::identity(n);
  constexpr int kMaxSweeps = 80;
  const double tol = 4.0 * kEps;
  // Columns below n·ε·‖A‖_F are numerical zeros; rotating them only churns rounding noise.
  double frob2 = 0.0;
  for (double x : a.data()) frob2 += x * x;
  const double floor2 = frob2 * (static_cast<double>(n) * kEps) * (static_cast<double>(n) * kEps);
  bool converged = n < 2;
  for (int sweep = 0; sweep < kMaxSweeps && !converged; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          const double ap = a(i, p), aq = a(i, q);
          alpha += ap * ap;
          beta += aq * aq;
          gamma += ap * aq;
        }
        if (gamma == 0.0 || std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
        if (std::min(alpha, beta) <= floor2) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double ap = a(i, p), aq = a(i, q);
          a(i, p) = c * ap - s * aq;
          a(i, q) = s * ap + c * aq;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double vp = v(i, p), vq = v(i, q);
          v(i, p) = c * vp - s * vq;
          v(i, q) = s * vp + c * vq;
        }
      }
    }
    converged = !rotated;
  }
  if (!converged) throw LinalgError("svd_full: Jacobi iteration did not converge");

  Vector norms(n);
  for (std::size_t j = 0; j < n; ++j) norms[j] = norm2(a.col(j));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return norms[x] > norms[y]; });

  const double smax = n > 0 ? norms[order[0]] : 0.0;
  const double negligible = static_cast<double>(std::max(m, n)) * kEps * smax;
  SvdFactors f{Matrix(m, n), Vector(n), Matrix(n, n)};
  Matrix u_raw(m, n);
  std::vector<bool> needs_completion(n, false);
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t src = order[j];
    f.sigma[j] = norms[src];
    for (std::size_t i = 0; i < n; ++i) f.v(i, j) = v(i, src);
    if (norms[src] > negligible && norms[src] > 0.0) {
      for (std::size_t i = 0; i < m; ++i) u_raw(i, j) = a(i, src) / norms[src];
    } else {
      needs_completion[j] = true;
    }
  }
  // Columns for (numerically) zero singular values are completed to an
  // orthonormal set; their contribution to the reconstruction is ≤ negligible.
  f.u = orthonormalize_columns(u_raw);
  for (std::size_t j = 0; j < n; ++j) {
    if (!needs_completion[j]) {
      // Keep the Jacobi column where it was already orthonormal.
      double d = 0.0;
      for (std::size_t i = 0; i < m; ++i) d += f.u(i, j) * u_raw(i, j);
      if (d < 0) {
        for (std::size_t i = 0; i < m; ++i) f.u(i, j) = -f.u(i, j);
      }
    }
  }
  return f;
}

}  // namespace

SvdFactors svd_full(const Matrix& w, std::size_t k_max) {
  if (w.rows() == 0 || w.cols() == 0) throw LinalgError("svd_full: empty matrix");
  if (k_max > std::min(w.rows(), w.cols()))
    throw LinalgError("svd_full: k_max exceeds min(rows, cols)");
  require_finite(w.data(), "svd_full");
  SvdFactors full;
  if (w.rows() >= w.cols()) {
    full = jacobi_svd_tall(w);
  } else {
    SvdFactors t = jacobi_svd_tall(w.transpose());
    full = SvdFactors{std::move(t.v), std::move(t.sigma), std::move(t.u)};
  }
  SvdFactors out{full.u.leading_cols(k_max), Vector(full.sigma.begin(), full.sigma.begin() + static_cast<std::ptrdiff_t>(k_max)),
                 full.v.leading_cols(k_max)};
  return out;
}

SvdFactors svd_full(const Matrix& w) { return svd_full(w, std::min(w.rows(), w.cols())); }

double spectral_norm_exact(const Matrix& w) {
  if (w.rows() == 0 || w.cols() == 0) return 0.0;
  if (max_abs(w.data()) == 0.0) return 0.0;
  return svd_full(w, 1).sigma[0];
}

double spectral_norm(const Matrix& w, std::size_t iters, std::uint64_t seed) {
  if (iters < 1) throw LinalgError("spectral_norm: iters must be >= 1");
  require_finite(w.data(), "spectral_norm");
  if (max_abs(w.data()) == 0.0) return 0.0;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector v(w.cols());
  for (double& x : v) x = normal(rng);
  double nv = norm2(v);
  for (double& x : v) x /= nv;
  double estimate = 0.0;
  for (std::size_t it = 0; it < iters; ++it) {
    const Vector wv = matvec(w, v);
    const double est = norm2(wv);
    Vector next = matvec_t(w, wv);
    const double nn = norm2(next);
    if (nn == 0.0) {
      // Start vector fell in the null space; restart from a fresh draw.
      for (double& x : v) x = normal(rng);
      nv = norm2(v);
      for (double& x : v) x /= nv;
      continue;
    }
    for (std::size_t i = 0; i < next.size(); ++i) v[i] = next[i] / nn;
    const double prev = estimate;
    estimate = est;
    if (it > 0 && std::abs(estimate - prev) <= 1e-9 * estimate) break;
  }
  return norm2(matvec(w, v));
}

// ---------------------------------------------------------------------------
// Tucker-2

namespace {

// r may exceed the unfolding width; the basis is then completed by
// Gram-Schmidt over the coordinate axes (directions with zero energy).
Matrix leading_left_vectors(const Matrix& m, std::size_t r) {
  const std::size_t have = std::min({r, m.rows(), m.cols()});
  const Matrix lead = svd_full(m, have).u;
  if (have == r) return lead;
  Matrix u(m.rows(), r);
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < have; ++j) u(i, j) = lead(i, j);
  // Each slot takes the axis with the largest residual, which is at least
  // (rows − filled)/rows > 0.
  for (std::size_t filled = have; filled < r; ++filled) {
    Vector best;
    double best_n2 = -1.0;
    for (std::size_t axis = 0; axis < m.rows(); ++axis) {
      Vector c(m.rows(), 0.0);
      c[axis] = 1.0;
      for (int pass = 0; pass < 2; ++pass)
        for (std::size_t j = 0; j < filled; ++j) {
          double d = 0.0;
          for (std::size_t i = 0; i < m.rows(); ++i) d += u(i, j) * c[i];
          for (std::size_t i = 0; i < m.rows(); ++i) c[i] -= d * u(i, j);
        }
      double n2 = 0.0;
      for (double x : c) n2 += x * x;
      if (n2 > best_n2) {
        best_n2 = n2;
        best = std::move(c);
      }
    }
    const double inv = 1.0 / std::sqrt(best_n2);
    for (std::size_t i = 0; i < m.rows(); ++i) u(i, filled) = best[i] * inv;
  }
  return u;
}

Tensor4 tucker2_core(const Tensor4& w, const Matrix& u_out, const Matrix& u_in) {
  return w.mode_out_product(u_out.transpose()).mode_in_product(u_in.transpose());
}

}  // namespace

double relative_error(const Tensor4& w, const Tucker2Factors& f) {
  const double denom = frobenius_norm(w);
  const double err = frobenius_norm(w - f.reconstruct());
  return denom > 0.0 ? err / denom : err;
}

Tucker2Factors tucker2_fit(const Tensor4& w, std::size_t r_o, std::size_t r_i,
                           std::size_t sweeps) {
  if (r_o == 0 || r_i == 0) throw LinalgError("tucker2_fit: ranks must be positive");
  if (r_o > w.c_out() || r_i > w.c_in())
    throw LinalgError("tucker2_fit: rank exceeds channel dimension");
  require_finite(w.data(), "tucker2_fit");

  Tucker2Factors f;
  f.u_out = leading_left_vectors(w.unfold_out(), r_o);
  f.u_in = leading_left_vectors(w.unfold_in(), r_i);
  for (std::size_t s = 0; s < sweeps; ++s) {
    const Tensor4 partial_in = w.mode_in_product(f.u_in.transpose());
    f.u_out = leading_left_vectors(partial_in.unfold_out(), r_o);
    const Tensor4 partial_out = w.mode_out_product(f.u_out.transpose());
    f.u_in = leading_left_vectors(partial_out.unfold_in(), r_i);
  }
  f.core = tucker2_core(w, f.u_out, f.u_in);
  return f;
}

// ---------------------------------------------------------------------------
// CP (two-way)

namespace {

struct CpState {
  Matrix a1, a2;
};

CpState cp_init(const Matrix& w, std::size_t r, const CpOptions& opts) {
  if (opts.init == CpInit::LeadingSingularVectors) {
    SvdFactors s = svd_full(w, r);
    return {s.u, s.v};
  }
  std::mt19937_64 rng(opts.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  CpState st{Matrix(w.rows(), r), Matrix(w.cols(), r)};
  for (double& x : st.a1.data()) x = normal(rng);
  for (double& x : st.a2.data()) x = normal(rng);
  return st;
}

// One ALS sweep: exact least-squares update of a1 given a2, then a2 given a1.
void cp_sweep(const Matrix& w, CpState& st) {
  {
    const Matrix gram = matmul_tn(st.a2, st.a2);
    const Matrix rhs = matmul(w, st.a2);  // d1 × r
    st.a1 = solve_spd(gram, rhs.transpose()).transpose();
  }
  {
    const Matrix gram = matmul_tn(st.a1, st.a1);
    const Matrix rhs = matmul_tn(w, st.a1);  // d2 × r
    st.a2 = solve_spd(gram, rhs.transpose()).transpose();
  }
}

double cp_error(const Matrix& w, const CpState& st) {
  return frobenius_norm(w - matmul_nt(st.a1, st.a2));
}

void check_cp_args(const Matrix& w, std::size_t r) {
  if (r == 0) throw LinalgError("cp_fit: rank must be positive");
  if (r > std::min(w.rows(), w.cols())) throw LinalgError("cp_fit: rank exceeds dimensions");
  require_finite(w.data(), "cp_fit");
}

}  // namespace

CpFactors cp_fit(const Matrix& w, std::size_t r, std::size_t sweeps, const CpOptions& opts) {
  check_cp_args(w, r);
  CpState st = cp_init(w, r, opts);
  if (opts.init == CpInit::LeadingSingularVectors) {
    // Carry the scale on a1 so the initial state is the truncated SVD itself.
    const SvdFactors s = svd_full(w, r);
    for (std::size_t i = 0; i < st.a1.rows(); ++i)
      for (std::size_t j = 0; j < r; ++j) st.a1(i, j) *= s.sigma[j];
  }
  for (std::size_t s = 0; s < sweeps; ++s) cp_sweep(w, st);

  // Per-factor ℓ2 normalization, non-negative weights, descending order,
  // sign fixed so the largest-magnitude entry of a1_j is positive.
  Vector lambda(r);
  for (std::size_t j = 0; j < r; ++j) {
    const double n1 = norm2(st.a1.col(j));
    const double n2 = norm2(st.a2.col(j));
    lambda[j] = n1 * n2;
    for (std::size_t i = 0; i < st.a1.rows(); ++i) st.a1(i, j) = n1 > 0 ? st.a1(i, j) / n1 : 0.0;
    for (std::size_t i = 0; i < st.a2.rows(); ++i) st.a2(i, j) = n2 > 0 ? st.a2(i, j) / n2 : 0.0;
    std::size_t arg = 0;
    for (std::size_t i = 1; i < st.a1.rows(); ++i)
      if (std::abs(st.a1(i, j)) > std::abs(st.a1(arg, j))) arg = i;
    if (st.a1(arg, j) < 0) {
      for (std::size_t i = 0; i < st.a1.rows(); ++i) st.a1(i, j) = -st.a1(i, j);
      for (std::size_t i = 0; i < st.a2.rows(); ++i) st.a2(i, j) = -st.a2(i, j);
    }
  }
  std::vector<std::size_t> order(r);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return lambda[x] > lambda[y]; });
  CpFactors f{Matrix(w.rows(), r), Matrix(w.cols(), r), Vector(r)};
  for (std::size_t j = 0; j < r; ++j) {
    const std::size_t src = order[j];
    f.lambda[j] = lambda[src];
    for (std::size_t i = 0; i < w.rows(); ++i) f.a1(i, j) = st.a1(i, src);
    for (std::size_t i = 0; i < w.cols(); ++i) f.a2(i, j) = st.a2(i, src);
  }
  return f;
}

Vector cp_error_trace(const Matrix& w, std::size_t r, std::size_t sweeps, const CpOptions& opts) {
  check_cp_args(w, r);
  CpState st = cp_init(w, r, opts);
  if (opts.init == CpInit::LeadingSingularVectors) {
    const SvdFactors s = svd_full(w, r);
    for (std::size_t i = 0; i < st.a1.rows(); ++i)
      for (std::size_t j = 0; j < r; ++j) st.a1(i, j) *= s.sigma[j];
  }
  Vector trace{cp_error(w, st)};
  for (std::size_t s = 0; s < sweeps; ++s) {
    cp_sweep(w, st);
    trace.push_back(cp_error(w, st));
  }
  return trace;
}

double spectral_gap_penalty(std::span<const double> sigma, double delta) {
  double total = 0.0;
  for (std::size_t i = 0; i + 1 < sigma.size(); ++i)
    total += std::max(0.0, sigma[i] - sigma[i + 1] - delta);
  return total;
}

}  // namespace ecomp
