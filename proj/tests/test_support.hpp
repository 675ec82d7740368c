#pragma once

// Shared generators and independent oracles for the test suites. Nothing in
// here calls into the code paths it is used to check.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "ecomp/linalg.hpp"

namespace ecomp::testing {

inline Matrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng,
                            double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Matrix m(rows, cols);
  for (double& x : m.data()) x = normal(rng);
  return m;
}

inline Vector random_vector(std::size_t n, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Vector v(n);
  for (double& x : v) x = normal(rng);
  return v;
}

inline Tensor4 random_tensor(std::size_t o, std::size_t i, std::size_t h, std::size_t w,
                             std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor4 t(o, i, h, w);
  for (double& x : t.data()) x = normal(rng);
  return t;
}

// Eigenvalues of a symmetric matrix by classical two-sided cyclic Jacobi,
// returned in descending order.
inline std::vector<double> jacobi_eigenvalues(Matrix a) {
  const std::size_t n = a.rows();
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a(p, q)) < 1e-300) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
      }
    }
  }
  std::vector<double> ev(n);
  for (std::size_t i = 0; i < n; ++i) ev[i] = a(i, i);
  std::sort(ev.begin(), ev.end(), std::greater<>());
  return ev;
}

// Naive Gram matrix WᵀW with explicit triple loop.
inline Matrix gram(const Matrix& w) {
  Matrix g(w.cols(), w.cols());
  for (std::size_t i = 0; i < w.cols(); ++i)
    for (std::size_t j = 0; j < w.cols(); ++j) {
      double s = 0.0;
      for (std::size_t r = 0; r < w.rows(); ++r) s += w(r, i) * w(r, j);
      g(i, j) = s;
    }
  return g;
}

// σ_max via the Gram-matrix eigen oracle.
inline double oracle_spectral_norm(const Matrix& w) {
  const auto ev = jacobi_eigenvalues(gram(w));
  return std::sqrt(std::max(0.0, ev.front()));
}

inline double max_orthonormality_defect(const Matrix& q) {
  double worst = 0.0;
  for (std::size_t i = 0; i < q.cols(); ++i)
    for (std::size_t j = 0; j < q.cols(); ++j) {
      double s = 0.0;
      for (std::size_t r = 0; r < q.rows(); ++r) s += q(r, i) * q(r, j);
      worst = std::max(worst, std::abs(s - (i == j ? 1.0 : 0.0)));
    }
  return worst;
}


// Direct same-padding stride-1 correlation, channel-major layout.
inline Vector naive_conv_same(const Vector& x, const Tensor4& k, std::size_t height,
                              std::size_t width) {
  Vector y(k.c_out() * height * width, 0.0);
  const long pt = static_cast<long>((k.h() - 1) / 2), pl = static_cast<long>((k.w() - 1) / 2);
  for (std::size_t o = 0; o < k.c_out(); ++o)
    for (std::size_t py = 0; py < height; ++py)
      for (std::size_t px = 0; px < width; ++px)
        for (std::size_t c = 0; c < k.c_in(); ++c)
          for (std::size_t dy = 0; dy < k.h(); ++dy)
            for (std::size_t dx = 0; dx < k.w(); ++dx) {
              const long sy = static_cast<long>(py + dy) - pt, sx = static_cast<long>(px + dx) - pl;
              if (sy < 0 || sx < 0 || sy >= static_cast<long>(height) || sx >= static_cast<long>(width))
                continue;
              y[(o * height + py) * width + px] +=
                  k(o, c, dy, dx) * x[(c * height + static_cast<std::size_t>(sy)) * width +
                                      static_cast<std::size_t>(sx)];
            }
  return y;
}

inline double l2(const Vector& a, const Vector& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

inline double l2(const Vector& a) { return l2(a, Vector(a.size(), 0.0)); }

}  // namespace ecomp::testing
