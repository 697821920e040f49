#pragma once

// Reference implementations used only by tests.

#include <algorithm>
#include <cmath>
#include <vector>

#include "pibinn/linalg.hpp"
#include "pibinn/rng.hpp"

namespace oracle {

inline pibinn::DenseMatrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed,
                                         double sd = 1.0) {
  pibinn::DenseMatrix m(r, c);
  const pibinn::rng::Key key{seed, 0x7e57ULL};
  for (std::size_t i = 0; i < r * c; ++i) m.data()[i] = sd * pibinn::rng::normal(key, i);
  return m;
}

inline pibinn::Vector random_vector(std::size_t n, std::uint64_t seed, double sd = 1.0) {
  pibinn::Vector v(n);
  const pibinn::rng::Key key{seed, 0x7e58ULL};
  for (std::size_t i = 0; i < n; ++i) v[i] = sd * pibinn::rng::normal(key, i);
  return v;
}

inline double uniform(std::uint64_t seed, std::uint64_t i, double lo, double hi) {
  return lo + (hi - lo) * pibinn::rng::uniform({seed, 0x7e59ULL}, i);
}

// Cyclic Jacobi eigenvalues of a small symmetric matrix.
inline std::vector<double> jacobi_eigenvalues(std::vector<std::vector<double>> a) {
  const std::size_t n = a.size();
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) off += a[i][j] * a[i][j];
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a[p][q]) < 1e-300) continue;
        const double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k][p], akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p][k], aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
      }
    }
  }
  std::vector<double> ev(n);
  for (std::size_t i = 0; i < n; ++i) ev[i] = a[i][i];
  return ev;
}

// Largest singular value via Jacobi on M^T M.
inline double spectral_norm(const pibinn::DenseMatrix& m) {
  const auto c = static_cast<std::size_t>(m.cols());
  std::vector<std::vector<double>> g(c, std::vector<double>(c, 0.0));
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < c; ++j)
      for (Eigen::Index r = 0; r < m.rows(); ++r) g[i][j] += m(r, i) * m(r, j);
  const auto ev = jacobi_eigenvalues(g);
  return std::sqrt(std::max(0.0, *std::max_element(ev.begin(), ev.end())));
}

// argmin_z 0.5 (z - w)^2 + t * min(|z - l|, |z + l|) by grid scan.
inline double prox_grid(double w, double t, double l, double lo = -5.0, double hi = 5.0,
                        double step = 1e-5) {
  const auto scan = [&](double from, double to, double h, double start) {
    double best = start, best_f = INFINITY;
    const auto n = static_cast<long>((to - from) / h);
    for (long i = 0; i <= n; ++i) {
      const double z = from + h * static_cast<double>(i);
      const double f = 0.5 * (z - w) * (z - w) + t * std::min(std::abs(z - l), std::abs(z + l));
      if (f < best_f) {
        best_f = f;
        best = z;
      }
    }
    return best;
  };
  const double coarse = scan(lo, hi, step, lo);
  // refine near the coarse pick
  return scan(coarse - 2 * step, coarse + 2 * step, step * 1e-3, coarse);
}

// Explicit (v*u) x (p*u) block diagonal matrix.
inline pibinn::DenseMatrix block_diag(const pibinn::DenseMatrix& b, std::size_t u) {
  pibinn::DenseMatrix m = pibinn::DenseMatrix::Zero(b.rows() * u, b.cols() * u);
  for (std::size_t k = 0; k < u; ++k)
    for (Eigen::Index i = 0; i < b.rows(); ++i)
      for (Eigen::Index j = 0; j < b.cols(); ++j) m(k * b.rows() + i, k * b.cols() + j) = b(i, j);
  return m;
}

}  // namespace oracle
