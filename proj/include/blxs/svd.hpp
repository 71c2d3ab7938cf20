#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "blxs/matrix.hpp"

namespace blxs {

/// Top-r factors of W = U diag(S) V^T with nonincreasing singular values and
/// orthonormal U, V columns.
struct SvdFactors {
  Matrix u;               // m x r
  std::vector<double> s;  // r, nonincreasing, >= 0
  Matrix v;               // n x r
};

namespace detail {

// One-sided Jacobi (Hestenes) on the columns of x. Returns x reduced to
// mutually orthogonal columns and the accumulated rotations in p, so that
// original_x = x_after * p^T with p exactly orthogonal. Sweeps stop when the
// off-diagonal Frobenius mass of the implicit Gram matrix drops below
// rel_tol of its total mass.
inline void one_sided_jacobi(Matrix& x, Matrix& p, int max_sweeps, double rel_tol) {
  const std::size_t n = x.cols();
  p = Matrix::identity(n);
  if (n < 2) return;

  double off_mass = 0.0;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    off_mass = 0.0;
    for (std::size_t q = 1; q < n; ++q) {
      for (std::size_t pi = 0; pi < q; ++pi) {
        double app = 0.0, aqq = 0.0, apq = 0.0;
        for (std::size_t i = 0; i < x.rows(); ++i) {
          const double xp = x(i, pi), xq = x(i, q);
          app += xp * xp;
          aqq += xq * xq;
          apq += xp * xq;
        }
        off_mass += 2.0 * apq * apq;
        if (apq == 0.0) continue;
        // Skip rotations that are already at numerical orthogonality; they
        // only churn the last bits.
        if (std::abs(apq) <= 1e-18 * std::sqrt(app * aqq)) continue;

        const double zeta = (aqq - app) / (2.0 * apq);
        const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < x.rows(); ++i) {
          const double xp = x(i, pi), xq = x(i, q);
          x(i, pi) = c * xp - s * xq;
          x(i, q) = s * xp + c * xq;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double vp = p(i, pi), vq = p(i, q);
          p(i, pi) = c * vp - s * vq;
          p(i, q) = s * vp + c * vq;
        }
      }
    }
    double total_mass = off_mass;
    for (std::size_t j = 0; j < n; ++j) {
      double col = 0.0;
      for (std::size_t i = 0; i < x.rows(); ++i) col += x(i, j) * x(i, j);
      total_mass += col * col;
    }
    if (std::sqrt(off_mass) <= rel_tol * std::sqrt(std::max(total_mass, 1e-300))) return;
  }
  throw std::runtime_error("truncated_svd: no convergence after " +
                           std::to_string(max_sweeps) +
                           " sweeps, off-diagonal residual " + std::to_string(off_mass));
}

// Fill column j of u with a unit vector orthogonal to columns 0..j-1.
// Needed only when the input matrix has rank below the requested one.
inline void orthonormal_fill(Matrix& u, std::size_t j) {
  const std::size_t m = u.rows();
  for (std::size_t cand = 0; cand < m; ++cand) {
    std::vector<double> e(m, 0.0);
    e[cand] = 1.0;
    for (std::size_t c = 0; c < j; ++c) {
      double dot = 0.0;
      for (std::size_t i = 0; i < m; ++i) dot += e[i] * u(i, c);
      for (std::size_t i = 0; i < m; ++i) e[i] -= dot * u(i, c);
    }
    double norm2 = 0.0;
    for (double x : e) norm2 += x * x;
    if (norm2 > 0.25) {
      const double inv = 1.0 / std::sqrt(norm2);
      for (std::size_t i = 0; i < m; ++i) u(i, j) = e[i] * inv;
      return;
    }
  }
  throw std::runtime_error("truncated_svd: failed to complete orthonormal basis");
}

}  // namespace detail

/// Truncated SVD via one-sided Jacobi applied on the smaller Gram dimension.
/// Deterministic for a fixed input; each singular pair is sign-normalized so
/// the largest-magnitude entry of the U column is positive.
inline SvdFactors truncated_svd(const Matrix& w, std::size_t rank, int max_sweeps = 100,
                                double rel_tol = 1e-12) {
  const std::size_t m = w.rows(), n = w.cols();
  if (rank < 1 || rank > std::min(m, n))
    throw std::invalid_argument("truncated_svd: rank " + std::to_string(rank) +
                                " out of range for " + w.shape_str());

  const bool transposed = m < n;
  Matrix x = transposed ? transpose(w) : w;  // rows >= cols
  Matrix p;
  detail::one_sided_jacobi(x, p, max_sweeps, rel_tol);

  const std::size_t k = x.cols();
  std::vector<double> sv(k);
  for (std::size_t j = 0; j < k; ++j) {
    double s2 = 0.0;
    for (std::size_t i = 0; i < x.rows(); ++i) s2 += x(i, j) * x(i, j);
    sv[j] = std::sqrt(s2);
  }
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return sv[a] > sv[b]; });

  // q holds normalized columns of x, pr the accumulated rotations; both
  // restricted to the kept singular directions.
  Matrix q(x.rows(), rank);
  Matrix pr(k, rank);
  std::vector<double> s(rank);
  const double smax = sv.empty() ? 0.0 : sv[order[0]];
  for (std::size_t j = 0; j < rank; ++j) {
    const std::size_t src = order[j];
    s[j] = sv[src];
    if (s[j] > smax * 1e-300 && s[j] > 0.0) {
      const double inv = 1.0 / s[j];
      for (std::size_t i = 0; i < x.rows(); ++i) q(i, j) = x(i, src) * inv;
    } else {
      s[j] = 0.0;
      detail::orthonormal_fill(q, j);
    }
    for (std::size_t i = 0; i < k; ++i) pr(i, j) = p(i, src);
  }

  SvdFactors f;
  if (transposed) {
    f.u = std::move(pr);
    f.v = std::move(q);
  } else {
    f.u = std::move(q);
    f.v = std::move(pr);
  }
  f.s = std::move(s);

  // Sign convention: largest-magnitude entry of each U column positive.
  for (std::size_t j = 0; j < rank; ++j) {
    std::size_t arg = 0;
    double best = -1.0;
    for (std::size_t i = 0; i < f.u.rows(); ++i) {
      const double a = std::abs(f.u(i, j));
      if (a > best) {
        best = a;
        arg = i;
      }
    }
    if (f.u(arg, j) < 0.0) {
      for (std::size_t i = 0; i < f.u.rows(); ++i) f.u(i, j) = -f.u(i, j);
      for (std::size_t i = 0; i < f.v.rows(); ++i) f.v(i, j) = -f.v(i, j);
    }
  }
  return f;
}

/// U diag(S) V^T for a factor triple.
inline Matrix svd_reconstruct(const SvdFactors& f) {
  Matrix us = f.u;
  for (std::size_t j = 0; j < f.s.size(); ++j)
    for (std::size_t i = 0; i < us.rows(); ++i) us(i, j) *= f.s[j];
  return matmul(us, transpose(f.v));
}

}  // namespace blxs
