// Copyright 2026 The APMA Authors.
// SPDX-License-Identifier: Apache-2.0

#ifndef APMA_LINALG_HPP
#define APMA_LINALG_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "apma/ops.hpp"

namespace apma {

struct JacobiOptions {
  double tolerance = 1e-10;  // off-diagonal magnitude, relative to ||G||_F
  int max_sweeps = 30;
};

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, in place.
/// Returns the diagonal after convergence (unsorted).
inline std::vector<double> jacobi_eigenvalues(std::vector<double> g, std::size_t n,
                                              const JacobiOptions& opt = {}) {
  auto at = [&](std::size_t i, std::size_t j) -> double& { return g[i * n + j]; };

  double frob = 0.0;
  for (double v : g) frob += v * v;
  frob = std::sqrt(frob);
  const double threshold = opt.tolerance * std::max(frob, 1e-300);

  auto off_max = [&] {
    double m = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) m = std::max(m, std::abs(at(i, j)));
    return m;
  };

  int sweep = 0;
  double residual = off_max();
  while (frob > 0.0 && residual >= threshold) {
    if (sweep == opt.max_sweeps) {
      double norm = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) norm += 2.0 * at(i, j) * at(i, j);
      throw NumericError("Jacobi eigen-solve did not converge in " +
                             std::to_string(opt.max_sweeps) + " sweeps",
                         std::sqrt(norm));
    }
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = at(p, q);
        if (std::abs(apq) < threshold * 1e-3) continue;
        const double app = at(p, p), aqq = at(q, q);
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = at(k, p), akq = at(k, q);
          at(k, p) = c * akp - s * akq;
          at(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = at(p, k), aqk = at(q, k);
          at(p, k) = c * apk - s * aqk;
          at(q, k) = s * apk + c * aqk;
        }
        at(p, q) = 0.0;
        at(q, p) = 0.0;
      }
    }
    ++sweep;
    residual = off_max();
  }
  std::vector<double> eig(n);
  for (std::size_t i = 0; i < n; ++i) eig[i] = at(i, i);
  return eig;
}

/// Singular values in nonincreasing order, as square roots of the
/// eigenvalues of the smaller Gram matrix. Always computed in 64-bit.
template <typename T>
Tensor<T> singular_values(const Tensor<T>& a, const JacobiOptions& opt = {}) {
  require_matrix(a.shape(), "singular_values");
  const std::size_t m = a.shape()[0], p = a.shape()[1];
  const bool use_cols = p <= m;
  const std::size_t n = use_cols ? p : m;
  std::vector<double> gram(n * n, 0.0);
  if (use_cols) {
    for (std::size_t r = 0; r < m; ++r) {
      const T* row = a.data() + r * p;
      for (std::size_t i = 0; i < n; ++i) {
        const double ri = row[i];
        if (ri == 0.0) continue;
        for (std::size_t j = i; j < n; ++j) gram[i * n + j] += ri * double(row[j]);
      }
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      const T* ri = a.data() + i * p;
      for (std::size_t j = i; j < n; ++j) {
        const T* rj = a.data() + j * p;
        double acc = 0.0;
        for (std::size_t k = 0; k < p; ++k) acc += double(ri[k]) * double(rj[k]);
        gram[i * n + j] = acc;
      }
    }
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < i; ++j) gram[i * n + j] = gram[j * n + i];

  auto eig = jacobi_eigenvalues(std::move(gram), n, opt);
  std::sort(eig.begin(), eig.end(), std::greater<>());
  Tensor<T> out({n});
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<T>(std::sqrt(std::max(eig[i], 0.0)));
  return out;
}

}  // namespace apma

#endif  // APMA_LINALG_HPP
