// Copyright 2026 The APMA Authors.
// SPDX-License-Identifier: Apache-2.0

#ifndef APMA_OPS_HPP
#define APMA_OPS_HPP

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>

#include <Eigen/Core>

#include "apma/tensor.hpp"

namespace apma {

// Multiply-accumulate instrumentation. State is per thread: a forward pass
// that should be counted must run on the thread that enabled counting.
namespace mac_counter {
namespace detail {
struct State {
  bool enabled = false;
  std::int64_t total = 0;
  std::string label;
  std::map<std::string, std::int64_t> by_label;
};
inline State& state() {
  thread_local State s;
  return s;
}
}  // namespace detail

inline void enable() {
  auto& s = detail::state();
  s.enabled = true;
  s.total = 0;
  s.by_label.clear();
}

inline void disable() { detail::state().enabled = false; }

inline bool enabled() { return detail::state().enabled; }

inline std::int64_t read() {
  const auto& s = detail::state();
  if (!s.enabled) throw ContractError("mac counter read without enable");
  return s.total;
}

/// Counts grouped by the label active when each matmul ran.
inline std::map<std::string, std::int64_t> read_by_label() {
  const auto& s = detail::state();
  if (!s.enabled) throw ContractError("mac counter read without enable");
  return s.by_label;
}

inline void add(std::int64_t n) {
  auto& s = detail::state();
  if (!s.enabled) return;
  s.total += n;
  s.by_label[s.label] += n;
}

/// Scoped label attached to every count recorded while it is alive.
class Label {
 public:
  explicit Label(std::string label) : previous_(detail::state().label) {
    detail::state().label = std::move(label);
  }
  ~Label() { detail::state().label = std::move(previous_); }
  Label(const Label&) = delete;
  Label& operator=(const Label&) = delete;

 private:
  std::string previous_;
};
}  // namespace mac_counter

namespace kernel {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapC = Eigen::Map<const RowMat<T>>;
template <typename T>
using MapM = Eigen::Map<RowMat<T>>;

// out (+)= op(a) * op(b) on raw row-major buffers.
template <typename T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t p, const T* a, const T* b,
             T* out, bool accumulate) {
  MapM<T> o(out, Eigen::Index(m), Eigen::Index(p));
  MapC<T> x(a, Eigen::Index(m), Eigen::Index(k));
  MapC<T> y(b, Eigen::Index(k), Eigen::Index(p));
  if (accumulate) o.noalias() += x * y;
  else o.noalias() = x * y;
}

// out[m x p] (+)= a[m x k] * b[p x k]^T
template <typename T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t p, const T* a, const T* b,
             T* out, bool accumulate) {
  MapM<T> o(out, Eigen::Index(m), Eigen::Index(p));
  MapC<T> x(a, Eigen::Index(m), Eigen::Index(k));
  MapC<T> y(b, Eigen::Index(p), Eigen::Index(k));
  if (accumulate) o.noalias() += x * y.transpose();
  else o.noalias() = x * y.transpose();
}

// out[m x p] (+)= a[k x m]^T * b[k x p]
template <typename T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t p, const T* a, const T* b,
             T* out, bool accumulate) {
  MapM<T> o(out, Eigen::Index(m), Eigen::Index(p));
  MapC<T> x(a, Eigen::Index(k), Eigen::Index(m));
  MapC<T> y(b, Eigen::Index(k), Eigen::Index(p));
  if (accumulate) o.noalias() += x.transpose() * y;
  else o.noalias() = x.transpose() * y;
}

}  // namespace kernel

inline void require_matrix(const Shape& s, const char* what) {
  if (s.size() != 2) {
    throw DimensionError(std::string(what) + " expects a matrix, got " + shape_str(s));
  }
}

/// Standard matrix product; counted when instrumentation is enabled.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a.shape(), "matmul");
  require_matrix(b.shape(), "matmul");
  if (a.shape()[1] != b.shape()[0]) {
    throw DimensionError("matmul inner dimensions differ: " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], p = b.shape()[1];
  Tensor<T> out({m, p});
  kernel::gemm_nn(m, k, p, a.data(), b.data(), out.data(), false);
  mac_counter::add(static_cast<std::int64_t>(m * k * p));
  return out;
}

/// a * b^T, counted.
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a.shape(), "matmul_nt");
  require_matrix(b.shape(), "matmul_nt");
  if (a.shape()[1] != b.shape()[1]) {
    throw DimensionError("matmul_nt inner dimensions differ: " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()) + "^T");
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], p = b.shape()[0];
  Tensor<T> out({m, p});
  kernel::gemm_nt(m, k, p, a.data(), b.data(), out.data(), false);
  mac_counter::add(static_cast<std::int64_t>(m * k * p));
  return out;
}

/// a^T * b, counted.
template <typename T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a.shape(), "matmul_tn");
  require_matrix(b.shape(), "matmul_tn");
  if (a.shape()[0] != b.shape()[0]) {
    throw DimensionError("matmul_tn inner dimensions differ: " + shape_str(a.shape()) +
                         "^T x " + shape_str(b.shape()));
  }
  const std::size_t m = a.shape()[1], k = a.shape()[0], p = b.shape()[1];
  Tensor<T> out({m, p});
  kernel::gemm_tn(m, k, p, a.data(), b.data(), out.data(), false);
  mac_counter::add(static_cast<std::int64_t>(m * k * p));
  return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_matrix(a.shape(), "transpose");
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  Tensor<T> out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out(j, i) = a(i, j);
  return out;
}

/// Row-wise softmax with per-row max subtraction.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& a) {
  require_matrix(a.shape(), "softmax_rows");
  Tensor<T> out(a.shape());
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  for (std::size_t i = 0; i < r; ++i) {
    const T* in = a.data() + i * c;
    T* o = out.data() + i * c;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, in[j]);
    T sum = T(0);
    for (std::size_t j = 0; j < c; ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    const T inv = T(1) / sum;
    for (std::size_t j = 0; j < c; ++j) o[j] *= inv;
  }
  return out;
}

}  // namespace apma

#endif  // APMA_OPS_HPP
