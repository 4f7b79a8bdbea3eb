// Copyright 2026 The APMA Authors.
// SPDX-License-Identifier: Apache-2.0

#ifndef APMA_AUTODIFF_HPP
#define APMA_AUTODIFF_HPP

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "apma/ops.hpp"

namespace apma::ad {

template <typename T>
class Tape;

/// Handle to a tensor recorded on a tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
};

/// Linear record of operations. Node order is topological by construction:
/// an op can only reference handles that already exist.
template <typename T>
class Tape {
 public:
  /// Receives the upstream gradient of the node; writes into operand grads
  /// obtained through grad_slot().
  using Backward = std::function<void(Tape&, const Tensor<T>&)>;

  explicit Tape(bool record_gradients = true) : record_(record_gradients) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad = true) {
    nodes_.push_back(Node{std::move(value), {}, record_ && requires_grad, false});
    return {this, nodes_.size() - 1};
  }

  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward fn,
                bool straight_through = false) {
    return record(std::move(value), std::vector<Var<T>>(inputs), std::move(fn),
                  straight_through);
  }

  Var<T> record(Tensor<T> value, const std::vector<Var<T>>& inputs, Backward fn,
                bool straight_through = false) {
    bool needs = false;
    for (const auto& v : inputs) needs = needs || nodes_[v.id].requires_grad;
    Node n{std::move(value), {}, needs, straight_through};
    if (needs) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  const Tensor<T>& value(const Var<T>& v) const { return nodes_[v.id].value; }
  bool requires_grad(const Var<T>& v) const { return nodes_[v.id].requires_grad; }
  bool is_straight_through(const Var<T>& v) const { return nodes_[v.id].straight_through; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient accumulator of an operand, or nullptr when it needs none.
  Tensor<T>* grad_slot(std::size_t id) {
    if (!nodes_[id].requires_grad) return nullptr;
    auto& g = grads_[id];
    if (!g) g.emplace(nodes_[id].value.shape(), T(0));
    return &*g;
  }

  /// Adds an upstream gradient to a node ahead of backward(); used to inject
  /// gradients computed on other tapes.
  void seed(const Var<T>& v, const Tensor<T>& g) {
    if (g.shape() != value(v).shape()) {
      throw DimensionError("seed gradient shape " + shape_str(g.shape()) +
                           " does not match node " + shape_str(value(v).shape()));
    }
    seeds_.emplace_back(v.id, g);
  }

  /// Reverse accumulation from a scalar loss. Accumulators are reset first.
  void backward(const Var<T>& loss) {
    if (value(loss).size() != 1) {
      throw ContractError("backward requires a scalar loss, got " +
                          shape_str(value(loss).shape()));
    }
    grads_.assign(nodes_.size(), std::nullopt);
    for (auto& [id, g] : seeds_) {
      if (auto* slot = grad_slot(id)) {
        for (std::size_t i = 0; i < g.size(); ++i) (*slot)[i] += g[i];
      }
    }
    seeds_.clear();
    if (auto* slot = grad_slot(loss.id)) (*slot)[0] += T(1);
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      if (!grads_[i] || !nodes_[i].backward) continue;
      // Copy: the callback may grow other accumulators but never this one.
      const Tensor<T> upstream = *grads_[i];
      nodes_[i].backward(*this, upstream);
    }
  }

  /// Gradient after backward(); zeros when the node received none.
  Tensor<T> grad(const Var<T>& v) const {
    if (v.id < grads_.size() && grads_[v.id]) return *grads_[v.id];
    return Tensor<T>(value(v).shape(), T(0));
  }

 private:
  struct Node {
    Tensor<T> value;
    Backward backward;
    bool requires_grad = false;
    bool straight_through = false;
  };
  bool record_;
  std::vector<Node> nodes_;
  std::vector<std::optional<Tensor<T>>> grads_;
  std::vector<std::pair<std::size_t, Tensor<T>>> seeds_;
};

namespace detail {
template <typename T>
void check_same(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + " shapes differ: " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
}

template <typename T>
void check_row_vector(const Var<T>& a, const Var<T>& v, const char* op) {
  if (v.value().size() != a.value().cols()) {
    throw DimensionError(std::string(op) + ": vector of length " +
                         std::to_string(v.value().size()) + " against " +
                         shape_str(a.shape()));
  }
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Products

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  Tape<T>& t = *a.tape;
  const std::size_t ia = a.id, ib = b.id;
  return t.record(apma::matmul(a.value(), b.value()), {a, b},
                  [ia, ib](Tape<T>& tp, const Tensor<T>& g) {
                    const auto& av = tp.value({&tp, ia});
                    const auto& bv = tp.value({&tp, ib});
                    const std::size_t m = av.shape()[0], k = av.shape()[1],
                                      p = bv.shape()[1];
                    if (auto* ga = tp.grad_slot(ia))
                      kernel::gemm_nt(m, p, k, g.data(), bv.data(), ga->data(), true);
                    if (auto* gb = tp.grad_slot(ib))
                      kernel::gemm_tn(k, m, p, av.data(), g.data(), gb->data(), true);
                  });
}

/// Per-segment products over row-stacked blocks. `a` holds B blocks of
/// `seg_a` rows and `b` holds B blocks of `seg_b` rows.
///   nn: out_b = a_b * b_b        (a_b: seg_a x K, b_b: K x P, seg_b = K)
///   nt: out_b = a_b * b_b^T      (a_b: seg_a x K, b_b: seg_b x K)
///   tn: out_b = a_b^T * b_b      (a_b: S x Ca,    b_b: S x Cb, seg_a = seg_b = S)
enum class BlockOp { nn, nt, tn };

template <typename T>
Var<T> block_matmul(const Var<T>& a, const Var<T>& b, std::size_t seg_a,
                    std::size_t seg_b, BlockOp op) {
  const auto& av = a.value();
  const auto& bv = b.value();
  require_matrix(av.shape(), "block_matmul");
  require_matrix(bv.shape(), "block_matmul");
  if (seg_a == 0 || seg_b == 0 || av.rows() % seg_a || bv.rows() % seg_b ||
      av.rows() / seg_a != bv.rows() / seg_b) {
    throw DimensionError("block_matmul segments do not tile " + shape_str(av.shape()) +
                         " and " + shape_str(bv.shape()));
  }
  const std::size_t nb = av.rows() / seg_a;
  const std::size_t ca = av.cols(), cb = bv.cols();
  std::size_t orows = 0, ocols = 0;
  switch (op) {
    case BlockOp::nn:
      if (ca != seg_b) throw DimensionError("block_matmul nn inner dimension");
      orows = seg_a, ocols = cb;
      break;
    case BlockOp::nt:
      if (ca != cb) throw DimensionError("block_matmul nt inner dimension");
      orows = seg_a, ocols = seg_b;
      break;
    case BlockOp::tn:
      if (seg_a != seg_b) throw DimensionError("block_matmul tn inner dimension");
      orows = ca, ocols = cb;
      break;
  }
  Tensor<T> out({nb * orows, ocols});
  for (std::size_t blk = 0; blk < nb; ++blk) {
    const T* ap = av.data() + blk * seg_a * ca;
    const T* bp = bv.data() + blk * seg_b * cb;
    T* op_ = out.data() + blk * orows * ocols;
    switch (op) {
      case BlockOp::nn: kernel::gemm_nn(seg_a, ca, cb, ap, bp, op_, false); break;
      case BlockOp::nt: kernel::gemm_nt(seg_a, ca, seg_b, ap, bp, op_, false); break;
      case BlockOp::tn: kernel::gemm_tn(ca, seg_a, cb, ap, bp, op_, false); break;
    }
  }
  const std::size_t inner = op == BlockOp::nn ? ca : op == BlockOp::nt ? ca : seg_a;
  mac_counter::add(static_cast<std::int64_t>(nb * orows * ocols * inner));

  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(
      std::move(out), {a, b},
      [=](Tape<T>& tp, const Tensor<T>& g) {
        const auto& A = tp.value({&tp, ia});
        const auto& B = tp.value({&tp, ib});
        auto* ga = tp.grad_slot(ia);
        auto* gb = tp.grad_slot(ib);
        for (std::size_t blk = 0; blk < nb; ++blk) {
          const T* ap = A.data() + blk * seg_a * ca;
          const T* bp = B.data() + blk * seg_b * cb;
          const T* gp = g.data() + blk * orows * ocols;
          T* gap = ga ? ga->data() + blk * seg_a * ca : nullptr;
          T* gbp = gb ? gb->data() + blk * seg_b * cb : nullptr;
          switch (op) {
            case BlockOp::nn:  // O = A B
              if (gap) kernel::gemm_nt(seg_a, cb, ca, gp, bp, gap, true);
              if (gbp) kernel::gemm_tn(ca, seg_a, cb, ap, gp, gbp, true);
              break;
            case BlockOp::nt:  // O = A B^T
              if (gap) kernel::gemm_nn(seg_a, seg_b, ca, gp, bp, gap, true);
              if (gbp) kernel::gemm_tn(seg_b, seg_a, ca, gp, ap, gbp, true);
              break;
            case BlockOp::tn:  // O = A^T B
              if (gap) kernel::gemm_nt(seg_a, cb, ca, bp, gp, gap, true);
              if (gbp) kernel::gemm_nn(seg_a, ca, cb, ap, gp, gbp, true);
              break;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::check_same(a, b, "add");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {a, b}, [ia, ib](Tape<T>& tp, const Tensor<T>& g) {
    for (auto id : {ia, ib})
      if (auto* s = tp.grad_slot(id))
        for (std::size_t i = 0; i < g.size(); ++i) (*s)[i] += g[i];
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::check_same(a, b, "sub");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {a, b}, [ia, ib](Tape<T>& tp, const Tensor<T>& g) {
    if (auto* s = tp.grad_slot(ia))
      for (std::size_t i = 0; i < g.size(); ++i) (*s)[i] += g[i];
    if (auto* s = tp.grad_slot(ib))
      for (std::size_t i = 0; i < g.size(); ++i) (*s)[i] -= g[i];
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::check_same(a, b, "mul");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {a, b}, [ia, ib](Tape<T>& tp, const Tensor<T>& g) {
    const auto& av = tp.value({&tp, ia});
    const auto& bv = tp.value({&tp, ib});
    if (auto* s = tp.grad_slot(ia))
      for (std::size_t i = 0; i < g.size(); ++i) (*s)[i] += g[i] * bv[i];
    if (auto* s = tp.grad_slot(ib))
      for (std::size_t i = 0; i < g.size(); ++i) (*s)[i] += g[i] * av[i];
  });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  detail::check_same(a, b, "div");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= b.value()[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {a, b}, [ia, ib](Tape<T>& tp, const Tensor<T>& g) {
    const auto& av = tp.value({&tp, ia});
    const auto& bv = tp.value({&tp, ib});
    if (auto* s = tp.grad_slot(ia))
      for (std::size_t i = 0; i < g.size(); ++i) (*s)[i] += g[i] / bv[i];
    if (auto* s = tp.grad_slot(ib))
      for (std::size_t i = 0; i < g.size(); ++i)
        (*s)[i] -= g[i] * av[i] / (bv[i] * bv[i]);
  });
}

/// a * c + d for constants c, d.
template <typename T>
Var<T> affine(const Var<T>& a, T c, T d = T(0)) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = v * c + d;
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia, c](Tape<T>& tp, const Tensor<T>& g) {
    if (auto* s = tp.grad_slot(ia))
      for (std::size_t i = 0; i < g.size(); ++i) (*s)[i] += g[i] * c;
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T c) {
  return affine(a, c);
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = v > T(0) ? v : T(0);
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia](Tape<T>& tp, const Tensor<T>& g) {
    const auto& av = tp.value({&tp, ia});
    if (auto* s = tp.grad_slot(ia))
      for (std::size_t i = 0; i < g.size(); ++i)
        if (av[i] > T(0)) (*s)[i] += g[i];
  });
}

template <typename T>
Var<T> tanh(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = std::tanh(v);
  const std::size_t ia = a.id, io = a.tape->size();
  return a.tape->record(std::move(out), {a}, [ia, io](Tape<T>& tp, const Tensor<T>& g) {
    const auto& y = tp.value({&tp, io});
    if (auto* s = tp.grad_slot(ia))
      for (std::size_t i = 0; i < g.size(); ++i) (*s)[i] += g[i] * (T(1) - y[i] * y[i]);
  });
}

template <typename T>
Var<T> abs(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = std::abs(v);
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia](Tape<T>& tp, const Tensor<T>& g) {
    const auto& av = tp.value({&tp, ia});
    if (auto* s = tp.grad_slot(ia))
      for (std::size_t i = 0; i < g.size(); ++i)
        (*s)[i] += av[i] > T(0) ? g[i] : av[i] < T(0) ? -g[i] : T(0);
  });
}

/// Positive feature map relu(x) + floor, zeroed on masked-out columns.
template <typename T>
Var<T> feature_map(const Var<T>& a, const Tensor<T>& col_mask, T floor = T(1e-6)) {
  const auto& av = a.value();
  if (col_mask.size() != av.cols()) throw DimensionError("feature_map mask length");
  Tensor<T> out(av.shape());
  const std::size_t c = av.cols();
  for (std::size_t i = 0; i < av.size(); ++i) {
    const T m = col_mask[i % c];
    out[i] = m == T(0) ? T(0) : (av[i] > T(0) ? av[i] : T(0)) + floor;
  }
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {a},
                        [ia, col_mask, c](Tape<T>& tp, const Tensor<T>& g) {
                          const auto& x = tp.value({&tp, ia});
                          if (auto* s = tp.grad_slot(ia))
                            for (std::size_t i = 0; i < g.size(); ++i)
                              if (x[i] > T(0) && col_mask[i % c] != T(0)) (*s)[i] += g[i];
                        });
}

// ---------------------------------------------------------------------------
// Broadcasts and reductions

/// out[r, c] = a[r, c] + v[c]
template <typename T>
Var<T> add_row(const Var<T>& a, const Var<T>& v) {
  detail::check_row_vector(a, v, "add_row");
  Tensor<T> out = a.value();
  const std::size_t c = out.cols();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += v.value()[i % c];
  const std::size_t ia = a.id, iv = v.id;
  return a.tape->record(std::move(out), {a, v}, [ia, iv, c](Tape<T>& tp, const Tensor<T>& g) {
    if (auto* s = tp.grad_slot(ia))
      for (std::size_t i = 0; i < g.size(); ++i) (*s)[i] += g[i];
    if (auto* s = tp.grad_slot(iv))
      for (std::size_t i = 0; i < g.size(); ++i) (*s)[i % c] += g[i];
  });
}

/// out[r, c] = a[r, c] * v[c]; used for channel masks and scales.
template <typename T>
Var<T> mul_row(const Var<T>& a, const Var<T>& v) {
  detail::check_row_vector(a, v, "mul_row");
  Tensor<T> out = a.value();
  const std::size_t c = out.cols();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= v.value()[i % c];
  const std::size_t ia = a.id, iv = v.id;
  return a.tape->record(std::move(out), {a, v}, [ia, iv, c](Tape<T>& tp, const Tensor<T>& g) {
    const auto& av = tp.value({&tp, ia});
    const auto& vv = tp.value({&tp, iv});
    if (auto* s = tp.grad_slot(ia))
      for (std::size_t i = 0; i < g.size(); ++i) (*s)[i] += g[i] * vv[i % c];
    if (auto* s = tp.grad_slot(iv))
      for (std::size_t i = 0; i < g.size(); ++i) (*s)[i % c] += g[i] * av[i];
  });
}

/// Adds a (seg x C) tile to every block of `seg` rows.
template <typename T>
Var<T> add_tiled(const Var<T>& a, const Var<T>& tile) {
  const auto& av = a.value();
  const auto& tv = tile.value();
  if (tv.cols() != av.cols() || tv.rows() == 0 || av.rows() % tv.rows()) {
    throw DimensionError("add_tiled " + shape_str(tv.shape()) + " onto " +
                         shape_str(av.shape()));
  }
  Tensor<T> out = av;
  const std::size_t n = tv.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += tv[i % n];
  const std::size_t ia = a.id, it = tile.id;
  return a.tape->record(std::move(out), {a, tile}, [ia, it, n](Tape<T>& tp, const Tensor<T>& g) {
    if (auto* s = tp.grad_slot(ia))
      for (std::size_t i = 0; i < g.size(); ++i) (*s)[i] += g[i];
    if (auto* s = tp.grad_slot(it))
      for (std::size_t i = 0; i < g.size(); ++i) (*s)[i % n] += g[i];
  });
}

/// Mean over each block of `seg` rows: (B*seg) x C -> B x C.
template <typename T>
Var<T> segment_mean_rows(const Var<T>& a, std::size_t seg) {
  const auto& av = a.value();
  require_matrix(av.shape(), "segment_mean_rows");
  if (seg == 0 || av.rows() % seg) throw DimensionError("segment_mean_rows segment");
  const std::size_t nb = av.rows() / seg, c = av.cols();
  Tensor<T> out({nb, c});
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t r = 0; r < seg; ++r)
      for (std::size_t j = 0; j < c; ++j) out(b, j) += av(b * seg + r, j);
  const T inv = T(1) / T(seg);
  for (auto& v : out.values()) v *= inv;
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [=](Tape<T>& tp, const Tensor<T>& g) {
    if (auto* s = tp.grad_slot(ia))
      for (std::size_t b = 0; b < nb; ++b)
        for (std::size_t r = 0; r < seg; ++r)
          for (std::size_t j = 0; j < c; ++j) (*s)(b * seg + r, j) += g(b, j) * inv;
  });
}

/// out[b*seg + r, c] = a[b*seg + r, c] * s[b, c]
template <typename T>
Var<T> segment_mul_rows(const Var<T>& a, const Var<T>& s, std::size_t seg) {
  const auto& av = a.value();
  const auto& sv = s.value();
  if (seg == 0 || av.rows() % seg || sv.rows() != av.rows() / seg || sv.cols() != av.cols()) {
    throw DimensionError("segment_mul_rows " + shape_str(sv.shape()) + " against " +
                         shape_str(av.shape()));
  }
  const std::size_t c = av.cols();
  Tensor<T> out = av;
  for (std::size_t r = 0; r < av.rows(); ++r)
    for (std::size_t j = 0; j < c; ++j) out(r, j) *= sv(r / seg, j);
  const std::size_t ia = a.id, is = s.id;
  return a.tape->record(std::move(out), {a, s}, [=](Tape<T>& tp, const Tensor<T>& g) {
    const auto& A = tp.value({&tp, ia});
    const auto& S = tp.value({&tp, is});
    auto* ga = tp.grad_slot(ia);
    auto* gs = tp.grad_slot(is);
    for (std::size_t r = 0; r < A.rows(); ++r)
      for (std::size_t j = 0; j < c; ++j) {
        if (ga) (*ga)(r, j) += g(r, j) * S(r / seg, j);
        if (gs) (*gs)(r / seg, j) += g(r, j) * A(r, j);
      }
  });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  T acc = T(0);
  for (T v : a.value().values()) acc += v;
  const std::size_t ia = a.id;
  return a.tape->record(Tensor<T>::scalar(acc), {a}, [ia](Tape<T>& tp, const Tensor<T>& g) {
    if (auto* s = tp.grad_slot(ia))
      for (auto& v : s->values()) v += g[0];
  });
}

template <typename T>
Var<T> slice_cols(const Var<T>& a, std::size_t start, std::size_t width) {
  const auto& av = a.value();
  require_matrix(av.shape(), "slice_cols");
  if (start + width > av.cols()) throw DimensionError("slice_cols out of range");
  const std::size_t c = av.cols();
  Tensor<T> out({av.rows(), width});
  for (std::size_t r = 0; r < av.rows(); ++r)
    std::copy_n(av.data() + r * c + start, width, out.data() + r * width);
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {a}, [=](Tape<T>& tp, const Tensor<T>& g) {
    if (auto* s = tp.grad_slot(ia))
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t j = 0; j < width; ++j) (*s)(r, start + j) += g(r, j);
  });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols of nothing");
  const std::size_t rows = parts[0].value().rows();
  std::size_t total = 0;
  std::vector<std::size_t> widths, ids;
  for (const auto& p : parts) {
    require_matrix(p.value().shape(), "concat_cols");
    if (p.value().rows() != rows) throw DimensionError("concat_cols row counts differ");
    widths.push_back(p.value().cols());
    ids.push_back(p.id);
    total += p.value().cols();
  }
  Tensor<T> out({rows, total});
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto& pv = p.value();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(pv.data() + r * pv.cols(), pv.cols(), out.data() + r * total + off);
    off += pv.cols();
  }
  return parts[0].tape->record(
      std::move(out), parts, [ids, widths](Tape<T>& tp, const Tensor<T>& g) {
        std::size_t o = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (auto* s = tp.grad_slot(ids[k]))
            for (std::size_t r = 0; r < g.rows(); ++r)
              for (std::size_t j = 0; j < widths[k]; ++j) (*s)(r, j) += g(r, o + j);
          o += widths[k];
        }
      });
}

// ---------------------------------------------------------------------------
// Composite kernels

template <typename T>
Var<T> softmax_rows(const Var<T>& a) {
  const std::size_t ia = a.id, io = a.tape->size();
  return a.tape->record(apma::softmax_rows(a.value()), {a},
                        [ia, io](Tape<T>& tp, const Tensor<T>& g) {
                          const auto& y = tp.value({&tp, io});
                          auto* s = tp.grad_slot(ia);
                          if (!s) return;
                          const std::size_t c = y.cols();
                          for (std::size_t r = 0; r < y.rows(); ++r) {
                            T dot = T(0);
                            for (std::size_t j = 0; j < c; ++j) dot += g(r, j) * y(r, j);
                            for (std::size_t j = 0; j < c; ++j)
                              (*s)(r, j) += y(r, j) * (g(r, j) - dot);
                          }
                        });
}

/// Per-row normalization with learned per-channel scale and offset.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias,
                  T eps = T(1e-5)) {
  const auto& xv = x.value();
  require_matrix(xv.shape(), "layer_norm");
  detail::check_row_vector(x, gain, "layer_norm");
  detail::check_row_vector(x, bias, "layer_norm");
  const std::size_t rows = xv.rows(), c = xv.cols();
  Tensor<T> out(xv.shape());
  std::vector<T> mean(rows), rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T mu = T(0);
    for (std::size_t j = 0; j < c; ++j) mu += xv(r, j);
    mu /= T(c);
    T var = T(0);
    for (std::size_t j = 0; j < c; ++j) var += (xv(r, j) - mu) * (xv(r, j) - mu);
    var /= T(c);
    mean[r] = mu;
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j)
      out(r, j) = (xv(r, j) - mu) * rstd[r] * gain.value()[j] + bias.value()[j];
  }
  const std::size_t ix = x.id, ig = gain.id, ib = bias.id;
  Tape<T>& t = *x.tape;
  auto fn = [=](Tape<T>& tp, const Tensor<T>& g) {
    const auto& X = tp.value({&tp, ix});
    const auto& G = tp.value({&tp, ig});
    auto* gx = tp.grad_slot(ix);
    auto* gg = tp.grad_slot(ig);
    auto* gb = tp.grad_slot(ib);
    std::vector<T> xhat(c), dxhat(c);
    for (std::size_t r = 0; r < rows; ++r) {
      T s1 = T(0), s2 = T(0);
      for (std::size_t j = 0; j < c; ++j) {
        xhat[j] = (X(r, j) - mean[r]) * rstd[r];
        dxhat[j] = g(r, j) * G[j];
        s1 += dxhat[j];
        s2 += dxhat[j] * xhat[j];
        if (gg) (*gg)[j] += g(r, j) * xhat[j];
        if (gb) (*gb)[j] += g(r, j);
      }
      if (gx)
        for (std::size_t j = 0; j < c; ++j)
          (*gx)(r, j) += rstd[r] * (dxhat[j] - s1 / T(c) - xhat[j] * s2 / T(c));
    }
  };
  return t.record(std::move(out), {x, gain, bias}, fn);
}

/// Denominator of multi-head linear attention, broadcast to value columns:
///   out[r, c] = sum_{j in head(c)} phi_q[r, j] * sum_{n in seg(r)} phi_k[n, j] + eps
/// Heads split the query/key columns and the value columns evenly.
template <typename T>
Var<T> linear_attention_denominator(const Var<T>& phi_q, const Var<T>& phi_k,
                                    std::size_t seg, std::size_t heads,
                                    std::size_t value_cols, T eps = T(1e-6)) {
  const auto& qv = phi_q.value();
  const auto& kv = phi_k.value();
  if (qv.shape() != kv.shape() || seg == 0 || qv.rows() % seg || heads == 0 ||
      qv.cols() % heads || value_cols % heads) {
    throw DimensionError("linear_attention_denominator shapes " + shape_str(qv.shape()) +
                         " / " + shape_str(kv.shape()));
  }
  const std::size_t rows = qv.rows(), ck = qv.cols(), nb = rows / seg;
  const std::size_t dk = ck / heads, dv = value_cols / heads;
  Tensor<T> ksum({nb, ck});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < ck; ++j) ksum(r / seg, j) += kv(r, j);
  Tensor<T> den({rows, heads});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t h = 0; h < heads; ++h) {
      T acc = T(0);
      for (std::size_t j = h * dk; j < (h + 1) * dk; ++j) acc += qv(r, j) * ksum(r / seg, j);
      den(r, h) = acc + eps;
    }
  Tensor<T> out({rows, value_cols});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < value_cols; ++c) out(r, c) = den(r, dv ? c / dv : 0);
  const std::size_t iq = phi_q.id, ik = phi_k.id;
  return phi_q.tape->record(
      std::move(out), {phi_q, phi_k},
      [=, ksum = std::move(ksum)](Tape<T>& tp, const Tensor<T>& g) {
        const auto& Q = tp.value({&tp, iq});
        Tensor<T> gd({rows, heads});
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < value_cols; ++c) gd(r, c / dv) += g(r, c);
        if (auto* s = tp.grad_slot(iq))
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < ck; ++j)
              (*s)(r, j) += gd(r, j / dk) * ksum(r / seg, j);
        if (auto* s = tp.grad_slot(ik)) {
          Tensor<T> gks({nb, ck});
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < ck; ++j) gks(r / seg, j) += gd(r, j / dk) * Q(r, j);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < ck; ++j) (*s)(r, j) += gks(r / seg, j);
        }
      });
}

/// Mean cross-entropy of row logits against integer labels.
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<int>& labels) {
  const auto& lv = logits.value();
  require_matrix(lv.shape(), "cross_entropy");
  const std::size_t b = lv.rows(), k = lv.cols();
  if (labels.size() != b) throw DimensionError("cross_entropy label count");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= k)
      throw ContractError("cross_entropy label " + std::to_string(y) + " outside [0, " +
                          std::to_string(k) + ")");
  Tensor<T> prob = apma::softmax_rows(lv);
  T loss = T(0);
  for (std::size_t r = 0; r < b; ++r) {
    T mx = lv(r, 0);
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, lv(r, j));
    T se = T(0);
    for (std::size_t j = 0; j < k; ++j) se += std::exp(lv(r, j) - mx);
    loss += -(lv(r, labels[r]) - mx - std::log(se));
  }
  loss /= T(b);
  const std::size_t il = logits.id;
  return logits.tape->record(
      Tensor<T>::scalar(loss), {logits},
      [il, labels, prob = std::move(prob), b](Tape<T>& tp, const Tensor<T>& g) {
        if (auto* s = tp.grad_slot(il)) {
          const T f = g[0] / T(b);
          for (std::size_t r = 0; r < b; ++r) {
            for (std::size_t j = 0; j < prob.cols(); ++j) (*s)(r, j) += f * prob(r, j);
            (*s)(r, labels[r]) -= f;
          }
        }
      });
}

/// Forward yields `forward_value`; backward hands the upstream gradient to
/// `x` unchanged. Shapes of x and forward_value must agree.
template <typename T>
Var<T> straight_through(const Var<T>& x, Tensor<T> forward_value) {
  if (forward_value.shape() != x.shape()) {
    throw DimensionError("straight_through shapes " + shape_str(x.shape()) + " vs " +
                         shape_str(forward_value.shape()));
  }
  const std::size_t ix = x.id;
  return x.tape->record(
      std::move(forward_value), {x},
      [ix](Tape<T>& tp, const Tensor<T>& g) {
        if (auto* s = tp.grad_slot(ix))
          for (std::size_t i = 0; i < g.size(); ++i) (*s)[i] += g[i];
      },
      true);
}

}  // namespace apma::ad

#endif  // APMA_AUTODIFF_HPP
