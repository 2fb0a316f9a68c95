#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <type_traits>
#include <vector>

#include "coe/tape.hpp"
#include "coe/tensor.hpp"

namespace coe {

template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

namespace detail {

template <typename T>
std::vector<int> tape_inputs(const std::type_identity_t<Tape<T>>* tape, std::initializer_list<const Tensor<T>*> ts) {
  std::vector<int> ids;
  if (!tape) return ids;
  for (const auto* t : ts) {
    const int id = t->node_on(tape);
    if (id >= 0) ids.push_back(id);
  }
  return ids;
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

}  // namespace detail

// --- matrix products --------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, std::type_identity_t<Tape<T>>* tape = nullptr) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0])
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  const auto m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  Tensor<T> out({m, n});
  MatMap<T>(out.data().data(), m, n).noalias() =
      ConstMatMap<T>(a.data().data(), m, k) * ConstMatMap<T>(b.data().data(), k, n);
  auto ids = detail::tape_inputs(tape, {&a, &b});
  if (!ids.empty()) {
    const int ia = a.node_on(tape), ib = b.node_on(tape);
    tape->record(out, std::move(ids), [a, b, ia, ib, m, k, n](std::span<const T> g, Tape<T>& tp) {
      ConstMatMap<T> G(g.data(), m, n);
      if (ia >= 0)
        MatMap<T>(tp.grad(ia).data(), m, k).noalias() +=
            G * ConstMatMap<T>(b.data().data(), k, n).transpose();
      if (ib >= 0)
        MatMap<T>(tp.grad(ib).data(), k, n).noalias() +=
            ConstMatMap<T>(a.data().data(), m, k).transpose() * G;
    });
  }
  return out;
}

// a[m×k] · b[n×k]ᵀ -> [m×n]
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b, std::type_identity_t<Tape<T>>* tape = nullptr) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1])
    throw ShapeError("matmul_nt: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  const auto m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  Tensor<T> out({m, n});
  MatMap<T>(out.data().data(), m, n).noalias() =
      ConstMatMap<T>(a.data().data(), m, k) * ConstMatMap<T>(b.data().data(), n, k).transpose();
  auto ids = detail::tape_inputs(tape, {&a, &b});
  if (!ids.empty()) {
    const int ia = a.node_on(tape), ib = b.node_on(tape);
    tape->record(out, std::move(ids), [a, b, ia, ib, m, k, n](std::span<const T> g, Tape<T>& tp) {
      ConstMatMap<T> G(g.data(), m, n);
      if (ia >= 0)
        MatMap<T>(tp.grad(ia).data(), m, k).noalias() +=
            G * ConstMatMap<T>(b.data().data(), n, k);
      if (ib >= 0)
        MatMap<T>(tp.grad(ib).data(), n, k).noalias() +=
            G.transpose() * ConstMatMap<T>(a.data().data(), m, k);
    });
  }
  return out;
}

// --- elementwise suite ------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b, std::type_identity_t<Tape<T>>* tape = nullptr) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  auto o = out.data();
  auto pa = a.data(), pb = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = pa[i] + pb[i];
  auto ids = detail::tape_inputs(tape, {&a, &b});
  if (!ids.empty()) {
    const int ia = a.node_on(tape), ib = b.node_on(tape);
    tape->record(out, std::move(ids), [ia, ib](std::span<const T> g, Tape<T>& tp) {
      for (int id : {ia, ib}) {
        if (id < 0) continue;
        auto dst = tp.grad(id);
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b, std::type_identity_t<Tape<T>>* tape = nullptr) {
  detail::require_same_shape(a, b, "sub");
  Tensor<T> out(a.shape());
  auto o = out.data();
  auto pa = a.data(), pb = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = pa[i] - pb[i];
  auto ids = detail::tape_inputs(tape, {&a, &b});
  if (!ids.empty()) {
    const int ia = a.node_on(tape), ib = b.node_on(tape);
    tape->record(out, std::move(ids), [ia, ib](std::span<const T> g, Tape<T>& tp) {
      if (ia >= 0) {
        auto dst = tp.grad(ia);
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
      }
      if (ib >= 0) {
        auto dst = tp.grad(ib);
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] -= g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b, std::type_identity_t<Tape<T>>* tape = nullptr) {
  detail::require_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  auto o = out.data();
  auto pa = a.data(), pb = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = pa[i] * pb[i];
  auto ids = detail::tape_inputs(tape, {&a, &b});
  if (!ids.empty()) {
    const int ia = a.node_on(tape), ib = b.node_on(tape);
    tape->record(out, std::move(ids), [a, b, ia, ib](std::span<const T> g, Tape<T>& tp) {
      if (ia >= 0) {
        auto dst = tp.grad(ia);
        auto pb2 = b.data();
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * pb2[i];
      }
      if (ib >= 0) {
        auto dst = tp.grad(ib);
        auto pa2 = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * pa2[i];
      }
    });
  }
  return out;
}

// Scalar broadcast: out = a * s.
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s, std::type_identity_t<Tape<T>>* tape = nullptr) {
  Tensor<T> out(a.shape());
  auto o = out.data();
  auto pa = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = pa[i] * s;
  auto ids = detail::tape_inputs(tape, {&a});
  if (!ids.empty()) {
    const int ia = ids[0];
    tape->record(out, std::move(ids), [ia, s](std::span<const T> g, Tape<T>& tp) {
      auto dst = tp.grad(ia);
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * s;
    });
  }
  return out;
}

// Scalar broadcast: out = a + s.
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s, std::type_identity_t<Tape<T>>* tape = nullptr) {
  Tensor<T> out(a.shape());
  auto o = out.data();
  auto pa = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = pa[i] + s;
  auto ids = detail::tape_inputs(tape, {&a});
  if (!ids.empty()) {
    const int ia = ids[0];
    tape->record(out, std::move(ids), [ia](std::span<const T> g, Tape<T>& tp) {
      auto dst = tp.grad(ia);
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x, std::type_identity_t<Tape<T>>* tape = nullptr) {
  Tensor<T> out(x.shape());
  Tensor<T> sig(x.shape());
  auto o = out.data();
  auto sg = sig.data();
  auto px = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    const T s = T(1) / (T(1) + std::exp(-px[i]));
    sg[i] = s;
    o[i] = px[i] * s;
  }
  auto ids = detail::tape_inputs(tape, {&x});
  if (!ids.empty()) {
    const int ix = ids[0];
    tape->record(out, std::move(ids), [x, sig, ix](std::span<const T> g, Tape<T>& tp) {
      auto dst = tp.grad(ix);
      auto px2 = x.data();
      auto sg2 = sig.data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T s = sg2[i];
        dst[i] += g[i] * s * (T(1) + px2[i] * (T(1) - s));
      }
    });
  }
  return out;
}

// --- reductions -------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x, std::type_identity_t<Tape<T>>* tape = nullptr) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  auto ids = detail::tape_inputs(tape, {&x});
  if (!ids.empty()) {
    const int ix = ids[0];
    const std::int64_t n = x.size();
    tape->record(out, std::move(ids), [ix, n](std::span<const T> g, Tape<T>& tp) {
      auto dst = tp.grad(ix);
      for (std::int64_t i = 0; i < n; ++i) dst[static_cast<std::size_t>(i)] += g[0];
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x, std::type_identity_t<Tape<T>>* tape = nullptr) {
  return scale(sum(x, tape), T(1) / static_cast<T>(x.size()), tape);
}

// Column means over rows: x[n×d] -> [d].
template <typename T>
Tensor<T> mean_rows(const Tensor<T>& x, std::type_identity_t<Tape<T>>* tape = nullptr) {
  const auto n = x.rows(), d = x.cols();
  Tensor<T> out({d});
  auto o = out.data();
  auto px = x.data();
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < d; ++j) o[static_cast<std::size_t>(j)] += px[i * d + j];
  const T inv = T(1) / static_cast<T>(n);
  for (std::int64_t j = 0; j < d; ++j) o[static_cast<std::size_t>(j)] *= inv;
  auto ids = detail::tape_inputs(tape, {&x});
  if (!ids.empty()) {
    const int ix = ids[0];
    tape->record(out, std::move(ids), [ix, n, d, inv](std::span<const T> g, Tape<T>& tp) {
      auto dst = tp.grad(ix);
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < d; ++j)
          dst[static_cast<std::size_t>(i * d + j)] += g[static_cast<std::size_t>(j)] * inv;
    });
  }
  return out;
}

// --- normalization and classification ----------------------------------------

// Row-wise softmax over the last extent, stabilized by max subtraction.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x, std::type_identity_t<Tape<T>>* tape = nullptr) {
  const auto n = x.rows(), d = x.cols();
  if (d < 1) throw ShapeError("softmax_rows: empty last extent");
  Tensor<T> out(x.shape());
  auto o = out.data();
  auto px = x.data();
  for (std::int64_t i = 0; i < n; ++i) {
    T mx = px[i * d];
    for (std::int64_t j = 1; j < d; ++j) mx = std::max(mx, px[i * d + j]);
    if (std::isnan(mx)) throw NumericError("softmax_rows: NaN input");
    T denom = 0;
    for (std::int64_t j = 0; j < d; ++j) {
      const T e = std::exp(px[i * d + j] - mx);
      o[static_cast<std::size_t>(i * d + j)] = e;
      denom += e;
    }
    const T inv = T(1) / denom;
    for (std::int64_t j = 0; j < d; ++j) o[static_cast<std::size_t>(i * d + j)] *= inv;
  }
  auto ids = detail::tape_inputs(tape, {&x});
  if (!ids.empty()) {
    const int ix = ids[0];
    tape->record(out, std::move(ids), [out, ix, n, d](std::span<const T> g, Tape<T>& tp) {
      auto dst = tp.grad(ix);
      auto y = out.data();
      for (std::int64_t i = 0; i < n; ++i) {
        T inner = 0;
        for (std::int64_t j = 0; j < d; ++j)
          inner += g[static_cast<std::size_t>(i * d + j)] * y[i * d + j];
        for (std::int64_t j = 0; j < d; ++j) {
          const auto k = static_cast<std::size_t>(i * d + j);
          dst[k] += y[k] * (g[k] - inner);
        }
      }
    });
  }
  return out;
}

// Root-mean-square normalization: y = x / rms(x) ⊙ w, rms over the last extent.
template <typename T>
Tensor<T> rmsnorm(const Tensor<T>& x, const Tensor<T>& weight, T eps, std::type_identity_t<Tape<T>>* tape = nullptr) {
  const auto n = x.rows(), d = x.cols();
  if (weight.size() != d)
    throw ShapeError("rmsnorm: weight " + shape_str(weight.shape()) + " does not match row width " +
                     std::to_string(d));
  if (eps < T(0)) throw UsageError("rmsnorm: eps must be >= 0");
  Tensor<T> out(x.shape());
  Tensor<T> inv_rms({n});
  auto o = out.data();
  auto r = inv_rms.data();
  auto px = x.data();
  auto pw = weight.data();
  for (std::int64_t i = 0; i < n; ++i) {
    T ms = 0;
    for (std::int64_t j = 0; j < d; ++j) ms += px[i * d + j] * px[i * d + j];
    ms = ms / static_cast<T>(d) + eps;
    const T inv = T(1) / std::sqrt(ms);
    r[static_cast<std::size_t>(i)] = inv;
    for (std::int64_t j = 0; j < d; ++j)
      o[static_cast<std::size_t>(i * d + j)] = px[i * d + j] * inv * pw[j];
  }
  auto ids = detail::tape_inputs(tape, {&x, &weight});
  if (!ids.empty()) {
    const int ix = x.node_on(tape), iw = weight.node_on(tape);
    tape->record(out, std::move(ids),
                 [x, weight, inv_rms, ix, iw, n, d](std::span<const T> g, Tape<T>& tp) {
                   auto px2 = x.data();
                   auto pw2 = weight.data();
                   auto r2 = inv_rms.data();
                   std::span<T> dx = ix >= 0 ? tp.grad(ix) : std::span<T>{};
                   std::span<T> dw = iw >= 0 ? tp.grad(iw) : std::span<T>{};
                   for (std::int64_t i = 0; i < n; ++i) {
                     const T inv = r2[static_cast<std::size_t>(i)];
                     if (ix >= 0) {
                       T inner = 0;  // Σ_j g_j·w_j·x_j
                       for (std::int64_t j = 0; j < d; ++j)
                         inner += g[static_cast<std::size_t>(i * d + j)] * pw2[j] * px2[i * d + j];
                       const T c = inv * inv * inv * inner / static_cast<T>(d);
                       for (std::int64_t j = 0; j < d; ++j)
                         dx[static_cast<std::size_t>(i * d + j)] +=
                             g[static_cast<std::size_t>(i * d + j)] * pw2[j] * inv -
                             c * px2[i * d + j];
                     }
                     if (iw >= 0)
                       for (std::int64_t j = 0; j < d; ++j)
                         dw[static_cast<std::size_t>(j)] +=
                             g[static_cast<std::size_t>(i * d + j)] * px2[i * d + j] * inv;
                   }
                 });
  }
  return out;
}

// Mean over tokens of -log softmax(logits)[target].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<std::int64_t>& targets,
                        std::type_identity_t<Tape<T>>* tape = nullptr) {
  const auto n = logits.rows(), v = logits.cols();
  if (static_cast<std::int64_t>(targets.size()) != n)
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(n) + " rows");
  for (std::int64_t i = 0; i < n; ++i)
    if (targets[static_cast<std::size_t>(i)] < 0 || targets[static_cast<std::size_t>(i)] >= v)
      throw IndexError("cross_entropy: target " + std::to_string(targets[static_cast<std::size_t>(i)]) +
                       " out of range [0," + std::to_string(v) + ") at row " + std::to_string(i));
  Tensor<T> probs(logits.shape());
  auto pp = probs.data();
  auto pl = logits.data();
  T loss = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    T mx = pl[i * v];
    for (std::int64_t j = 1; j < v; ++j) mx = std::max(mx, pl[i * v + j]);
    T denom = 0;
    for (std::int64_t j = 0; j < v; ++j) {
      const T e = std::exp(pl[i * v + j] - mx);
      pp[static_cast<std::size_t>(i * v + j)] = e;
      denom += e;
    }
    const T inv = T(1) / denom;
    for (std::int64_t j = 0; j < v; ++j) pp[static_cast<std::size_t>(i * v + j)] *= inv;
    const T lse = mx + std::log(denom);
    loss += lse - pl[i * v + targets[static_cast<std::size_t>(i)]];
  }
  loss /= static_cast<T>(n);
  Tensor<T> out = Tensor<T>::scalar(loss);
  auto ids = detail::tape_inputs(tape, {&logits});
  if (!ids.empty()) {
    const int il = ids[0];
    tape->record(out, std::move(ids), [probs, targets, il, n, v](std::span<const T> g, Tape<T>& tp) {
      auto dst = tp.grad(il);
      auto pp2 = probs.data();
      const T s = g[0] / static_cast<T>(n);
      for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = 0; j < v; ++j)
          dst[static_cast<std::size_t>(i * v + j)] += s * pp2[i * v + j];
        dst[static_cast<std::size_t>(i * v + targets[static_cast<std::size_t>(i)])] -= s;
      }
    });
  }
  return out;
}

// --- gather / scatter -------------------------------------------------------

// out[j,:] = x[idx[j],:]. Also serves as the embedding lookup.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::int64_t>& idx,
                      std::type_identity_t<Tape<T>>* tape = nullptr) {
  const auto n = x.rows(), d = x.cols();
  for (auto i : idx)
    if (i < 0 || i >= n)
      throw IndexError("gather_rows: index " + std::to_string(i) + " out of range [0," +
                       std::to_string(n) + ")");
  const auto m = static_cast<std::int64_t>(idx.size());
  Tensor<T> out({m, d});
  auto o = out.data();
  auto px = x.data();
  for (std::int64_t j = 0; j < m; ++j)
    std::copy_n(px.data() + idx[static_cast<std::size_t>(j)] * d, d, o.data() + j * d);
  auto ids = detail::tape_inputs(tape, {&x});
  if (!ids.empty()) {
    const int ix = ids[0];
    tape->record(out, std::move(ids), [idx, ix, m, d](std::span<const T> g, Tape<T>& tp) {
      auto dst = tp.grad(ix);
      for (std::int64_t j = 0; j < m; ++j) {
        const auto row = idx[static_cast<std::size_t>(j)];
        for (std::int64_t c = 0; c < d; ++c)
          dst[static_cast<std::size_t>(row * d + c)] += g[static_cast<std::size_t>(j * d + c)];
      }
    });
  }
  return out;
}

// out[n×d] zeros except out[idx[j],:] += src[j,:] (duplicates accumulate).
template <typename T>
Tensor<T> scatter_rows(const Tensor<T>& src, const std::vector<std::int64_t>& idx, std::int64_t n,
                       std::type_identity_t<Tape<T>>* tape = nullptr) {
  const auto m = src.rows(), d = src.cols();
  if (static_cast<std::int64_t>(idx.size()) != m)
    throw ShapeError("scatter_rows: " + std::to_string(idx.size()) + " indices for " +
                     std::to_string(m) + " rows");
  for (auto i : idx)
    if (i < 0 || i >= n)
      throw IndexError("scatter_rows: index " + std::to_string(i) + " out of range [0," +
                       std::to_string(n) + ")");
  Tensor<T> out({n, d});
  auto o = out.data();
  auto ps = src.data();
  for (std::int64_t j = 0; j < m; ++j) {
    const auto row = idx[static_cast<std::size_t>(j)];
    for (std::int64_t c = 0; c < d; ++c)
      o[static_cast<std::size_t>(row * d + c)] += ps[j * d + c];
  }
  auto ids = detail::tape_inputs(tape, {&src});
  if (!ids.empty()) {
    const int is = ids[0];
    tape->record(out, std::move(ids), [idx, is, m, d](std::span<const T> g, Tape<T>& tp) {
      auto dst = tp.grad(is);
      for (std::int64_t j = 0; j < m; ++j) {
        const auto row = idx[static_cast<std::size_t>(j)];
        for (std::int64_t c = 0; c < d; ++c)
          dst[static_cast<std::size_t>(j * d + c)] += g[static_cast<std::size_t>(row * d + c)];
      }
    });
  }
  return out;
}

// out[j] = x[row_idx[j], col_idx[j]].
template <typename T>
Tensor<T> gather_cells(const Tensor<T>& x, const std::vector<std::int64_t>& row_idx,
                       const std::vector<std::int64_t>& col_idx, std::type_identity_t<Tape<T>>* tape = nullptr) {
  const auto n = x.rows(), d = x.cols();
  if (row_idx.size() != col_idx.size())
    throw ShapeError("gather_cells: row/col index counts differ");
  const auto m = static_cast<std::int64_t>(row_idx.size());
  for (std::int64_t j = 0; j < m; ++j) {
    if (row_idx[static_cast<std::size_t>(j)] < 0 || row_idx[static_cast<std::size_t>(j)] >= n ||
        col_idx[static_cast<std::size_t>(j)] < 0 || col_idx[static_cast<std::size_t>(j)] >= d)
      throw IndexError("gather_cells: index out of range at position " + std::to_string(j));
  }
  Tensor<T> out({m});
  auto o = out.data();
  auto px = x.data();
  for (std::int64_t j = 0; j < m; ++j)
    o[static_cast<std::size_t>(j)] =
        px[row_idx[static_cast<std::size_t>(j)] * d + col_idx[static_cast<std::size_t>(j)]];
  auto ids = detail::tape_inputs(tape, {&x});
  if (!ids.empty()) {
    const int ix = ids[0];
    tape->record(out, std::move(ids), [row_idx, col_idx, ix, m, d](std::span<const T> g, Tape<T>& tp) {
      auto dst = tp.grad(ix);
      for (std::int64_t j = 0; j < m; ++j)
        dst[static_cast<std::size_t>(row_idx[static_cast<std::size_t>(j)] * d +
                                     col_idx[static_cast<std::size_t>(j)])] +=
            g[static_cast<std::size_t>(j)];
    });
  }
  return out;
}

// Row-wise scaling: out[i,:] = x[i,:] * s[i].
template <typename T>
Tensor<T> mul_rows(const Tensor<T>& x, const Tensor<T>& s, std::type_identity_t<Tape<T>>* tape = nullptr) {
  const auto n = x.rows(), d = x.cols();
  if (s.size() != n)
    throw ShapeError("mul_rows: " + std::to_string(s.size()) + " scales for " + std::to_string(n) +
                     " rows");
  Tensor<T> out(x.shape());
  auto o = out.data();
  auto px = x.data();
  auto ps = s.data();
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < d; ++j)
      o[static_cast<std::size_t>(i * d + j)] = px[i * d + j] * ps[static_cast<std::size_t>(i)];
  auto ids = detail::tape_inputs(tape, {&x, &s});
  if (!ids.empty()) {
    const int ix = x.node_on(tape), is = s.node_on(tape);
    tape->record(out, std::move(ids), [x, s, ix, is, n, d](std::span<const T> g, Tape<T>& tp) {
      auto px2 = x.data();
      auto ps2 = s.data();
      if (ix >= 0) {
        auto dst = tp.grad(ix);
        for (std::int64_t i = 0; i < n; ++i)
          for (std::int64_t j = 0; j < d; ++j)
            dst[static_cast<std::size_t>(i * d + j)] +=
                g[static_cast<std::size_t>(i * d + j)] * ps2[static_cast<std::size_t>(i)];
      }
      if (is >= 0) {
        auto dst = tp.grad(is);
        for (std::int64_t i = 0; i < n; ++i) {
          T acc = 0;
          for (std::int64_t j = 0; j < d; ++j)
            acc += g[static_cast<std::size_t>(i * d + j)] * px2[i * d + j];
          dst[static_cast<std::size_t>(i)] += acc;
        }
      }
    });
  }
  return out;
}

// --- column slicing (attention heads) ----------------------------------------

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::int64_t start, std::int64_t width,
                     std::type_identity_t<Tape<T>>* tape = nullptr) {
  const auto n = x.rows(), d = x.cols();
  if (start < 0 || width <= 0 || start + width > d)
    throw ShapeError("slice_cols: range [" + std::to_string(start) + "," +
                     std::to_string(start + width) + ") outside width " + std::to_string(d));
  Tensor<T> out({n, width});
  auto o = out.data();
  auto px = x.data();
  for (std::int64_t i = 0; i < n; ++i)
    std::copy_n(px.data() + i * d + start, width, o.data() + i * width);
  auto ids = detail::tape_inputs(tape, {&x});
  if (!ids.empty()) {
    const int ix = ids[0];
    tape->record(out, std::move(ids), [ix, n, d, start, width](std::span<const T> g, Tape<T>& tp) {
      auto dst = tp.grad(ix);
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < width; ++j)
          dst[static_cast<std::size_t>(i * d + start + j)] += g[static_cast<std::size_t>(i * width + j)];
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts, std::type_identity_t<Tape<T>>* tape = nullptr) {
  if (parts.empty()) throw UsageError("concat_cols: no parts");
  const auto n = parts[0].rows();
  std::int64_t d = 0;
  for (const auto& p : parts) {
    if (p.rows() != n) throw ShapeError("concat_cols: row count mismatch");
    d += p.cols();
  }
  Tensor<T> out({n, d});
  auto o = out.data();
  std::int64_t off = 0;
  for (const auto& p : parts) {
    const auto w = p.cols();
    auto pp = p.data();
    for (std::int64_t i = 0; i < n; ++i)
      std::copy_n(pp.data() + i * w, w, o.data() + i * d + off);
    off += w;
  }
  std::vector<int> ids;
  std::vector<std::pair<int, std::pair<std::int64_t, std::int64_t>>> grads;  // node -> (offset,width)
  if (tape) {
    std::int64_t o2 = 0;
    for (const auto& p : parts) {
      const int id = p.node_on(tape);
      if (id >= 0) {
        ids.push_back(id);
        grads.emplace_back(id, std::make_pair(o2, p.cols()));
      }
      o2 += p.cols();
    }
  }
  if (!ids.empty()) {
    tape->record(out, std::move(ids), [grads, n, d](std::span<const T> g, Tape<T>& tp) {
      for (const auto& [id, range] : grads) {
        const auto [off2, w] = range;
        auto dst = tp.grad(id);
        for (std::int64_t i = 0; i < n; ++i)
          for (std::int64_t j = 0; j < w; ++j)
            dst[static_cast<std::size_t>(i * w + j)] += g[static_cast<std::size_t>(i * d + off2 + j)];
      }
    });
  }
  return out;
}

// Same elements, new extents; identity vector-Jacobian product.
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape, std::type_identity_t<Tape<T>>* tape = nullptr) {
  if (numel(shape) != x.size())
    throw ShapeError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  Tensor<T> out(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  auto ids = detail::tape_inputs(tape, {&x});
  if (!ids.empty()) {
    const int ix = ids[0];
    tape->record(out, std::move(ids), [ix](std::span<const T> g, Tape<T>& tp) {
      auto dst = tp.grad(ix);
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    });
  }
  return out;
}

// --- rotary position embedding ------------------------------------------------

// Rotates dimension pairs within each head by position-dependent angles.
// x is [tokens × heads·head_dim]; row index is the absolute position.
template <typename T>
Tensor<T> rope(const Tensor<T>& x, std::int64_t heads, std::int64_t pos0 = 0,
               std::type_identity_t<Tape<T>>* tape = nullptr, double base = 10000.0) {
  const auto n = x.rows(), d = x.cols();
  if (heads <= 0 || d % heads != 0)
    throw ShapeError("rope: width " + std::to_string(d) + " not divisible into " +
                     std::to_string(heads) + " heads");
  const auto hd = d / heads;
  if (hd % 2 != 0) throw ShapeError("rope: head dim " + std::to_string(hd) + " must be even");
  // Table of (cos, sin) per position per pair index, shared with backward.
  auto trig = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n * hd));
  for (std::int64_t p = 0; p < n; ++p)
    for (std::int64_t i = 0; i < hd / 2; ++i) {
      const double theta = static_cast<double>(pos0 + p) *
                           std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
      (*trig)[static_cast<std::size_t>(p * hd + 2 * i)] = static_cast<T>(std::cos(theta));
      (*trig)[static_cast<std::size_t>(p * hd + 2 * i + 1)] = static_cast<T>(std::sin(theta));
    }
  Tensor<T> out(x.shape());
  auto o = out.data();
  auto px = x.data();
  for (std::int64_t p = 0; p < n; ++p)
    for (std::int64_t h = 0; h < heads; ++h)
      for (std::int64_t i = 0; i < hd / 2; ++i) {
        const T c = (*trig)[static_cast<std::size_t>(p * hd + 2 * i)];
        const T s = (*trig)[static_cast<std::size_t>(p * hd + 2 * i + 1)];
        const auto k = p * d + h * hd + 2 * i;
        const T a = px[k], b = px[k + 1];
        o[static_cast<std::size_t>(k)] = a * c - b * s;
        o[static_cast<std::size_t>(k + 1)] = a * s + b * c;
      }
  auto ids = detail::tape_inputs(tape, {&x});
  if (!ids.empty()) {
    const int ix = ids[0];
    tape->record(out, std::move(ids), [trig, ix, n, d, hd, heads](std::span<const T> g, Tape<T>& tp) {
      auto dst = tp.grad(ix);
      for (std::int64_t p = 0; p < n; ++p)
        for (std::int64_t h = 0; h < heads; ++h)
          for (std::int64_t i = 0; i < hd / 2; ++i) {
            const T c = (*trig)[static_cast<std::size_t>(p * hd + 2 * i)];
            const T s = (*trig)[static_cast<std::size_t>(p * hd + 2 * i + 1)];
            const auto k = p * d + h * hd + 2 * i;
            const T ga = g[static_cast<std::size_t>(k)], gb = g[static_cast<std::size_t>(k + 1)];
            dst[static_cast<std::size_t>(k)] += ga * c + gb * s;
            dst[static_cast<std::size_t>(k + 1)] += -ga * s + gb * c;
          }
    });
  }
  return out;
}

}  // namespace coe
