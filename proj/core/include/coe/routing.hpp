#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "coe/config.hpp"
#include "coe/ops.hpp"
#include "coe/rng.hpp"
#include "coe/tape.hpp"

namespace coe {

// Per-token, per-iteration routing decisions of one layer.
// Entry (token, step, j) is the j-th selected expert (ascending id order)
// with its gate value.
struct RoutingTrace {
  int layer = -1;
  std::int64_t tokens = 0;
  int steps = 0;     // C
  int per_step = 0;  // K/C
  std::vector<std::int32_t> experts;
  std::vector<double> gates;

  std::size_t idx(std::int64_t token, int step, int j) const {
    return static_cast<std::size_t>((token * steps + step) * per_step + j);
  }
  void resize(std::int64_t n_tokens, int n_steps, int k) {
    tokens = n_tokens;
    steps = n_steps;
    per_step = k;
    experts.assign(static_cast<std::size_t>(n_tokens * n_steps * k), -1);
    gates.assign(experts.size(), 0.0);
  }
};

// Counts (token, expert) evaluation events; reset per call site, not global.
struct InvocationCounter {
  std::vector<std::uint64_t> routed_per_step;
  std::uint64_t routed_total = 0;
  std::uint64_t shared_total = 0;

  void begin_step() { routed_per_step.push_back(0); }
  void add_routed(std::uint64_t n) {
    if (routed_per_step.empty()) routed_per_step.push_back(0);
    routed_per_step.back() += n;
    routed_total += n;
  }
  void add_shared(std::uint64_t n) { shared_total += n; }
};

// Gaussian(0, 0.02) init drawn from a stream named after the parameter,
// so adding parameters never shifts existing draws.
template <typename T>
Tensor<T> init_normal(Shape shape, std::uint64_t seed, const std::string& name,
                      double stddev = 0.02) {
  Tensor<T> t(std::move(shape));
  RngStream rng(seed, "init/" + name);
  for (auto& v : t.data()) v = static_cast<T>(rng.next_normal(0.0, stddev));
  return t;
}

template <typename T>
Tensor<T> init_ones(Shape shape) {
  return Tensor<T>::full(std::move(shape), T(1));
}

// Gated-linear-unit feed-forward expert:
// out = (silu(x·gate) ⊙ (x·up)) · down.
template <typename T>
struct ExpertFFN {
  Parameter<T>* gate_proj = nullptr;  // [d×h]
  Parameter<T>* up_proj = nullptr;    // [d×h]
  Parameter<T>* down_proj = nullptr;  // [h×d]

  static ExpertFFN create(ParameterStore<T>& store, const std::string& prefix, int d, int h,
                          std::uint64_t seed) {
    ExpertFFN e;
    e.gate_proj = &store.add(prefix + ".gate", init_normal<T>({d, h}, seed, prefix + ".gate"));
    e.up_proj = &store.add(prefix + ".up", init_normal<T>({d, h}, seed, prefix + ".up"));
    e.down_proj = &store.add(prefix + ".down", init_normal<T>({h, d}, seed, prefix + ".down"));
    return e;
  }

  Tensor<T> forward(const Tensor<T>& x, std::type_identity_t<Tape<T>>* tape) const {
    auto gated = silu(matmul(x, gate_proj->tensor, tape), tape);
    auto lifted = matmul(x, up_proj->tensor, tape);
    return matmul(mul(gated, lifted, tape), down_proj->tensor, tape);
  }
};

// A shared expert has the same structure but is applied to every token.
template <typename T>
using SharedExpert = ExpertFFN<T>;

// One router owns a matrix of per-expert vectors for a single routing pass.
template <typename T>
struct Router {
  Parameter<T>* embed = nullptr;  // [N×d], row i is expert i's vector

  static Router create(ParameterStore<T>& store, const std::string& prefix, int n_experts, int d,
                       std::uint64_t seed) {
    Router r;
    r.embed =
        &store.add(prefix + ".embed", init_normal<T>({n_experts, d}, seed, prefix + ".embed"));
    return r;
  }
  std::int64_t expert_count() const { return embed->tensor.shape()[0]; }
};

// Sparse gate for one token: at most k nonzero weights, each equal to the
// pre-selection softmax score (no renormalization after selection).
template <typename T>
struct GateVector {
  std::vector<T> gates;                // dense, length N
  std::vector<std::int32_t> selected;  // ascending expert ids, length k
};

// Softmax affinities of a token batch against a router: [n×d] -> [n×N].
template <typename T>
Tensor<T> affinities(const Router<T>& router, const Tensor<T>& x, std::type_identity_t<Tape<T>>* tape = nullptr) {
  Tensor<T> rows = x.rank() == 2 ? x : reshape(x, {1, x.size()}, tape);
  return softmax_rows(matmul_nt(rows, router.embed->tensor, tape), tape);
}

// Keeps the k largest scores as gates; ties break toward the lower expert id.
template <typename T>
GateVector<T> select_topk(std::span<const T> scores, int k) {
  const auto n = static_cast<int>(scores.size());
  if (k < 1 || k > n)
    throw UsageError("select_topk: k=" + std::to_string(k) + " outside [1," + std::to_string(n) +
                     "]");
  std::vector<std::int32_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + k, order.end(),
                    [&](std::int32_t a, std::int32_t b) {
                      const T sa = scores[static_cast<std::size_t>(a)];
                      const T sb = scores[static_cast<std::size_t>(b)];
                      if (sa != sb) return sa > sb;
                      return a < b;
                    });
  GateVector<T> gv;
  gv.selected.assign(order.begin(), order.begin() + k);
  std::sort(gv.selected.begin(), gv.selected.end());
  gv.gates.assign(static_cast<std::size_t>(n), T(0));
  for (auto e : gv.selected)
    gv.gates[static_cast<std::size_t>(e)] = scores[static_cast<std::size_t>(e)];
  return gv;
}

template <typename T>
GateVector<T> select_topk(const Tensor<T>& scores, int k) {
  return select_topk(std::span<const T>(scores.data()), k);
}

// Row-wise top-k over a probability matrix [n×N]; per-token selections in
// ascending expert-id order.
struct StepSelection {
  std::int64_t tokens = 0;
  int k = 0;
  std::vector<std::int32_t> experts;  // [tokens × k]
  std::span<const std::int32_t> row(std::int64_t t) const {
    return {experts.data() + t * k, static_cast<std::size_t>(k)};
  }
};

template <typename T>
StepSelection select_topk_rows(const Tensor<T>& probs, int k) {
  const auto n = probs.rows(), width = probs.cols();
  StepSelection sel;
  sel.tokens = n;
  sel.k = k;
  sel.experts.resize(static_cast<std::size_t>(n * k));
  auto p = probs.data();
  for (std::int64_t t = 0; t < n; ++t) {
    auto gv =
        select_topk(std::span<const T>(p.data() + t * width, static_cast<std::size_t>(width)), k);
    std::copy(gv.selected.begin(), gv.selected.end(), sel.experts.begin() + t * k);
  }
  return sel;
}

// Weighted sum over the selected experts of one token; exactly k expert
// forward passes are executed (sparsity contract).
template <typename T>
Tensor<T> apply_experts(std::span<const ExpertFFN<T>> experts, const GateVector<T>& gates,
                        const Tensor<T>& x, std::type_identity_t<Tape<T>>* tape = nullptr,
                        InvocationCounter* counter = nullptr) {
  if (gates.gates.size() != experts.size())
    throw ShapeError("apply_experts: gate width " + std::to_string(gates.gates.size()) + " for " +
                     std::to_string(experts.size()) + " experts");
  Tensor<T> row = x.rank() == 2 ? x : reshape(x, {1, x.size()}, tape);
  Tensor<T> out({row.rows(), row.cols()});
  for (auto e : gates.selected) {
    auto he = experts[static_cast<std::size_t>(e)].forward(row, tape);
    if (counter) counter->add_routed(static_cast<std::uint64_t>(row.rows()));
    out = add(out, scale(he, gates.gates[static_cast<std::size_t>(e)], tape), tape);
  }
  return x.rank() == 2 ? out : reshape(out, x.shape(), tape);
}

// Unweighted sum of all shared experts (zero tensor when there are none).
template <typename T>
Tensor<T> apply_shared(std::span<const SharedExpert<T>> shared, const Tensor<T>& x,
                       std::type_identity_t<Tape<T>>* tape = nullptr, InvocationCounter* counter = nullptr) {
  Tensor<T> row = x.rank() == 2 ? x : reshape(x, {1, x.size()}, tape);
  Tensor<T> out({row.rows(), row.cols()});
  for (const auto& s : shared) {
    out = add(out, s.forward(row, tape), tape);
    if (counter) counter->add_shared(static_cast<std::uint64_t>(row.rows()));
  }
  return x.rank() == 2 ? out : reshape(out, x.shape(), tape);
}

// Batched sparse mixture: tokens are grouped per selected expert so each
// expert runs one matmul over its routed rows. Gradients flow through the
// gathered gate values into the routing softmax; selection indices are
// constants.
template <typename T>
Tensor<T> combine_routed(std::span<const ExpertFFN<T>> experts, const Tensor<T>& probs,
                         const StepSelection& sel, const Tensor<T>& x, std::type_identity_t<Tape<T>>* tape = nullptr,
                         InvocationCounter* counter = nullptr) {
  const auto n = x.rows();
  Tensor<T> out({n, x.cols()});
  std::vector<std::vector<std::int64_t>> routed(experts.size());
  for (std::int64_t t = 0; t < n; ++t)
    for (auto e : sel.row(t)) routed[static_cast<std::size_t>(e)].push_back(t);
  for (std::size_t e = 0; e < experts.size(); ++e) {
    const auto& rows = routed[e];
    if (rows.empty()) continue;
    auto xe = gather_rows(x, rows, tape);
    auto he = experts[e].forward(xe, tape);
    if (counter) counter->add_routed(rows.size());
    auto ge = gather_cells(
        probs, rows, std::vector<std::int64_t>(rows.size(), static_cast<std::int64_t>(e)), tape);
    out = add(out, scatter_rows(mul_rows(he, ge, tape), rows, n, tape), tape);
  }
  return out;
}

template <typename T>
struct RoutedResult {
  Tensor<T> output;
  RoutingTrace trace;
};

// Standard single-pass sparse mixture: shared experts plus top-k routed
// experts, gates taken straight from the softmax scores.
template <typename T>
RoutedResult<T> moe_forward(std::span<const ExpertFFN<T>> experts,
                            std::span<const SharedExpert<T>> shared, const Router<T>& router,
                            int k, const Tensor<T>& x, std::type_identity_t<Tape<T>>* tape = nullptr,
                            InvocationCounter* counter = nullptr) {
  const auto n = x.rows();
  auto probs = affinities(router, x, tape);
  auto sel = select_topk_rows(probs, k);
  if (counter) counter->begin_step();
  Tensor<T> out = combine_routed(experts, probs, sel, x, tape, counter);
  if (!shared.empty()) out = add(out, apply_shared(shared, x, tape, counter), tape);

  RoutedResult<T> result;
  result.output = std::move(out);
  result.trace.resize(n, 1, k);
  auto p = probs.data();
  const auto width = probs.cols();
  for (std::int64_t t = 0; t < n; ++t)
    for (int j = 0; j < k; ++j) {
      const auto e = sel.experts[static_cast<std::size_t>(t * k + j)];
      result.trace.experts[result.trace.idx(t, 0, j)] = e;
      result.trace.gates[result.trace.idx(t, 0, j)] = static_cast<double>(p[t * width + e]);
    }
  return result;
}

}  // namespace coe
