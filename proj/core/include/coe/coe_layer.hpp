#pragma once

#include <string>
#include <vector>

#include "coe/routing.hpp"

namespace coe {

// Chained-expert layer: C sequential routing passes inside one layer. Pass t
// routes the evolving hidden state x(t-1) to K/C experts, adds the shared
// experts, and applies the configured residual term:
//
//   inner:  x(t) = step(x(t-1)) + x(t-1)          y = x(C)
//   init:   x(t) = step(x(t-1)) + x(0)            y = x(C)
//   outer:  x(t) = step(x(t-1))                   y = x(C) + x(0)
//   none:   x(t) = step(x(t-1))                   y = x(C)
//
// with step(v) = Σ shared_i(v) + Σ g_i·expert_i(v). Gating is either
// re-evaluated per pass with that pass's own router or computed once from
// x(0) and reused (both indices and gate values).
template <typename T>
struct CoELayer {
  CoEConfig config;
  std::vector<ExpertFFN<T>> experts;
  std::vector<SharedExpert<T>> shared;
  std::vector<Router<T>> routers;  // C routers, or 1 when gating is shared

  static CoELayer create(ParameterStore<T>& store, const std::string& prefix,
                         const CoEConfig& config, std::uint64_t seed) {
    config.validate();
    CoELayer layer;
    layer.config = config;
    layer.experts.reserve(static_cast<std::size_t>(config.routed_experts));
    for (int e = 0; e < config.routed_experts; ++e)
      layer.experts.push_back(ExpertFFN<T>::create(store, prefix + ".expert." + std::to_string(e),
                                                   config.hidden, config.ffn_hidden, seed));
    for (int s = 0; s < config.shared_experts; ++s)
      layer.shared.push_back(SharedExpert<T>::create(store, prefix + ".shared." + std::to_string(s),
                                                     config.hidden, config.ffn_hidden, seed));
    for (int t = 0; t < config.router_count(); ++t)
      layer.routers.push_back(Router<T>::create(store, prefix + ".router." + std::to_string(t),
                                                config.routed_experts, config.hidden, seed));
    return layer;
  }

  struct Result {
    Tensor<T> output;
    RoutingTrace trace;
    Tensor<T> aux_loss;  // defined only when load_balance_coeff > 0 and a tape is active
  };

  Result forward(const Tensor<T>& x, std::type_identity_t<Tape<T>>* tape = nullptr, bool capture_trace = true,
                 InvocationCounter* counter = nullptr) const {
    config.validate();
    const auto n = x.rows();
    const int steps = config.steps;
    const int k = config.selections_per_step();
    const bool shared_gating = config.gating_mode == GatingMode::kShared;

    Result result;
    if (capture_trace) result.trace.resize(n, steps, k);

    // Shared gating: one routing decision from x(0), reused at every pass.
    Tensor<T> fixed_probs;
    StepSelection fixed_sel;
    if (shared_gating) {
      fixed_probs = affinities(routers[0], x, tape);
      fixed_sel = select_topk_rows(fixed_probs, k);
    }

    const bool want_aux = config.load_balance_coeff > 0.0 && tape != nullptr;
    Tensor<T> aux;

    Tensor<T> state = x;
    for (int t = 0; t < steps; ++t) {
      Tensor<T> probs = shared_gating ? fixed_probs : affinities(routers[t], state, tape);
      StepSelection sel = shared_gating ? fixed_sel : select_topk_rows(probs, k);

      if (counter) counter->begin_step();
      Tensor<T> step_out = combine_routed(std::span<const ExpertFFN<T>>(experts), probs, sel,
                                          state, tape, counter);
      if (!shared.empty())
        step_out = add(step_out, apply_shared(std::span<const SharedExpert<T>>(shared), state,
                                              tape, counter),
                       tape);

      if (capture_trace) record_step(result.trace, probs, sel, t);
      if (want_aux) {
        Tensor<T> term = load_balance_term(probs, sel, tape);
        aux = aux.defined() ? add(aux, term, tape) : term;
      }

      switch (config.residual_mode) {
        case ResidualMode::kInner: state = add(step_out, state, tape); break;
        case ResidualMode::kInit: state = add(step_out, x, tape); break;
        case ResidualMode::kOuter:
        case ResidualMode::kNone: state = std::move(step_out); break;
      }
    }
    if (config.residual_mode == ResidualMode::kOuter) state = add(state, x, tape);

    result.output = std::move(state);
    if (want_aux)
      result.aux_loss =
          scale(aux, static_cast<T>(config.load_balance_coeff / static_cast<double>(steps)), tape);
    return result;
  }

 private:
  static void record_step(RoutingTrace& trace, const Tensor<T>& probs, const StepSelection& sel,
                          int t) {
    auto p = probs.data();
    const auto width = probs.cols();
    for (std::int64_t tok = 0; tok < sel.tokens; ++tok)
      for (int j = 0; j < sel.k; ++j) {
        const auto e = sel.experts[static_cast<std::size_t>(tok * sel.k + j)];
        trace.experts[trace.idx(tok, t, j)] = e;
        trace.gates[trace.idx(tok, t, j)] = static_cast<double>(p[tok * width + e]);
      }
  }

  // N · Σ_i f_i·P_i with f_i the routed-token fraction and P_i the mean
  // softmax probability of expert i over the batch.
  Tensor<T> load_balance_term(const Tensor<T>& probs, const StepSelection& sel,
                              std::type_identity_t<Tape<T>>* tape) const {
    const auto N = static_cast<std::size_t>(config.routed_experts);
    Tensor<T> fractions({static_cast<std::int64_t>(N)});
    auto f = fractions.data();
    for (std::int64_t t = 0; t < sel.tokens; ++t)
      for (auto e : sel.row(t)) f[static_cast<std::size_t>(e)] += T(1);
    const T norm = T(1) / static_cast<T>(sel.tokens * sel.k);
    for (auto& v : f) v *= norm;
    auto mean_probs = mean_rows(probs, tape);
    return scale(sum(mul(fractions, mean_probs, tape), tape), static_cast<T>(N), tape);
  }
};

// The iterative forward pass of a chained layer. With steps=1 and residual
// mode "none" this reduces elementwise to moe_forward.
template <typename T>
typename CoELayer<T>::Result coe_forward(const CoELayer<T>& layer, const Tensor<T>& x,
                                         std::type_identity_t<Tape<T>>* tape = nullptr, bool capture_trace = true,
                                         InvocationCounter* counter = nullptr) {
  return layer.forward(x, tape, capture_trace, counter);
}

// Single-pass mixture over the same layer storage. The layer must be
// configured with single-step semantics.
template <typename T>
RoutedResult<T> moe_forward(const CoELayer<T>& layer, const Tensor<T>& x, std::type_identity_t<Tape<T>>* tape = nullptr,
                            InvocationCounter* counter = nullptr) {
  if (layer.config.steps != 1)
    throw ConfigError("moe_forward: layer must be configured with steps=1, got " +
                      std::to_string(layer.config.steps));
  return moe_forward(std::span<const ExpertFFN<T>>(layer.experts),
                     std::span<const SharedExpert<T>>(layer.shared), layer.routers[0],
                     layer.config.total_selections, x, tape, counter);
}

}  // namespace coe
