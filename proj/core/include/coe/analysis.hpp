#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "coe/bignum.hpp"
#include "coe/config.hpp"
#include "coe/routing.hpp"

namespace coe {

// N×N transition counts: entry (p, q) counts (token, pair) events where
// expert p served the token at one routing pass and expert q at the next.
struct CoActivationMatrix {
  int layer = 0;
  int experts = 0;  // N
  std::vector<std::uint64_t> counts;
  // Single-pass layers produce no transitions; flagged so consumers can warn.
  bool single_step = false;

  CoActivationMatrix() = default;
  CoActivationMatrix(int layer_index, int n)
      : layer(layer_index),
        experts(n),
        counts(static_cast<std::size_t>(n) * static_cast<std::size_t>(n), 0) {}

  std::uint64_t& at(int p, int q) { return counts[static_cast<std::size_t>(p) * experts + q]; }
  std::uint64_t at(int p, int q) const { return counts[static_cast<std::size_t>(p) * experts + q]; }
  std::uint64_t total() const;
  // Row-normalized copy; rows with no events stay zero.
  std::vector<double> row_normalized() const;
  void merge(const CoActivationMatrix& other);
};

// Counts consecutive-pass expert pairs of one layer's trace. `experts` is N.
CoActivationMatrix accumulate_coactivation(const RoutingTrace& trace, int experts);

// CSV with header "layer,prev_expert,next_expert,count,row_normalized", one
// row per nonzero entry, then a summary line.
void export_heatmap(const CoActivationMatrix& matrix, const std::string& path);
CoActivationMatrix parse_heatmap(const std::string& path);

// Exact binomial coefficient via the additive Pascal recurrence.
BigUint binomial(int n, int k);

// Expert-combination counts of iterated top-k routing vs one-shot selection:
// binom(n,k)^C against binom(n, C·k).
struct CombinatoricsReport {
  int n = 0;
  int k = 0;
  int c = 0;
  BigUint combos_coe;   // binom(n,k)^C
  BigUint combos_moe;   // binom(n, C·k)
  long double ratio = 0.0L;
  std::string to_json() const;
};

CombinatoricsReport combination_ratio(int n, int k, int c);

// Analytic cost model comparing two model configurations: exact parameter
// totals, expert invocations per token per layer, and router counts.
// Deltas use 100·(b−a)/max(a,b), which negates under swap.
struct CostAxis {
  std::int64_t a = 0;
  std::int64_t b = 0;
  double delta_pct = 0.0;
  std::string dominant;  // "a" | "b" | "equal" (smaller is dominant)
};

struct CostReport {
  ParamCounts params_a;
  ParamCounts params_b;
  CostAxis total_params;
  CostAxis non_embedding_params;
  CostAxis expert_params;
  CostAxis invocations_per_token_per_layer;
  CostAxis invocations_per_token_per_model;
  CostAxis routers;
  // Parameter memory with AdamW moments, in analytic elements (3× params).
  CostAxis optimizer_memory_elements;
  std::string to_json() const;
};

CostReport cost_compare(const ModelConfig& a, const ModelConfig& b);

}  // namespace coe
