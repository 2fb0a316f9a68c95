#include "coe/analysis.hpp"

#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace coe {

std::uint64_t CoActivationMatrix::total() const {
  std::uint64_t t = 0;
  for (auto c : counts) t += c;
  return t;
}

std::vector<double> CoActivationMatrix::row_normalized() const {
  std::vector<double> out(counts.size(), 0.0);
  for (int p = 0; p < experts; ++p) {
    std::uint64_t row = 0;
    for (int q = 0; q < experts; ++q) row += at(p, q);
    if (row == 0) continue;
    for (int q = 0; q < experts; ++q)
      out[static_cast<std::size_t>(p) * experts + q] =
          static_cast<double>(at(p, q)) / static_cast<double>(row);
  }
  return out;
}

void CoActivationMatrix::merge(const CoActivationMatrix& other) {
  if (other.experts != experts)
    throw UsageError("co-activation merge: expert counts differ (" + std::to_string(experts) +
                     " vs " + std::to_string(other.experts) + ")");
  for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
}

CoActivationMatrix accumulate_coactivation(const RoutingTrace& trace, int experts) {
  CoActivationMatrix m(trace.layer, experts);
  if (trace.steps < 2) {
    m.single_step = true;
    return m;
  }
  for (std::int64_t tok = 0; tok < trace.tokens; ++tok)
    for (int t = 0; t + 1 < trace.steps; ++t)
      for (int i = 0; i < trace.per_step; ++i)
        for (int j = 0; j < trace.per_step; ++j) {
          const auto p = trace.experts[trace.idx(tok, t, i)];
          const auto q = trace.experts[trace.idx(tok, t + 1, j)];
          if (p < 0 || p >= experts || q < 0 || q >= experts)
            throw UsageError("co-activation: trace expert id outside [0," +
                             std::to_string(experts) + ")");
          ++m.at(p, q);
        }
  return m;
}

void export_heatmap(const CoActivationMatrix& matrix, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("export_heatmap: cannot open '" + path + "' for writing");
  out << "layer,prev_expert,next_expert,count,row_normalized\n";
  const auto normalized = matrix.row_normalized();
  for (int p = 0; p < matrix.experts; ++p)
    for (int q = 0; q < matrix.experts; ++q) {
      const auto c = matrix.at(p, q);
      if (c == 0) continue;
      char line[128];
      std::snprintf(line, sizeof line, "%d,%d,%d,%" PRIu64 ",%.17g\n", matrix.layer, p, q, c,
                    normalized[static_cast<std::size_t>(p) * matrix.experts + q]);
      out << line;
    }
  out << "# summary layer=" << matrix.layer << " experts=" << matrix.experts
      << " total=" << matrix.total() << (matrix.single_step ? " single_step_no_transitions" : "")
      << "\n";
  if (!out.flush()) throw IoError("export_heatmap: write failed for '" + path + "'");
}

CoActivationMatrix parse_heatmap(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("parse_heatmap: cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || line != "layer,prev_expert,next_expert,count,row_normalized")
    throw IoError("parse_heatmap: bad header in '" + path + "'");
  struct Row {
    int layer, p, q;
    std::uint64_t count;
  };
  std::vector<Row> rows;
  int layer = 0, experts = -1;
  bool single_step = false;
  std::uint64_t declared_total = 0;
  bool saw_summary = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      int l = 0, e = 0;
      char tail[64] = {0};
      std::uint64_t tot = 0;
      const int got = std::sscanf(line.c_str(), "# summary layer=%d experts=%d total=%" SCNu64 " %63s",
                                  &l, &e, &tot, tail);
      if (got < 3) throw IoError("parse_heatmap: bad summary line in '" + path + "'");
      layer = l;
      experts = e;
      declared_total = tot;
      single_step = std::string(tail) == "single_step_no_transitions";
      saw_summary = true;
      continue;
    }
    Row r{};
    double norm = 0.0;
    if (std::sscanf(line.c_str(), "%d,%d,%d,%" SCNu64 ",%lf", &r.layer, &r.p, &r.q, &r.count,
                    &norm) != 5)
      throw IoError("parse_heatmap: bad data row in '" + path + "': " + line);
    rows.push_back(r);
  }
  if (!saw_summary) throw IoError("parse_heatmap: missing summary line in '" + path + "'");
  CoActivationMatrix m(layer, experts);
  m.single_step = single_step;
  for (const auto& r : rows) {
    if (r.p < 0 || r.p >= experts || r.q < 0 || r.q >= experts)
      throw IoError("parse_heatmap: entry outside declared expert range in '" + path + "'");
    m.at(r.p, r.q) = r.count;
  }
  if (m.total() != declared_total)
    throw IoError("parse_heatmap: counts do not match declared total in '" + path + "'");
  return m;
}

BigUint binomial(int n, int k) {
  if (n < 0 || k < 0 || k > n)
    throw UsageError("binomial: need 0 <= k <= n, got n=" + std::to_string(n) +
                     " k=" + std::to_string(k));
  // Pascal row recurrence, exact at every step.
  std::vector<BigUint> row(static_cast<std::size_t>(k) + 1, BigUint(0));
  row[0] = BigUint(1);
  for (int i = 1; i <= n; ++i)
    for (int j = std::min(i, k); j >= 1; --j) row[static_cast<std::size_t>(j)] += row[static_cast<std::size_t>(j) - 1];
  return row[static_cast<std::size_t>(k)];
}

std::string CombinatoricsReport::to_json() const {
  nlohmann::json j{
      {"n", n},
      {"k", k},
      {"c", c},
      {"combos_coe", combos_coe.str()},
      {"combos_moe", combos_moe.str()},
      {"ratio_exact", {{"numerator", combos_coe.str()}, {"denominator", combos_moe.str()}}},
      {"ratio_decimal", static_cast<double>(ratio)},
  };
  return j.dump(2) + "\n";
}

CombinatoricsReport combination_ratio(int n, int k, int c) {
  if (c < 1) throw UsageError("combination_ratio: c must be >= 1");
  if (k < 1) throw UsageError("combination_ratio: k must be >= 1");
  if (static_cast<long long>(c) * k > n)
    throw UsageError("combination_ratio: need c·k <= n, got c·k=" + std::to_string(c * k) +
                     " n=" + std::to_string(n));
  CombinatoricsReport r;
  r.n = n;
  r.k = k;
  r.c = c;
  r.combos_coe = binomial(n, k).pow(static_cast<unsigned>(c));
  r.combos_moe = binomial(n, c * k);
  r.ratio = r.combos_coe.to_long_double() / r.combos_moe.to_long_double();
  return r;
}

namespace {

CostAxis make_axis(std::int64_t a, std::int64_t b) {
  CostAxis axis;
  axis.a = a;
  axis.b = b;
  const auto hi = std::max(a, b);
  axis.delta_pct = hi == 0 ? 0.0 : 100.0 * static_cast<double>(b - a) / static_cast<double>(hi);
  axis.dominant = a == b ? "equal" : (a < b ? "a" : "b");
  return axis;
}

nlohmann::json axis_json(const CostAxis& axis) {
  return {{"a", axis.a}, {"b", axis.b}, {"delta_pct", axis.delta_pct}, {"dominant", axis.dominant}};
}

nlohmann::json counts_json(const ParamCounts& pc) {
  return {{"routed_experts", pc.routed_experts},
          {"shared_experts", pc.shared_experts},
          {"routers", pc.routers},
          {"attention", pc.attention},
          {"norms", pc.norms},
          {"embedding", pc.embedding},
          {"head", pc.head},
          {"total", pc.total()},
          {"non_embedding", pc.non_embedding()}};
}

}  // namespace

std::string CostReport::to_json() const {
  nlohmann::json j{
      {"params_a", counts_json(params_a)},
      {"params_b", counts_json(params_b)},
      {"total_params", axis_json(total_params)},
      {"non_embedding_params", axis_json(non_embedding_params)},
      {"expert_params", axis_json(expert_params)},
      {"invocations_per_token_per_layer", axis_json(invocations_per_token_per_layer)},
      {"invocations_per_token_per_model", axis_json(invocations_per_token_per_model)},
      {"routers", axis_json(routers)},
      {"optimizer_memory_elements", axis_json(optimizer_memory_elements)},
      {"note", "analytic parameter-count model; optimizer memory = 3x trainable elements"},
  };
  return j.dump(2) + "\n";
}

CostReport cost_compare(const ModelConfig& a, const ModelConfig& b) {
  CostReport r;
  r.params_a = param_count(a);
  r.params_b = param_count(b);
  r.total_params = make_axis(r.params_a.total(), r.params_b.total());
  r.non_embedding_params = make_axis(r.params_a.non_embedding(), r.params_b.non_embedding());
  r.expert_params = make_axis(r.params_a.routed_experts + r.params_a.shared_experts,
                              r.params_b.routed_experts + r.params_b.shared_experts);
  r.invocations_per_token_per_layer =
      make_axis(a.coe.total_selections, b.coe.total_selections);
  r.invocations_per_token_per_model = make_axis(
      static_cast<std::int64_t>(a.coe.total_selections) * a.layers,
      static_cast<std::int64_t>(b.coe.total_selections) * b.layers);
  r.routers = make_axis(static_cast<std::int64_t>(a.coe.router_count()) * a.layers,
                        static_cast<std::int64_t>(b.coe.router_count()) * b.layers);
  r.optimizer_memory_elements = make_axis(3 * r.params_a.total(), 3 * r.params_b.total());
  return r;
}

}  // namespace coe
