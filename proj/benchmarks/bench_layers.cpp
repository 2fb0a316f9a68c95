#include <benchmark/benchmark.h>

#include <vector>

#include "coe/coe_layer.hpp"
#include "coe/model.hpp"
#include "coe/training.hpp"

namespace {

using namespace coe;

template <typename T>
Tensor<T> random_rows(std::int64_t n, std::int64_t d, std::uint64_t seed) {
  Tensor<T> t({n, d});
  RngStream rng(seed, "bench");
  for (auto& v : t.data()) v = static_cast<T>(rng.next_normal());
  return t;
}

void MatmulF64(benchmark::State& state) {
  const auto n = state.range(0);
  auto a = random_rows<double>(n, n, 1);
  auto b = random_rows<double>(n, n, 2);
  for (auto _ : state) {
    auto c = matmul(a, b);
    benchmark::DoNotOptimize(c.data().data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}
BENCHMARK(MatmulF64)->Arg(64)->Arg(128)->Arg(256);

// Iterated routing at matched expert budget: total selections fixed at 8,
// split across 1, 2, or 4 passes.
template <typename T>
void chained_forward(benchmark::State& state, int steps) {
  CoEConfig cfg;
  cfg.routed_experts = 8;
  cfg.shared_experts = 1;
  cfg.total_selections = 8;
  cfg.steps = steps;
  cfg.hidden = 128;
  cfg.ffn_hidden = 256;
  ParameterStore<T> store;
  auto layer = CoELayer<T>::create(store, "l", cfg, 3);
  auto x = random_rows<T>(256, 128, 4);
  for (auto _ : state) {
    auto out = layer.forward(x, nullptr, false);
    benchmark::DoNotOptimize(out.output.data().data());
  }
  state.SetItemsProcessed(state.iterations() * 256);
}

void ChainedForwardC1(benchmark::State& state) { chained_forward<float>(state, 1); }
void ChainedForwardC2(benchmark::State& state) { chained_forward<float>(state, 2); }
void ChainedForwardC4(benchmark::State& state) { chained_forward<float>(state, 4); }
BENCHMARK(ChainedForwardC1);
BENCHMARK(ChainedForwardC2);
BENCHMARK(ChainedForwardC4);

void TrainStep(benchmark::State& state) {
  ModelConfig mc;
  mc.layers = 2;
  mc.hidden = 64;
  mc.heads = 4;
  mc.vocab = 256;
  mc.max_seq = 64;
  mc.coe.hidden = 64;
  mc.coe.routed_experts = 8;
  mc.coe.shared_experts = 1;
  mc.coe.total_selections = 4;
  mc.coe.steps = 2;
  mc.coe.ffn_hidden = 128;
  TrainConfig tc;
  tc.batch_size = 4;
  tc.seq_len = 64;

  Model<float> model(mc, 5);
  AdamW<float> opt(model.params(), tc);
  DataStream data = DataStream::copy_task(64, 8);
  std::int64_t step = 0;
  for (auto _ : state) {
    auto batch = data.train_batch(1, ++step, tc.batch_size, tc.seq_len);
    Tape<float> tape;
    model.watch_parameters(tape);
    auto loss = batch_loss(model, batch, &tape, false);
    model.zero_grads();
    tape.backward(loss);
    clip_global_norm(model.params(), tc.clip_norm);
    opt.step(1e-4);
    benchmark::DoNotOptimize(loss.item());
  }
  state.SetItemsProcessed(state.iterations() * tc.batch_size * tc.seq_len);
}
BENCHMARK(TrainStep);

}  // namespace

BENCHMARK_MAIN();
