#include <cmath>

#include "coe/coe_layer.hpp"
#include "coe/gradcheck.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace coe;

namespace {

CoEConfig make_cfg(int n, int m, int k, int c, ResidualMode res, GatingMode gate, int d = 16,
                   int h = 8) {
  CoEConfig cfg;
  cfg.routed_experts = n;
  cfg.shared_experts = m;
  cfg.total_selections = k;
  cfg.steps = c;
  cfg.residual_mode = res;
  cfg.gating_mode = gate;
  cfg.hidden = d;
  cfg.ffn_hidden = h;
  return cfg;
}

double max_abs_diff(const Tensor<double>& got, const std::vector<std::vector<double>>& want) {
  double m = 0;
  const auto d = got.cols();
  for (std::int64_t t = 0; t < got.rows(); ++t)
    for (std::int64_t c = 0; c < d; ++c)
      m = std::max(m, std::abs(got.at(t * d + c) -
                               want[static_cast<std::size_t>(t)][static_cast<std::size_t>(c)]));
  return m;
}

}  // namespace

TEST_CASE("configuration violations are rejected before compute") {
  CHECK_THROWS_AS(make_cfg(8, 1, 5, 2, ResidualMode::kInner, GatingMode::kPerIteration).validate(),
                  ConfigError);  // C does not divide K
  CHECK_THROWS_AS(make_cfg(3, 1, 8, 2, ResidualMode::kInner, GatingMode::kPerIteration).validate(),
                  ConfigError);  // K/C > N
  CHECK_THROWS_AS(make_cfg(8, 1, 4, 0, ResidualMode::kInner, GatingMode::kPerIteration).validate(),
                  ConfigError);  // C < 1
  CHECK_NOTHROW(make_cfg(8, 1, 4, 2, ResidualMode::kInner, GatingMode::kPerIteration).validate());
}

TEST_CASE("single step without residual reduces to moe_forward") {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    ParameterStore<double> store;
    auto cfg = make_cfg(8, 1, 4, 1, ResidualMode::kNone, GatingMode::kPerIteration);
    auto layer = CoELayer<double>::create(store, "l", cfg, seed);
    testsup::randomize(store, seed + 100);
    auto x = testsup::random_rows<double>(6, 16, seed + 200);
    auto chained = coe_forward(layer, x);
    auto single = moe_forward(layer, x);
    double m = 0;
    for (std::int64_t i = 0; i < chained.output.size(); ++i)
      m = std::max(m, std::abs(chained.output.at(i) - single.output.at(i)));
    CHECK(m < 1e-12);
  }
}

TEST_CASE("zero expert weights: residual identities") {
  auto x = testsup::random_rows<double>(5, 16, 77);
  for (auto res : {ResidualMode::kInner, ResidualMode::kOuter, ResidualMode::kInit}) {
    for (int c : {1, 2, 4}) {
      ParameterStore<double> store;
      auto layer =
          CoELayer<double>::create(store, "l", make_cfg(8, 1, 4, c, res, GatingMode::kPerIteration), 1);
      testsup::zero_all(store);
      auto r = coe_forward(layer, x);
      for (std::int64_t i = 0; i < x.size(); ++i) CHECK(r.output.at(i) == x.at(i));
    }
  }
  ParameterStore<double> store;
  auto layer = CoELayer<double>::create(
      store, "l", make_cfg(8, 1, 4, 2, ResidualMode::kNone, GatingMode::kPerIteration), 1);
  testsup::zero_all(store);
  auto r = coe_forward(layer, x);
  for (std::int64_t i = 0; i < x.size(); ++i) CHECK(r.output.at(i) == 0.0);
}

TEST_CASE("two-step forward matches the dense two-pass oracle") {
  for (auto res : {ResidualMode::kInner, ResidualMode::kOuter, ResidualMode::kInit,
                   ResidualMode::kNone}) {
    for (auto gate : {GatingMode::kPerIteration, GatingMode::kShared}) {
      ParameterStore<double> store;
      auto layer = CoELayer<double>::create(store, "l", make_cfg(8, 1, 4, 2, res, gate), 3);
      testsup::randomize(store, 33);
      auto x = testsup::random_rows<double>(4, 16, 44);
      auto got = coe_forward(layer, x);
      auto want = testsup::chained_oracle(layer, x);
      CAPTURE(to_string(res));
      CAPTURE(to_string(gate));
      CHECK(max_abs_diff(got.output, want) < 1e-12);
    }
  }
}

TEST_CASE("outer residual special cases") {
  ParameterStore<double> store;
  auto layer = CoELayer<double>::create(
      store, "l", make_cfg(6, 1, 2, 1, ResidualMode::kOuter, GatingMode::kPerIteration), 5);
  testsup::randomize(store, 55);
  auto x = testsup::random_rows<double>(3, 16, 66);
  // C=1: y = moe(x) + x.
  auto outer = coe_forward(layer, x);
  ParameterStore<double> store2;
  auto plain = CoELayer<double>::create(
      store2, "l", make_cfg(6, 1, 2, 1, ResidualMode::kNone, GatingMode::kPerIteration), 5);
  testsup::randomize(store2, 55);
  auto base = moe_forward(plain, x);
  for (std::int64_t i = 0; i < x.size(); ++i)
    CHECK(outer.output.at(i) == doctest::Approx(base.output.at(i) + x.at(i)).epsilon(1e-13));
}

TEST_CASE("init residual reduces to inner at a single step") {
  ParameterStore<double> store;
  auto init_layer = CoELayer<double>::create(
      store, "l", make_cfg(6, 0, 3, 1, ResidualMode::kInit, GatingMode::kPerIteration), 6);
  testsup::randomize(store, 60);
  ParameterStore<double> store2;
  auto inner_layer = CoELayer<double>::create(
      store2, "l", make_cfg(6, 0, 3, 1, ResidualMode::kInner, GatingMode::kPerIteration), 6);
  testsup::randomize(store2, 60);
  auto x = testsup::random_rows<double>(4, 16, 61);
  auto a = coe_forward(init_layer, x);
  auto b = coe_forward(inner_layer, x);
  for (std::int64_t i = 0; i < x.size(); ++i) CHECK(a.output.at(i) == b.output.at(i));
}

TEST_CASE("shared gating reuses step-one gates verbatim") {
  ParameterStore<double> store;
  auto layer = CoELayer<double>::create(
      store, "l", make_cfg(8, 0, 4, 2, ResidualMode::kInner, GatingMode::kShared), 7);
  testsup::randomize(store, 70);
  CHECK(layer.routers.size() == 1);
  auto x = testsup::random_rows<double>(5, 16, 71);
  auto r = coe_forward(layer, x);
  for (std::int64_t t = 0; t < 5; ++t)
    for (int j = 0; j < 2; ++j) {
      CHECK(r.trace.experts[r.trace.idx(t, 0, j)] == r.trace.experts[r.trace.idx(t, 1, j)]);
      CHECK(r.trace.gates[r.trace.idx(t, 0, j)] == r.trace.gates[r.trace.idx(t, 1, j)]);
    }

  // C=1 shared gating coincides with per-iteration gating.
  ParameterStore<double> s1, s2;
  auto shared1 = CoELayer<double>::create(
      s1, "l", make_cfg(8, 0, 4, 1, ResidualMode::kInner, GatingMode::kShared), 8);
  auto per1 = CoELayer<double>::create(
      s2, "l", make_cfg(8, 0, 4, 1, ResidualMode::kInner, GatingMode::kPerIteration), 8);
  testsup::randomize(s1, 80);
  testsup::randomize(s2, 80);
  auto y1 = coe_forward(shared1, x);
  auto y2 = coe_forward(per1, x);
  for (std::int64_t i = 0; i < x.size(); ++i) CHECK(y1.output.at(i) == y2.output.at(i));

  // Zero experts with inner residual still map x to x.
  ParameterStore<double> s3;
  auto zl = CoELayer<double>::create(
      s3, "l", make_cfg(8, 0, 4, 2, ResidualMode::kInner, GatingMode::kShared), 9);
  testsup::zero_all(s3);
  auto yz = coe_forward(zl, x);
  for (std::int64_t i = 0; i < x.size(); ++i) CHECK(yz.output.at(i) == x.at(i));
}

TEST_CASE("invocation parity: C·(K/C) = K expert calls per token") {
  auto x = testsup::random_rows<double>(9, 16, 90);
  for (auto [k, c] : std::vector<std::pair<int, int>>{{8, 1}, {8, 2}, {4, 2}, {8, 4}}) {
    ParameterStore<double> store;
    auto layer = CoELayer<double>::create(
        store, "l", make_cfg(8, 1, k, c, ResidualMode::kInner, GatingMode::kPerIteration), 10);
    testsup::randomize(store, 91);
    InvocationCounter counter;
    auto r = coe_forward(layer, x, nullptr, true, &counter);
    CHECK(counter.routed_per_step.size() == static_cast<std::size_t>(c));
    for (auto per_step : counter.routed_per_step)
      CHECK(per_step == static_cast<std::uint64_t>(9 * (k / c)));
    CHECK(counter.routed_total == static_cast<std::uint64_t>(9 * k));

    // Trace completeness: tokens × C entries of K/C pairs.
    CHECK(r.trace.experts.size() == static_cast<std::size_t>(9 * c * (k / c)));
    for (auto e : r.trace.experts) CHECK(e >= 0);
    for (auto g : r.trace.gates) CHECK(g > 0.0);
  }
}

TEST_CASE("inner residual passes gradient through as identity at zero weights") {
  ParameterStore<double> store;
  auto layer = CoELayer<double>::create(
      store, "l", make_cfg(4, 1, 2, 2, ResidualMode::kInner, GatingMode::kPerIteration), 11);
  testsup::zero_all(store);
  auto probe = testsup::random_rows<double>(1, 16, 92);

  Tape<double> tape;
  Tensor<double> x = clone(testsup::random_rows<double>(2, 16, 93));
  tape.watch(x);
  auto r = layer.forward(x, &tape);
  // d/dx of dot(probe-extended, y) must equal the probe itself.
  Tensor<double> u = testsup::random_rows<double>(2, 16, 94);
  tape.backward(sum(mul(r.output, u, &tape), &tape));
  for (std::int64_t i = 0; i < x.size(); ++i)
    CHECK(x.grad()[static_cast<std::size_t>(i)] == doctest::Approx(u.at(i)).epsilon(1e-12));

  // Spot-check against finite differences as well.
  ScalarFn<double> f = [&](const Tensor<double>& z, Tape<double>* tp) {
    auto out = layer.forward(z, tp);
    return sum(mul(out.output, u, tp), tp);
  };
  CHECK(finite_diff_check(f, testsup::random_rows<double>(2, 16, 95), 1e-5) < 1e-6);
  (void)probe;
}

TEST_CASE("per-iteration routers are independent") {
  ParameterStore<double> store;
  auto layer = CoELayer<double>::create(
      store, "l", make_cfg(8, 0, 4, 2, ResidualMode::kInner, GatingMode::kPerIteration), 12);
  testsup::randomize(store, 96);
  CHECK(layer.routers.size() == 2);
  auto x = testsup::random_rows<double>(6, 16, 97);
  auto before = coe_forward(layer, x);

  // Perturbing the second router never changes first-iteration selections.
  RngStream rng(98, "perturb");
  for (auto& v : layer.routers[1].embed->tensor.data()) v += rng.next_normal(0.0, 1.0);
  auto after = coe_forward(layer, x);
  for (std::int64_t t = 0; t < 6; ++t)
    for (int j = 0; j < 2; ++j) {
      CHECK(before.trace.experts[before.trace.idx(t, 0, j)] ==
            after.trace.experts[after.trace.idx(t, 0, j)]);
      CHECK(before.trace.gates[before.trace.idx(t, 0, j)] ==
            after.trace.gates[after.trace.idx(t, 0, j)]);
    }
}

TEST_CASE("optional load-balance penalty is off by default and well-formed when on") {
  auto x = testsup::random_rows<double>(6, 16, 99);
  ParameterStore<double> store;
  auto cfg = make_cfg(8, 0, 4, 2, ResidualMode::kInner, GatingMode::kPerIteration);
  auto layer = CoELayer<double>::create(store, "l", cfg, 13);
  testsup::randomize(store, 99);
  Tape<double> tape;
  store.watch_all(tape);
  auto off = layer.forward(x, &tape);
  CHECK_FALSE(off.aux_loss.defined());

  ParameterStore<double> store2;
  auto cfg2 = cfg;
  cfg2.load_balance_coeff = 0.01;
  auto layer2 = CoELayer<double>::create(store2, "l", cfg2, 13);
  testsup::randomize(store2, 99);
  Tape<double> tape2;
  store2.watch_all(tape2);
  auto on = layer2.forward(x, &tape2);
  REQUIRE(on.aux_loss.defined());
  // Perfectly balanced uniform routing gives coeff·N·Σ f_i·P_i = coeff.
  CHECK(on.aux_loss.item() > 0.0);
  CHECK_NOTHROW(tape2.backward(on.aux_loss));
}
