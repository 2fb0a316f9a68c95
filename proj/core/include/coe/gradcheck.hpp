#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "coe/ops.hpp"

namespace coe {

template <typename T>
Tensor<T> clone(const Tensor<T>& t) {
  return Tensor<T>(t.shape(), std::vector<T>(t.data().begin(), t.data().end()));
}

// Scalar-valued function of one tensor; the tape is null for the plain
// numeric evaluations.
template <typename T>
using ScalarFn = std::function<Tensor<T>(const Tensor<T>&, Tape<T>*)>;

// Compares the taped gradient of `f` at `point` against central differences
// (f(x+h) - f(x-h)) / 2h per coordinate. Returns the max relative error with
// denominator max(|analytic|, |numeric|, 1e-8).
template <typename T>
T finite_diff_check(const ScalarFn<T>& f, const Tensor<T>& point, T h) {
  if (h <= T(0)) throw UsageError("finite_diff_check: h must be positive");
  Tensor<T> x = clone(point);
  Tape<T> tape;
  tape.watch(x);
  Tensor<T> y = f(x, &tape);
  if (!y.is_scalar()) throw UsageError("finite_diff_check: f must be scalar-valued");
  tape.backward(y);
  auto analytic = x.grad();

  T max_rel = 0;
  for (std::int64_t i = 0; i < point.size(); ++i) {
    Tensor<T> xp = clone(point);
    xp.at(i) += h;
    Tensor<T> xm = clone(point);
    xm.at(i) -= h;
    const T fp = f(xp, nullptr).item();
    const T fm = f(xm, nullptr).item();
    const T num = (fp - fm) / (T(2) * h);
    const T ana = analytic[static_cast<std::size_t>(i)];
    const T denom = std::max({std::abs(ana), std::abs(num), T(1e-8)});
    max_rel = std::max(max_rel, std::abs(ana - num) / denom);
  }
  return max_rel;
}

}  // namespace coe
