#include "coe/bignum.hpp"

#include <algorithm>
#include <cstdio>

namespace coe {

namespace {
constexpr std::uint32_t kBase = 1000000000u;
}

BigUint::BigUint(std::uint64_t v) {
  while (v) {
    limbs_.push_back(static_cast<std::uint32_t>(v % kBase));
    v /= kBase;
  }
}

void BigUint::trim() {
  while (!limbs_.empty() && limbs_.back() == 0) limbs_.pop_back();
}

BigUint& BigUint::operator+=(const BigUint& other) {
  const std::size_t n = std::max(limbs_.size(), other.limbs_.size());
  limbs_.resize(n, 0);
  std::uint32_t carry = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t s = static_cast<std::uint64_t>(limbs_[i]) + carry;
    if (i < other.limbs_.size()) s += other.limbs_[i];
    limbs_[i] = static_cast<std::uint32_t>(s % kBase);
    carry = static_cast<std::uint32_t>(s / kBase);
  }
  if (carry) limbs_.push_back(carry);
  return *this;
}

BigUint operator*(const BigUint& a, const BigUint& b) {
  BigUint out;
  if (a.limbs_.empty() || b.limbs_.empty()) return out;
  out.limbs_.assign(a.limbs_.size() + b.limbs_.size(), 0);
  for (std::size_t i = 0; i < a.limbs_.size(); ++i) {
    std::uint64_t carry = 0;
    for (std::size_t j = 0; j < b.limbs_.size(); ++j) {
      std::uint64_t cur = static_cast<std::uint64_t>(a.limbs_[i]) * b.limbs_[j] +
                          out.limbs_[i + j] + carry;
      out.limbs_[i + j] = static_cast<std::uint32_t>(cur % kBase);
      carry = cur / kBase;
    }
    std::size_t k = i + b.limbs_.size();
    while (carry) {
      std::uint64_t cur = out.limbs_[k] + carry;
      out.limbs_[k] = static_cast<std::uint32_t>(cur % kBase);
      carry = cur / kBase;
      ++k;
    }
  }
  out.trim();
  return out;
}

std::strong_ordering operator<=>(const BigUint& a, const BigUint& b) {
  if (a.limbs_.size() != b.limbs_.size())
    return a.limbs_.size() <=> b.limbs_.size();
  for (std::size_t i = a.limbs_.size(); i-- > 0;)
    if (a.limbs_[i] != b.limbs_[i]) return a.limbs_[i] <=> b.limbs_[i];
  return std::strong_ordering::equal;
}

BigUint BigUint::pow(unsigned exponent) const {
  BigUint result(1);
  BigUint base = *this;
  while (exponent) {
    if (exponent & 1u) result = result * base;
    base = base * base;
    exponent >>= 1u;
  }
  return result;
}

std::string BigUint::str() const {
  if (limbs_.empty()) return "0";
  std::string s = std::to_string(limbs_.back());
  char buf[16];
  for (std::size_t i = limbs_.size() - 1; i-- > 0;) {
    std::snprintf(buf, sizeof buf, "%09u", limbs_[i]);
    s += buf;
  }
  return s;
}

long double BigUint::to_long_double() const {
  long double v = 0.0L;
  for (std::size_t i = limbs_.size(); i-- > 0;) v = v * static_cast<long double>(kBase) + limbs_[i];
  return v;
}

}  // namespace coe
