#pragma once

#include <compare>
#include <cstdint>
#include <string>
#include <vector>

namespace coe {

// Unsigned arbitrary-precision integer, base 1e9 limbs (little-endian).
// Supports exactly what the combinatorics needs: add, multiply, compare,
// decimal printing, and a long-double approximation.
class BigUint {
 public:
  BigUint() = default;
  BigUint(std::uint64_t v);  // NOLINT(google-explicit-constructor)

  BigUint& operator+=(const BigUint& other);
  friend BigUint operator+(BigUint a, const BigUint& b) { return a += b; }
  friend BigUint operator*(const BigUint& a, const BigUint& b);

  friend bool operator==(const BigUint& a, const BigUint& b) { return a.limbs_ == b.limbs_; }
  friend std::strong_ordering operator<=>(const BigUint& a, const BigUint& b);

  BigUint pow(unsigned exponent) const;

  bool is_zero() const { return limbs_.empty(); }
  std::string str() const;
  long double to_long_double() const;

 private:
  void trim();
  std::vector<std::uint32_t> limbs_;  // each < 1e9
};

}  // namespace coe
