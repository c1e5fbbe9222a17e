#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "fsmn/errors.hpp"
#include "fsmn/matrix.hpp"

namespace fsmn {

/// Deterministic random stream. Built on mt19937_64, whose output sequence is
/// fixed by the standard, and converts bits to reals by hand so results are
/// identical across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform01() { return double(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  /// Uniform integer in [0, n), n > 0. Rejection sampling avoids modulo bias.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  double normal() {
    // Box-Muller; u1 in (0, 1].
    const double u1 = 1.0 - uniform01();
    const double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      const auto j = below(i);
      using std::swap;
      swap(first[i - 1], first[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

/// Fills a matrix with values drawn uniformly from [lo, hi).
template <typename T>
void fill_uniform(Matrix<T>& m, Rng& rng, double lo, double hi) {
  if (!(lo < hi)) {
    throw InputError("uniform range requires lo < hi, got [" + std::to_string(lo) + ", " +
                     std::to_string(hi) + ")");
  }
  const T top = std::nextafter(static_cast<T>(hi), static_cast<T>(lo));
  for (auto& v : m.values()) {
    T x = static_cast<T>(rng.uniform(lo, hi));
    v = x < static_cast<T>(hi) ? x : top;
  }
}

template <typename T>
Matrix<T> rng_uniform(std::uint64_t seed, double lo, double hi, std::size_t rows,
                      std::size_t cols) {
  Matrix<T> m(rows, cols);
  Rng rng(seed);
  fill_uniform(m, rng, lo, hi);
  return m;
}

}  // namespace fsmn
