#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>

namespace semiq {

// Stateless 64-bit mixer (splitmix64 finalizer).
std::uint64_t mix64(std::uint64_t x);

// Folds a list of words into a single stream key. Order matters.
std::uint64_t stream_key(std::initializer_list<std::uint64_t> words);

// Counter-based generator: the i-th draw is mix64(key + i * golden). Any
// stream can be reconstructed from its key alone, so per-(replica, agent,
// iteration) streams are independent of scheduling.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t key) : key_(key) {}

  std::uint64_t next_u64();
  // Uniform on [0, 1) with 53 random bits.
  double uniform();
  // Uniform on [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  // Exp(1) variate.
  double exponential();
  // Index i with probability weights[i] / sum(weights), via inverse CDF on
  // the cumulative row `cdf` (nondecreasing, last entry is the total).
  int categorical(std::span<const double> cdf);

  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace semiq
