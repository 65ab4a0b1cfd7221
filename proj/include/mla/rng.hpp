#pragma once

#include <cstdint>
#include <string_view>

namespace mla {

// Counter-based splitmix64 stream. A generator is fully described by
// (seed, counter), so identical seeds and call sequences replay exactly,
// on any platform. fork() derives an independent stream without touching
// the parent's counter.
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed) {}

  uint64_t next_u64();
  // Uniform in [0, 1), 53 bits of mantissa.
  double uniform();
  // Standard normal via Box-Muller; consumes two uniforms per call.
  double normal();
  // Uniform integer in [0, n); n must be positive.
  uint64_t below(uint64_t n);

  Rng fork(uint64_t stream) const;
  Rng fork(std::string_view label) const;

  uint64_t seed() const { return seed_; }
  uint64_t counter() const { return counter_; }

 private:
  uint64_t seed_ = 0;
  uint64_t counter_ = 0;
};

}  // namespace mla
