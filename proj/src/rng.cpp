#include "mla/rng.hpp"

#include <cmath>
#include <numbers>

#include "mla/digest.hpp"
#include "mla/errors.hpp"

namespace mla {

static uint64_t splitmix_finalize(uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

uint64_t Rng::next_u64() {
  ++counter_;
  return splitmix_finalize(seed_ + counter_ * 0x9e3779b97f4a7c15ull);
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
  // 1-u keeps the log argument in (0, 1].
  double u1 = 1.0 - uniform();
  double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

uint64_t Rng::below(uint64_t n) {
  if (n == 0) raise(ErrorCode::InvalidArgument, "Rng::below: n must be positive");
  return next_u64() % n;
}

Rng Rng::fork(uint64_t stream) const {
  return Rng(splitmix_finalize(seed_ ^ splitmix_finalize(stream + 0x632be59bd9b4e019ull)));
}

Rng Rng::fork(std::string_view label) const { return fork(fnv1a64(label)); }

}  // namespace mla
