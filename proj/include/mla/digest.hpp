#pragma once

#include <cstdint>
#include <cstring>
#include <span>
#include <string>

namespace mla {

// FNV-1a, used for test digests, split assignment and run-directory names.
// Not cryptographic; collisions are irrelevant at this scale.
class Fnv1a64 {
 public:
  Fnv1a64& update(const void* data, size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
      h_ ^= p[i];
      h_ *= 0x100000001b3ull;
    }
    return *this;
  }
  Fnv1a64& update_u64(uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    return update(b, 8);
  }
  // Feeds the little-endian float32 image of each value.
  Fnv1a64& update_f32(std::span<const double> values) {
    for (double d : values) {
      float f = static_cast<float>(d);
      uint32_t bits;
      std::memcpy(&bits, &f, 4);
      unsigned char b[4];
      for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
      update(b, 4);
    }
    return *this;
  }
  uint64_t value() const { return h_; }

 private:
  uint64_t h_ = 0xcbf29ce484222325ull;
};

inline uint64_t fnv1a64(std::string_view s) {
  return Fnv1a64().update(s.data(), s.size()).value();
}

std::string hex64(uint64_t v);

}  // namespace mla
