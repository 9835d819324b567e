#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace vwsd {

// Deterministic, platform-stable hashing and RNG. std::shuffle and the
// standard distributions are implementation-defined, so every seeded
// decision in the project goes through these instead.

inline uint64_t splitmix64(uint64_t& state) {
  state += 0x9e3779b97f4a7c15ull;
  uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline uint64_t fnv1a64(std::string_view bytes, uint64_t seed = 0xcbf29ce484222325ull) {
  uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

class DetRng {
 public:
  explicit DetRng(uint64_t seed) : state_(seed) {
    // warm up so that small seeds diverge immediately
    splitmix64(state_);
  }

  uint64_t next_u64() { return splitmix64(state_); }

  // Uniform in [0, 1) with 53 bits of entropy.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in [0, n). Debiased by rejection.
  uint64_t below(uint64_t n) {
    if (n == 0) return 0;
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  // Fisher-Yates with explicit draws.
  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (size_t i = items.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  uint64_t state_;
};

}  // namespace vwsd
