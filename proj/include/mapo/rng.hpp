#pragma once

#include <cstdint>
#include <random>

namespace mapo {

// splitmix64 finalizer; used to derive independent-looking streams from a
// master seed so work items can run in any order or thread without changing
// the draws they see.
inline uint64_t mix_seed(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t master, uint64_t stream) {
  return mix_seed(master ^ mix_seed(stream));
}

inline uint64_t derive_seed(uint64_t master, uint64_t stream, uint64_t index) {
  return mix_seed(derive_seed(master, stream) ^ mix_seed(index + 0x51ed270b7a03b3a1ull));
}

using Rng = std::mt19937_64;

inline Rng make_rng(uint64_t seed) { return Rng(seed); }

inline double uniform_real(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline int uniform_int(Rng& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

inline double standard_normal(Rng& rng) {
  return std::normal_distribution<double>(0.0, 1.0)(rng);
}

}  // namespace mapo
