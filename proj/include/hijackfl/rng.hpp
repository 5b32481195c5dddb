#pragma once

// Named random streams derived from one master seed.
//
// stream_seed(master, "name", k0, k1, ...) folds the FNV-1a hash of the name
// and every integer key through SplitMix64. Each (name, keys) tuple therefore
// owns an independent std::mt19937_64, and drawing from one stream never
// shifts another. This is what lets an adversary do arbitrary offline work
// without perturbing the honest training trajectory.

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace hijackfl {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t stream_seed(std::uint64_t master, std::string_view name,
                                 std::initializer_list<std::uint64_t> keys = {}) {
  std::uint64_t h = splitmix64(master ^ fnv1a(name));
  for (auto k : keys) h = splitmix64(h ^ splitmix64(k + 0x632be59bd9b4e019ULL));
  return h;
}

using Rng = std::mt19937_64;

inline Rng make_stream(std::uint64_t master, std::string_view name,
                       std::initializer_list<std::uint64_t> keys = {}) {
  return Rng(stream_seed(master, name, keys));
}

}  // namespace hijackfl
