#pragma once

#include <cstdint>
#include <span>
#include <string_view>

namespace xattn {

inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
inline constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

/// 64-bit FNV-1a, resumable through `state`.
inline std::uint64_t fnv1a(std::span<const std::uint8_t> bytes, std::uint64_t state = kFnvOffset) {
  for (std::uint8_t b : bytes) {
    state ^= b;
    state *= kFnvPrime;
  }
  return state;
}

inline std::uint64_t fnv1a(std::string_view text, std::uint64_t state = kFnvOffset) {
  for (unsigned char c : text) {
    state ^= c;
    state *= kFnvPrime;
  }
  return state;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Derives an independent stream seed from a base seed and a salt.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  return splitmix64(seed ^ splitmix64(salt));
}

}  // namespace xattn
