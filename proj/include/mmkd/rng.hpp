// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace mmkd {

// splitmix64 finalizer; decorrelates derived seed streams.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t seed_combine(std::uint64_t seed, std::uint64_t salt) {
  return mix64(seed ^ mix64(salt));
}

// FNV-1a.
inline std::uint64_t hash_tag(std::string_view tag) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

// Independent generator for (seed, tag, index). Every random decision in the
// project draws from a stream derived this way, so runs are reproducible and
// resumable at stage boundaries without carrying generator state around.
inline std::mt19937_64 make_rng(std::uint64_t seed, std::string_view tag,
                                std::uint64_t index = 0) {
  return std::mt19937_64(seed_combine(seed_combine(seed, hash_tag(tag)), index));
}

}  // namespace mmkd
