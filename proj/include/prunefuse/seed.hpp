#pragma once

#include <cstdint>

namespace prunefuse {

// splitmix64 finalizer; mixes a base seed with stream identifiers so related
// RNG streams (per step, per repeat, per tree) never coincide.
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream, std::uint64_t index = 0) {
  return mix64(mix64(mix64(base) ^ stream) ^ index);
}

}  // namespace prunefuse
