#pragma once

#include <cstdint>
#include <random>

namespace mvdlm {

using Rng = std::mt19937_64;

// splitmix64 finalizer; decorrelates nearby seeds.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Stream keyed by (seed, stream id, draw index). Every voxel task and
// every trajectory draw owns its own engine, so scheduling order cannot
// change results.
inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0,
                    std::uint64_t draw = 0) {
  std::uint64_t s = mix64(seed);
  s = mix64(s ^ mix64(stream + 0x5851f42d4c957f2dULL));
  s = mix64(s ^ mix64(draw + 0x14057b7ef767814fULL));
  return Rng(s);
}

}  // namespace mvdlm
