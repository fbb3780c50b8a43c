#ifndef DIDIMP_RNG_HPP
#define DIDIMP_RNG_HPP

#include <cstdint>
#include <random>

namespace didimp {

// splitmix64 finalizer; bijective on 64-bit words.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Counter-based stream: fully determined by (seed, index), so simulation
// replications can be assigned to any worker in any order without changing
// the draws.
inline std::mt19937_64 stream(std::uint64_t seed, std::uint64_t index) {
  return std::mt19937_64(mix64(mix64(seed) ^ mix64(~index)));
}

}  // namespace didimp

#endif
