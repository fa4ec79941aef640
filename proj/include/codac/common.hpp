#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace codac {

// Malformed files, bad headers, shape/name mismatches in stored data.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// NaN/Inf in an op output, divergence, zero-norm embeddings.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(const void* bytes, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
  return fnv1a64(s.data(), s.size(), h);
}

// Named deterministic RNG stream: independent streams per (seed, purpose)
// so running one stage never shifts another stage's randomness.
inline std::mt19937_64 rng_stream(std::uint64_t seed, const std::string& name) {
  return std::mt19937_64(splitmix64(seed ^ fnv1a64(name)));
}

inline std::mt19937_64 rng_stream(std::uint64_t seed, const std::string& name,
                                  std::uint64_t index) {
  return std::mt19937_64(splitmix64(splitmix64(seed ^ fnv1a64(name)) + index));
}

}  // namespace codac
