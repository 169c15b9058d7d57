#pragma once

// Deterministic random streams. std::mt19937_64 raw draws are pinned by the
// standard, but the <random> distributions are not; the transforms here are
// hand-rolled so identical seeds give identical bytes on every platform.

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace coffee {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t fnv1a64(std::string_view s, uint64_t h = 0xcbf29ce484222325ull) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

// Derive a child seed from (seed, tag, index). Used to give every run, image
// and sampling chain its own independent stream.
inline uint64_t derive_seed(uint64_t seed, std::string_view tag, uint64_t index = 0) {
  uint64_t h = fnv1a64(tag);
  h = splitmix64(h ^ splitmix64(seed));
  h = splitmix64(h ^ splitmix64(index * 0x9e3779b97f4a7c15ull + 1));
  return h;
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return double(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, n) via rejection.
  int64_t below(int64_t n) {
    const uint64_t un = uint64_t(n);
    const uint64_t limit = ~uint64_t(0) - ~uint64_t(0) % un;
    uint64_t x;
    do {
      x = gen_();
    } while (x >= limit);
    return int64_t(x % un);
  }

  // Standard normal via Box-Muller; the paired value is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();  // (0,1]: keep log finite
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  float normalf() { return float(normal()); }

  void fill_normal(float* out, size_t n) {
    for (size_t i = 0; i < n; ++i) out[i] = normalf();
  }

  std::vector<float> normals(size_t n) {
    std::vector<float> v(n);
    fill_normal(v.data(), n);
    return v;
  }

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace coffee
