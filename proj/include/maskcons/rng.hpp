#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

#include "maskcons/common.hpp"

namespace maskcons {

// Counter-based splittable generator. A stream is (key, counter); outputs are
// a stateless hash of both, so sequences are reproducible regardless of how
// many child streams were split off in between. No global state.
class Rng {
 public:
  explicit Rng(uint64_t key) : key_(key), counter_(0) {}

  static uint64_t mix(uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
  }

  static uint64_t hash_name(std::string_view name) {
    uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
    for (char c : name) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ull;
    }
    return h;
  }

  // Derive an independent child stream; does not advance this stream.
  Rng split(std::string_view name) const {
    return Rng(mix(key_ ^ mix(hash_name(name))));
  }
  Rng split(uint64_t index) const { return Rng(mix(key_ ^ mix(index * 0x9E3779B97F4A7C15ull + 1))); }

  uint64_t next_u64() { return mix(key_ + 0x9E3779B97F4A7C15ull * ++counter_); }

  // Uniform in [0,1).
  real u01() { return static_cast<real>((next_u64() >> 11) * 0x1.0p-53); }

  real uniform(real lo, real hi) { return lo + (hi - lo) * u01(); }

  // Uniform integer in [0, n); n >= 1. Lemire multiply-shift with rejection.
  uint64_t uniform_int(uint64_t n) {
    __uint128_t m = static_cast<__uint128_t>(next_u64()) * n;
    uint64_t lo = static_cast<uint64_t>(m);
    if (lo < n) {
      const uint64_t threshold = (0ull - n) % n;
      while (lo < threshold) {
        m = static_cast<__uint128_t>(next_u64()) * n;
        lo = static_cast<uint64_t>(m);
      }
    }
    return static_cast<uint64_t>(m >> 64);
  }

  // Standard normal via Box-Muller; platform-stable within one build.
  real normal() {
    real u = static_cast<real>(((next_u64() >> 11) + 1) * 0x1.0p-53);  // (0,1]
    real v = u01();
    return static_cast<real>(std::sqrt(-2.0 * std::log(static_cast<double>(u))) *
                             std::cos(2.0 * 3.14159265358979323846 * static_cast<double>(v)));
  }

  real normal(real mean, real stddev) { return mean + stddev * normal(); }

  real log_uniform(real lo, real hi) {
    return static_cast<real>(std::exp(uniform(static_cast<real>(std::log(lo)),
                                              static_cast<real>(std::log(hi)))));
  }

  bool bernoulli(real p) { return u01() < p; }

  uint64_t key() const { return key_; }
  uint64_t counter() const { return counter_; }

 private:
  uint64_t key_;
  uint64_t counter_;
};

}  // namespace maskcons
