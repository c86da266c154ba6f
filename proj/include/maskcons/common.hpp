#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#if defined(__GNUC__) || defined(__clang__)
#define MASKCONS_RESTRICT __restrict__
#else
#define MASKCONS_RESTRICT
#endif

namespace maskcons {

#ifdef MASKCONS_REAL32
using real = float;
inline constexpr const char* kRealTag = "f32";
#else
using real = double;
inline constexpr const char* kRealTag = "f64";
#endif

// Contract violation (bad shapes, bad arguments).
inline void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

// Runtime failure (divergence, I/O trouble).
inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::runtime_error(msg);
}

}  // namespace maskcons
