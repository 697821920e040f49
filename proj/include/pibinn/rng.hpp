#pragma once

#include <cstdint>

namespace pibinn::rng {

/// Counter-based generator: every draw is a pure function of
/// (seed, stream, index), so generation order and worker count never change
/// the values.
struct Key {
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;
};

std::uint64_t mix64(std::uint64_t z) noexcept;

/// Raw 64-bit draw.
std::uint64_t bits(Key key, std::uint64_t index) noexcept;

/// Uniform in the open interval (0, 1).
double uniform(Key key, std::uint64_t index) noexcept;

/// Standard normal via Box-Muller on draws 2*index and 2*index+1.
double normal(Key key, std::uint64_t index) noexcept;

/// Derive a child key; used to give every sample or block its own stream.
Key child(Key key, std::uint64_t sub) noexcept;

}  // namespace pibinn::rng
