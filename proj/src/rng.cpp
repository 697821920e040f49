#include "pibinn/rng.hpp"

#include <cmath>
#include <numbers>

namespace pibinn::rng {

std::uint64_t mix64(std::uint64_t z) noexcept {
  // splitmix64 finalizer
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t bits(Key key, std::uint64_t index) noexcept {
  return mix64(mix64(mix64(key.seed) ^ key.stream) ^ index);
}

double uniform(Key key, std::uint64_t index) noexcept {
  // 53 random mantissa bits, shifted by half a unit so 0 is never produced.
  return (static_cast<double>(bits(key, index) >> 11) + 0.5) * 0x1.0p-53;
}

double normal(Key key, std::uint64_t index) noexcept {
  const double u1 = uniform(key, 2 * index);
  const double u2 = uniform(key, 2 * index + 1);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

Key child(Key key, std::uint64_t sub) noexcept {
  return Key{bits(key, sub), key.stream};
}

}  // namespace pibinn::rng
