#pragma once

#include <algorithm>
#include <cstdint>
#include <initializer_list>

namespace cvvnet {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Independent stream seed for a (base, tag...) tuple.
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> tags) {
  std::uint64_t h = splitmix64(base);
  for (auto t : tags) h = splitmix64(h ^ t);
  return h;
}

/// Uniform double in [0, 1) with 53 random bits, identical on every platform.
template <typename Rng>
double unit_real(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Uniform integer in [0, n) by rejection, identical on every platform.
template <typename Rng>
std::uint64_t uniform_below(Rng& rng, std::uint64_t n) {
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t v;
  do v = rng();
  while (v >= limit);
  return v % n;
}

/// Fisher-Yates with uniform_below.
template <typename It, typename Rng>
void shuffle(It first, It last, Rng& rng) {
  for (auto n = last - first; n > 1; --n)
    std::iter_swap(first + (n - 1), first + static_cast<decltype(n)>(uniform_below(rng, static_cast<std::uint64_t>(n))));
}

}  // namespace cvvnet
