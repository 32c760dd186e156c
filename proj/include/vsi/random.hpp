#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace vsi {

// All randomness in the toolkit flows from a root seed through named,
// indexed substreams. Two calls with the same (root, name, index) produce
// identical engines regardless of call order or threading.

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t derive_seed(std::uint64_t root, std::string_view name,
                                 std::uint64_t index = 0) {
  std::uint64_t s = splitmix64(root ^ fnv1a(name));
  return splitmix64(s ^ splitmix64(index + 0x632be59bd9b4e019ULL));
}

using Engine = std::mt19937_64;

inline Engine substream(std::uint64_t root, std::string_view name,
                        std::uint64_t index = 0) {
  return Engine(derive_seed(root, name, index));
}

// Uniform on the open interval (0, 1); never returns 0, so -log(u) is finite.
inline double uniform_open(Engine& rng) {
  constexpr double scale = 1.0 / 9007199254740992.0;  // 2^-53
  return (static_cast<double>(rng() >> 11) + 0.5) * scale;
}

}  // namespace vsi
