#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace fedcrfd {

std::uint64_t splitmix64(std::uint64_t x);

/// Stable 64-bit FNV-1a hash; used to turn names into seed tags.
std::uint64_t fnv1a(std::string_view text);

/// Derives an independent stream seed from a base seed and a list of integer tags.
std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> tags);
std::uint64_t derive_seed(std::uint64_t base, std::string_view tag);

/// Seeded generator with distribution code we own, so sequences do not depend on the
/// standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  /// Standard normal via Box-Muller (cached second value).
  double normal();

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace fedcrfd
