#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace xmodseg {

/// Mixes a base seed with a stage name and index into an independent
/// sub-seed. Every stochastic stage of the pipeline draws its own stream
/// from (run_seed, stage_tag, index) so runs are reproducible end to end.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag,
                                 std::uint64_t index = 0) {
  // FNV-1a over the tag, then splitmix64 finalization.
  std::uint64_t h = 14695981039346656037ull;
  for (char c : tag) {
    h ^= static_cast<std::uint8_t>(c);
    h *= 1099511628211ull;
  }
  std::uint64_t z = base + 0x9e3779b97f4a7c15ull * (h ^ (index + 1));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

/// Deterministic random stream. Uses std::mt19937_64 (whose output sequence
/// is fixed by the standard) with hand-rolled uniform/normal transforms, so
/// the same seed yields the same draws on every platform and stdlib.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  /// Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  double uniform(double a, double b) { return a + (b - a) * uniform(); }

  /// Standard normal via Box-Muller (spare value cached).
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mu, double sigma) { return mu + sigma * normal(); }

  /// Uniform integer in [0, n). Unbiased via rejection.
  std::uint64_t integer(std::uint64_t n) {
    if (n == 0) return 0;
    std::uint64_t limit = ~0ull - (~0ull % n);
    std::uint64_t x;
    do {
      x = gen_();
    } while (x >= limit);
    return x % n;
  }

  /// Uniform integer in [a, b] inclusive.
  int uniform_int(int a, int b) {
    return a + static_cast<int>(integer(static_cast<std::uint64_t>(b - a + 1)));
  }

  bool bernoulli(double p) { return uniform() < p; }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(integer(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace xmodseg
