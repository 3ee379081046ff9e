#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

namespace hlip {

// Deterministic RNG wrapper. std::mt19937_64 has a standard-mandated output
// sequence, but the std distributions do not, so all sampling is done here.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // Uniform in [0,1), 53-bit resolution.
  double uniform() {
    return static_cast<double>(gen_() >> 11) * (1.0 / 9007199254740992.0);
  }

  // Uniform integer in [0, n). Modulo bias is < 2^-53 for any n we use.
  int64_t uniform_int(int64_t n) {
    if (n <= 0) throw std::invalid_argument("Rng::uniform_int: n must be positive");
    return static_cast<int64_t>(uniform() * static_cast<double>(n));
  }

  // Standard normal via Box-Muller. One fresh pair per call; the sine branch
  // is discarded so the stream stays a pure function of call count.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Truncated normal: re-draw outside [-2σ, 2σ].
  double trunc_normal(double stddev) {
    double v = normal() * stddev;
    while (std::abs(v) > 2.0 * stddev) v = normal() * stddev;
    return v;
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
      int64_t j = uniform_int(i + 1);
      std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(j)]);
    }
  }

  // k distinct values from [0, n), order randomized (partial Fisher-Yates).
  std::vector<int64_t> sample_without_replacement(int64_t n, int64_t k) {
    if (k > n) throw std::invalid_argument("sample_without_replacement: k > n");
    std::vector<int64_t> pool(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) pool[static_cast<size_t>(i)] = i;
    for (int64_t i = 0; i < k; ++i) {
      int64_t j = i + uniform_int(n - i);
      std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
    }
    pool.resize(static_cast<size_t>(k));
    return pool;
  }

  // Stable derived seed for per-item determinism (splitmix64 finalizer).
  static uint64_t derive(uint64_t master, uint64_t index) {
    uint64_t z = master + 0x9e3779b97f4a7c15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace hlip
