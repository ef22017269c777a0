// Deterministic random streams. std::mt19937_64 is fully specified by the
// standard; distributions are hand-rolled so byte-identical sequences hold
// across standard libraries.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <stdexcept>
#include <vector>

namespace vtc {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  // Independent substream; stable under unrelated draws from this stream.
  Rng derive(uint64_t salt) const {
    return Rng(splitmix64(seed_mix_ ^ splitmix64(salt)));
  }

  // [0, 1)
  double uniform() { return (static_cast<double>(gen_() >> 11)) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // (0, 1); never returns 0, safe for logs.
  double uniform_open() {
    return (static_cast<double>(gen_() >> 11) + 0.5) * 0x1.0p-53;
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    const double u1 = uniform_open();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(2.0 * std::numbers::pi * u2);
  }

  // Uniform integer in [lo, hi] inclusive.
  int uniform_int(int lo, int hi) {
    if (hi < lo) throw std::invalid_argument("rng: empty integer range");
    const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(gen_() % span);
  }

  // k distinct values from {0, ..., n-1}, ascending.
  std::vector<int> sample_distinct(int n, int k) {
    if (k > n) throw std::invalid_argument("rng: sample_distinct k > n");
    std::vector<int> pool(n);
    for (int i = 0; i < n; ++i) pool[i] = i;
    for (int i = 0; i < k; ++i) std::swap(pool[i], pool[uniform_int(i, n - 1)]);
    pool.resize(k);
    std::sort(pool.begin(), pool.end());
    return pool;
  }

  template <typename T>
  void shuffle(std::vector<T>& xs) {
    for (int i = static_cast<int>(xs.size()) - 1; i > 0; --i)
      std::swap(xs[i], xs[uniform_int(0, i)]);
  }

  uint64_t raw() { return gen_(); }

 private:
  std::mt19937_64 gen_;
  uint64_t seed_mix_ = gen_();  // one draw reserved for derive(); keeps substreams decoupled
};

}  // namespace vtc
