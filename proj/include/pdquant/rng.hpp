#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace pdq {

/// Deterministic random stream. Distribution sampling is implemented by
/// hand (not via std:: distributions) so that a fixed seed produces the
/// same values on every build.
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed), eng_(mix(seed)) {}

  /// Independent child stream; distinct stream ids give decorrelated
  /// sequences for the same parent seed.
  Rng fork(uint64_t stream_id) const {
    return Rng(mix(seed_ ^ (0x9e3779b97f4a7c15ull * (stream_id + 1))));
  }

  uint64_t next_u64() { return eng_(); }

  /// Uniform in [0, 1).
  float uniform() {
    return static_cast<float>((next_u64() >> 11) * (1.0 / 9007199254740992.0));
  }

  float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller.
  float normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 <= 1e-12) u1 = (next_u64() >> 11) * (1.0 / 9007199254740992.0);
    double u2 = (next_u64() >> 11) * (1.0 / 9007199254740992.0);
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = static_cast<float>(r * std::sin(a));
    have_spare_ = true;
    return static_cast<float>(r * std::cos(a));
  }

  /// Uniform integer in [0, n).
  int64_t below(int64_t n) { return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n)); }

  /// First `count` entries of a random permutation of [0, population).
  std::vector<int> sample_indices(int population, int count) {
    std::vector<int> idx(static_cast<size_t>(population));
    for (int i = 0; i < population; ++i) idx[static_cast<size_t>(i)] = i;
    int take = count < population ? count : population;
    for (int i = 0; i < take; ++i) {
      int j = i + static_cast<int>(below(population - i));
      std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
    }
    idx.resize(static_cast<size_t>(take));
    return idx;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(static_cast<int64_t>(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  static uint64_t mix(uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  uint64_t seed_;
  std::mt19937_64 eng_;
  bool have_spare_ = false;
  float spare_ = 0.0f;
};

}  // namespace pdq
