#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace advcube {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seeded random stream. Sub-streams are derived from (key, stream id) only, so
/// a sample drawn for item k at step t is the same no matter which thread or in
/// which order it is requested.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : key_(splitmix64(seed)), engine_(key_) {}

  Rng fork(std::uint64_t stream) const { return Rng(key_, stream, 0); }
  Rng fork(std::initializer_list<std::uint64_t> path) const {
    Rng r = *this;
    for (auto s : path) r = r.fork(s);
    return r;
  }

  std::uint64_t key() const { return key_; }
  std::uint64_t next_u64() { return engine_(); }

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  /// Inclusive on both ends.
  int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  bool bernoulli(double p) { return uniform() < p; }

  std::mt19937_64& engine() { return engine_; }

 private:
  Rng(std::uint64_t parent, std::uint64_t stream, int)
      : key_(splitmix64(parent ^ splitmix64(stream + 0x632be59bd9b4e019ULL))), engine_(key_) {}

  std::uint64_t key_;
  std::mt19937_64 engine_;
};

}  // namespace advcube
