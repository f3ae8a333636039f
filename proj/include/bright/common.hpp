// Shared plumbing: deterministic RNG, seed derivation, hashing, errors,
// and a deterministic parallel-for used by the slide/tile level stages.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace bright {

// FNV-1a, used for seed derivation and config/checkpoint hashing.
inline uint64_t fnv1a64(std::string_view s, uint64_t h = 0xcbf29ce484222325ull) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a64_bytes(const void* data, size_t n,
                              uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

// splitmix64, mixes derived seeds so nearby inputs land far apart.
inline uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Deterministic RNG. Uniform and normal draws are generated from raw
// mt19937_64 output (not std::*_distribution) so sequences are identical
// across standard library implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed), gen_(mix64(seed)) {}

  uint64_t seed() const { return seed_; }
  uint64_t next_u64() { return gen_(); }

  // [0, 1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // inclusive on both ends
  int64_t uniform_int(int64_t lo, int64_t hi) {
    const uint64_t span = uint64_t(hi - lo) + 1;
    return lo + int64_t(next_u64() % span);
  }

  // [0, n)
  int64_t uniform_int(uint64_t n) { return int64_t(next_u64() % n); }

  // Box-Muller; caches the second variate.
  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    const double u1 = double((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    const double u2 = double(next_u64() >> 11) * 0x1.0p-53;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double t = 6.283185307179586476925286766559 * u2;
    cached_ = r * std::sin(t);
    has_cached_ = true;
    return r * std::cos(t);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Derive an independent stream from the original seed and a label.
  // Independent of how many draws were made from this instance.
  Rng derive(std::string_view label) const {
    return Rng(fnv1a64(label, mix64(seed_)));
  }
  Rng derive(std::string_view label, uint64_t index) const {
    return Rng(mix64(fnv1a64(label, mix64(seed_)) + index));
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = size_t(next_u64() % i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  uint64_t seed_;
  std::mt19937_64 gen_;
  bool has_cached_ = false;
  double cached_ = 0.0;
};

// Error codes for the binary container formats (BRTE bags, BRCK checkpoints).
enum class IoCode { bad_magic, version_mismatch, truncated_payload, io_fail };

class IoError : public std::runtime_error {
 public:
  IoError(IoCode code, const std::string& msg)
      : std::runtime_error(msg), code_(code) {}
  IoCode code() const { return code_; }

 private:
  IoCode code_;
};

// Runs fn(i) for i in [0, n). Results must be written by index; with that
// discipline the outcome is independent of thread count.
inline void parallel_for(size_t n, size_t n_threads,
                         const std::function<void(size_t)>& fn) {
  if (n == 0) return;
  if (n_threads <= 1 || n == 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  n_threads = std::min(n_threads, n);
  std::vector<std::thread> pool;
  pool.reserve(n_threads);
  for (size_t t = 0; t < n_threads; ++t) {
    pool.emplace_back([&, t] {
      for (size_t i = t; i < n; i += n_threads) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

struct ThreadConfig {
  size_t n_threads = 1;
  static ThreadConfig hardware() {
    ThreadConfig tc;
    tc.n_threads = std::max(1u, std::thread::hardware_concurrency());
    return tc;
  }
};

}  // namespace bright
