#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace gdnsq {

// Seedable random stream. The engine state can be exported as a flat list of
// 64-bit words so that checkpoints restore the exact position in the stream.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  // Independent stream for (seed, stream) pairs; used for per-epoch shuffles
  // and per-trial oracle seeds.
  static Rng derived(std::uint64_t seed, std::uint64_t stream);

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Fair coin from the top bit of one draw.
  bool coin() { return (engine_() >> 63) != 0; }

  double normal(double mean = 0.0, double stddev = 1.0) {
    std::normal_distribution<double> dist(mean, stddev);
    return dist(engine_);
  }

  std::size_t index(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }

  std::mt19937_64& engine() { return engine_; }

  std::vector<std::uint64_t> state() const;
  void set_state(std::span<const std::uint64_t> words);

 private:
  std::mt19937_64 engine_;
};

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace gdnsq
