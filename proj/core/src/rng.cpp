#include "gdnsq/rng.hpp"

#include <sstream>

#include "gdnsq/errors.hpp"

namespace gdnsq {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer over the combined words
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

Rng Rng::derived(std::uint64_t seed, std::uint64_t stream) { return Rng(mix_seed(seed, stream)); }

std::vector<std::uint64_t> Rng::state() const {
  std::ostringstream os;
  os << engine_;
  std::istringstream is(os.str());
  std::vector<std::uint64_t> words;
  std::uint64_t w = 0;
  while (is >> w) words.push_back(w);
  return words;
}

void Rng::set_state(std::span<const std::uint64_t> words) {
  std::ostringstream os;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) os << ' ';
    os << words[i];
  }
  std::istringstream is(os.str());
  std::mt19937_64 restored;
  is >> restored;
  if (is.fail()) throw FormatError("invalid RNG state", 0);
  engine_ = restored;
}

}  // namespace gdnsq
