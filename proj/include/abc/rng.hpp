#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace abc {

uint64_t splitmix64(uint64_t x);

// Derive an independent stream seed. Streams are labelled so the draw order of
// one component never shifts another component's randomness.
uint64_t mix_seed(uint64_t seed, uint64_t salt);
uint64_t mix_seed(uint64_t seed, std::string_view tag);
uint64_t mix_seed(uint64_t seed, std::string_view tag, uint64_t salt);

// mt19937_64 has a standard-pinned output sequence; the distributions here are
// hand-rolled so results do not depend on the C++ library implementation.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Box-Muller; every call consumes exactly two uniforms.
  double normal(double mean = 0.0, double stddev = 1.0);

  // [0, n) unbiased via rejection.
  uint64_t bounded(uint64_t n);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(bounded(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // k distinct indices from [0, n), in draw order.
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k);

 private:
  std::mt19937_64 eng_;
};

}  // namespace abc
