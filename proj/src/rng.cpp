#include "abc/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace abc {

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

uint64_t mix_seed(uint64_t seed, uint64_t salt) {
  return splitmix64(splitmix64(seed) ^ salt);
}

namespace {
uint64_t fnv1a(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}
}  // namespace

uint64_t mix_seed(uint64_t seed, std::string_view tag) { return mix_seed(seed, fnv1a(tag)); }

uint64_t mix_seed(uint64_t seed, std::string_view tag, uint64_t salt) {
  return mix_seed(mix_seed(seed, fnv1a(tag)), salt);
}

double Rng::normal(double mean, double stddev) {
  // u1 in (0,1] so the log is finite.
  double u1 = 1.0 - uniform();
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  return mean + stddev * r * std::cos(2.0 * std::numbers::pi * u2);
}

uint64_t Rng::bounded(uint64_t n) {
  if (n == 0) throw std::invalid_argument("Rng::bounded: n must be positive");
  uint64_t threshold = (0 - n) % n;  // 2^64 mod n
  for (;;) {
    uint64_t r = next_u64();
    if (r >= threshold) return r % n;
  }
}

std::vector<std::size_t> Rng::sample_without_replacement(std::size_t n, std::size_t k) {
  if (k > n)
    throw std::invalid_argument("sample_without_replacement: k=" + std::to_string(k) +
                                " exceeds n=" + std::to_string(n));
  // Partial Fisher-Yates over an index pool.
  std::vector<std::size_t> pool(n);
  for (std::size_t i = 0; i < n; ++i) pool[i] = i;
  std::vector<std::size_t> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) {
    std::size_t j = i + static_cast<std::size_t>(bounded(n - i));
    std::swap(pool[i], pool[j]);
    out.push_back(pool[i]);
  }
  return out;
}

}  // namespace abc
