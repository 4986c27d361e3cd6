#include "hovertrans/rng.hpp"

#include <cmath>

namespace hovertrans {

std::uint64_t mix_seed(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t salt) { return mix_seed(mix_seed(base) ^ salt); }

std::uint64_t derive_seed(std::uint64_t base, std::string_view salt) {
  // FNV-1a over the salt bytes.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : salt) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return derive_seed(base, h);
}

double truncated_normal(Rng& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, 1.0);
  for (;;) {
    const double v = dist(rng);
    if (std::abs(v) <= 2.0) return v * stddev;
  }
}

Tensor truncated_normal_tensor(Tensor::Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = truncated_normal(rng, stddev);
  return t;
}

Tensor normal_tensor(Tensor::Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

}  // namespace hovertrans
