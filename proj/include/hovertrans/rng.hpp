#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "hovertrans/tensor.hpp"

namespace hovertrans {

using Rng = std::mt19937_64;

// splitmix64 finalizer; used to derive independent stream seeds.
std::uint64_t mix_seed(std::uint64_t value);
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t salt);
std::uint64_t derive_seed(std::uint64_t base, std::string_view salt);

// Normal(0, stddev) truncated to +-2 stddev by rejection.
double truncated_normal(Rng& rng, double stddev);
Tensor truncated_normal_tensor(Tensor::Shape shape, double stddev, Rng& rng);
Tensor normal_tensor(Tensor::Shape shape, double stddev, Rng& rng);

}  // namespace hovertrans
