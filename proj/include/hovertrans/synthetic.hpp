#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "hovertrans/data.hpp"

namespace hovertrans {

// Layered phantom images: horizontal tissue bands with speckle. Benign cases
// carry a smooth flat ellipse inside one band; malignant cases carry an
// irregular lesion that crosses a band boundary and breaks the layering.
struct SyntheticConfig {
  std::size_t count = 64;
  std::size_t side = 32;
  std::size_t layers = 4;
  double malignant_fraction = 0.5;
  double speckle_sigma = 10.0;
  std::uint64_t seed = 0;
  std::string id_prefix = "synthetic";

  void validate() const;  // ConfigError naming the field
};

Image layered_phantom(bool malignant, std::size_t side, std::size_t layers, double speckle_sigma, Rng& rng);

// Deterministic in the config. Labels alternate in a seeded order so that the
// malignant count is round(count * malignant_fraction). Ids are
// "<prefix>/NNNNN.png"; BI-RADS is drawn from 2-3 for benign and 4A-5 for
// malignant cases.
std::vector<ImageRecord> make_layered_dataset(const SyntheticConfig& config);

// Writes <dir>/<image_id> PNGs and <dir>/manifest.csv.
void write_dataset(const std::filesystem::path& dir, std::span<const ImageRecord> records);

}  // namespace hovertrans
