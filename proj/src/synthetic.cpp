#include "hovertrans/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "hovertrans/error.hpp"

namespace hovertrans {

namespace {

std::uint8_t to_u8(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

}  // namespace

void SyntheticConfig::validate() const {
  if (count < 2) throw ConfigError("count: must be >= 2");
  if (side < 32) throw ConfigError("side: must be >= 32");
  if (layers < 2 || layers > side / 6) throw ConfigError("layers: must lie in [2, side / 6]");
  if (!(malignant_fraction > 0.0 && malignant_fraction < 1.0)) throw ConfigError("malignant_fraction: must lie in (0, 1)");
  if (speckle_sigma < 0.0) throw ConfigError("speckle_sigma: must be >= 0");
}

Image layered_phantom(bool malignant, std::size_t side, std::size_t layers, double speckle_sigma, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double s = static_cast<double>(side);
  const double band = s / static_cast<double>(layers);

  std::vector<double> level(layers);
  for (std::size_t k = 0; k < layers; ++k) level[k] = (k % 2 == 0 ? 95.0 : 185.0) + 30.0 * (unit(rng) - 0.5);
  const double amplitude = 0.15 * band * unit(rng);
  const double period = s * (0.5 + unit(rng));
  const double phase = 2.0 * std::numbers::pi * unit(rng);
  auto boundary = [&](std::size_t k, double x) {
    return band * static_cast<double>(k) + amplitude * std::sin(2.0 * std::numbers::pi * x / period + phase);
  };

  // Lesion geometry in pixel units.
  double cx = 0.0, cy = 0.0, rx = 0.0, ry = 0.0;
  std::vector<double> lobes(3);
  for (auto& l : lobes) l = unit(rng);
  if (malignant) {
    const auto k = 1 + static_cast<std::size_t>(unit(rng) * static_cast<double>(layers - 1));
    rx = band * (0.45 + 0.25 * unit(rng));
    ry = band * (0.75 + 0.3 * unit(rng));
    cx = rx + 1.0 + (s - 2.0 * rx - 2.0) * unit(rng);
    cy = boundary(std::min(k, layers - 1), cx);
  } else {
    const auto k = static_cast<std::size_t>(unit(rng) * static_cast<double>(layers));
    ry = band * (0.18 + 0.1 * unit(rng));
    rx = band * (0.8 + 0.5 * unit(rng));
    rx = std::min(rx, s / 2.0 - 2.0);
    cx = rx + 1.0 + (s - 2.0 * rx - 2.0) * unit(rng);
    cy = band * (static_cast<double>(std::min(k, layers - 1)) + 0.5);
  }
  const double lesion_level = 30.0 + 15.0 * unit(rng);

  std::normal_distribution<double> speckle(0.0, speckle_sigma > 0.0 ? speckle_sigma : 1.0);
  Image img(side, side, 1);
  for (std::size_t y = 0; y < side; ++y) {
    for (std::size_t x = 0; x < side; ++x) {
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      std::size_t layer = 0;
      while (layer + 1 < layers && py >= boundary(layer + 1, px)) ++layer;
      double v = level[layer];
      const double dx = (px - cx) / rx, dy = (py - cy) / ry;
      double radius = 1.0;
      if (malignant) {
        // Spiculated outline: the radius wobbles with the angle.
        const double theta = std::atan2(dy, dx);
        radius = 1.0 + 0.25 * std::sin(3.0 * theta + 6.0 * lobes[0]) + 0.15 * std::sin(5.0 * theta + 6.0 * lobes[1]);
      }
      if (dx * dx + dy * dy <= radius * radius) v = lesion_level;
      if (speckle_sigma > 0.0) v += speckle(rng);
      img.at(y, x) = to_u8(v);
    }
  }
  return img;
}

std::vector<ImageRecord> make_layered_dataset(const SyntheticConfig& config) {
  config.validate();
  Rng rng(derive_seed(config.seed, "layered-dataset"));
  const auto malignant = static_cast<std::size_t>(
      std::lround(static_cast<double>(config.count) * config.malignant_fraction));
  std::vector<int> labels(config.count, kBenign);
  std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(std::clamp<std::size_t>(malignant, 1, config.count - 1)),
            kMalignant);
  std::shuffle(labels.begin(), labels.end(), rng);

  static const BiRads low[] = {BiRads::b2, BiRads::b3};
  static const BiRads high[] = {BiRads::b4a, BiRads::b4b, BiRads::b4c, BiRads::b5};
  std::vector<ImageRecord> out;
  out.reserve(config.count);
  for (std::size_t i = 0; i < config.count; ++i) {
    Rng image_rng(derive_seed(config.seed, static_cast<std::uint64_t>(i)));
    ImageRecord r;
    char name[32];
    std::snprintf(name, sizeof(name), "%05zu.png", i);
    r.image_id = config.id_prefix + "/" + name;
    r.label = labels[i];
    r.image = layered_phantom(r.label == kMalignant, config.side, config.layers, config.speckle_sigma, image_rng);
    r.birads = r.label == kMalignant ? high[image_rng() % 4] : low[image_rng() % 2];
    out.push_back(std::move(r));
  }
  return out;
}

void write_dataset(const std::filesystem::path& dir, std::span<const ImageRecord> records) {
  for (const auto& r : records) {
    const auto path = dir / r.image_id;
    std::filesystem::create_directories(path.parent_path());
    write_png(path, r.image);
  }
  write_manifest(dir / "manifest.csv", records);
}

}  // namespace hovertrans
