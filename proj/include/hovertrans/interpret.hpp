#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "hovertrans/image.hpp"
#include "hovertrans/model.hpp"

namespace hovertrans {

// Row-major 2-D map.
struct Heatmap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;
  bool constant = false;  // the raw map was flat; values are all 0.5

  double at(std::size_t r, std::size_t c) const { return values[r * width + c]; }
};

enum class HeatmapMethod {
  activation,  // channel mean of |stage-4 Conv block output|
  gradcam,     // gradient-weighted class activation on the same layer
};

std::string method_name(HeatmapMethod m);
HeatmapMethod parse_method(const std::string& name);  // ConfigError on unknown names

// Min-max scale to [0, 1]. A constant map becomes all 0.5 with `constant` set.
Heatmap normalize(Heatmap map);

// Bilinear resample with pixel-center alignment and edge clamping.
Heatmap upsample_bilinear(const Heatmap& map, std::size_t height, std::size_t width);

// The raw (un-normalized) evidence map at stage-4 resolution.
Heatmap raw_heatmap(HoverTransNet& model, const Image& image, HeatmapMethod method = HeatmapMethod::activation);

// Raw map upsampled to the input side, then normalized. image must already be
// input_side x input_side (ValidationError otherwise).
Heatmap heatmap(HoverTransNet& model, const Image& image, HeatmapMethod method = HeatmapMethod::activation);

// Fixed 256-entry RGB lookup table used for rendering.
const std::array<std::array<std::uint8_t, 3>, 256>& colormap_lut();

// Heatmap rendered through the lookup table, entry round(v * 255).
Image colorize(const Heatmap& map);

// out = (1 - alpha) * gray(image) + alpha * colorize(map), rounded, RGB.
// ValidationError on a size mismatch or alpha outside [0, 1].
Image overlay(const Image& image, const Heatmap& map, double alpha);

nlohmann::json heatmap_sidecar(const std::string& image_id, const std::string& checkpoint_id, HeatmapMethod method,
                               double alpha);

}  // namespace hovertrans
