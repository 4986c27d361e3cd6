#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace hovertrans {

// 8-bit raster, row-major, channels interleaved (1 = gray, 3 = RGB).
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, std::size_t c, std::uint8_t fill = 0)
      : height(h), width(w), channels(c), pixels(h * w * c, fill) {}

  std::uint8_t& at(std::size_t row, std::size_t col, std::size_t ch = 0) {
    return pixels[(row * width + col) * channels + ch];
  }
  std::uint8_t at(std::size_t row, std::size_t col, std::size_t ch = 0) const {
    return pixels[(row * width + col) * channels + ch];
  }

  bool operator==(const Image&) const = default;
};

// Decodes gray, gray+alpha, RGB or RGBA PNGs into 1 or 3 channels
// (alpha dropped). IngestionError on failure.
Image read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& image);

// ITU-R BT.601 luma, rounded. Gray images are returned as is.
Image to_grayscale(const Image& image);

Image crop(const Image& image, std::size_t top, std::size_t left, std::size_t height, std::size_t width);

}  // namespace hovertrans
