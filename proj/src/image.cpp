#include "hovertrans/image.hpp"

#include <png.h>

#include <cmath>
#include <cstring>

#include "hovertrans/error.hpp"

namespace hovertrans {

Image read_png(const std::filesystem::path& path) {
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw IngestionError("cannot decode PNG " + path.string() + ": " + png.message);
  }
  const bool color = (png.format & PNG_FORMAT_FLAG_COLOR) != 0;
  png.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  Image img(png.height, png.width, color ? 3 : 1);
  if (!png_image_finish_read(&png, nullptr, img.pixels.data(), 0, nullptr)) {
    const std::string msg = png.message;
    png_image_free(&png);
    throw IngestionError("cannot decode PNG " + path.string() + ": " + msg);
  }
  return img;
}

void write_png(const std::filesystem::path& path, const Image& image) {
  if (image.channels != 1 && image.channels != 3) throw ValidationError("PNG output needs 1 or 3 channels");
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = image.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&png, path.c_str(), 0, image.pixels.data(), 0, nullptr)) {
    throw IngestionError("cannot write PNG " + path.string() + ": " + png.message);
  }
}

Image to_grayscale(const Image& image) {
  if (image.channels == 1) return image;
  Image out(image.height, image.width, 1);
  for (std::size_t i = 0; i < image.height * image.width; ++i) {
    const std::uint8_t* p = &image.pixels[i * image.channels];
    out.pixels[i] = static_cast<std::uint8_t>(std::lround(0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]));
  }
  return out;
}

Image crop(const Image& image, std::size_t top, std::size_t left, std::size_t height, std::size_t width) {
  if (top + height > image.height || left + width > image.width) throw ShapeError("crop outside the image");
  Image out(height, width, image.channels);
  const std::size_t row_bytes = width * image.channels;
  for (std::size_t r = 0; r < height; ++r) {
    std::memcpy(&out.pixels[r * row_bytes], &image.pixels[((top + r) * image.width + left) * image.channels],
                row_bytes);
  }
  return out;
}

}  // namespace hovertrans
