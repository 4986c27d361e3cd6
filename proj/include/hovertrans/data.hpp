#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hovertrans/image.hpp"
#include "hovertrans/rng.hpp"
#include "hovertrans/tensor.hpp"

namespace hovertrans {

inline constexpr int kBenign = 0;
inline constexpr int kMalignant = 1;

enum class BiRads { b2, b3, b4a, b4b, b4c, b5 };

std::string birads_name(BiRads b);          // "2", "3", "4A", ...
BiRads parse_birads(const std::string& s);  // case-insensitive; ValidationError otherwise
// "2-3" for categories 2 and 3, "4-5" for 4A..5.
std::string birads_bucket(BiRads b);

// Maps "benign"/"malignant" in any letter case to 0/1; ValidationError otherwise.
int parse_label(const std::string& s);

struct ImageRecord {
  std::string image_id;  // the manifest's image_path, as written
  Image image;
  int label = kBenign;
  std::optional<std::string> patient_id;
  std::optional<BiRads> birads;
  std::optional<std::string> center;
};

// Reads a CSV with header image_path,label[,patient_id][,birads][,center];
// images are resolved against image_root. Row order is preserved.
std::vector<ImageRecord> load_manifest(const std::filesystem::path& manifest_path,
                                       const std::filesystem::path& image_root);

// Writes records back out in the same schema (image_path = image_id). Images
// are not written.
void write_manifest(const std::filesystem::path& path, std::span<const ImageRecord> records);

struct Rect {
  std::size_t top = 0;
  std::size_t left = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  bool operator==(const Rect&) const = default;
};

struct ForegroundResult {
  Image image;
  Rect box;                 // crop inside the input; the full frame on fallback
  double confidence = 0.0;  // boundary coverage of the chosen rectangle
  bool fallback = true;
};

inline constexpr double kForegroundMinConfidence = 0.8;

// Finds the largest axis-aligned rectangle whose boundary is bright and
// returns its contents. Thin bright frames are cropped to their interior;
// solid bright regions are cropped to their bounding box. When no candidate
// reaches kForegroundMinConfidence the input is returned with fallback set.
ForegroundResult extract_foreground(const Image& image);

// Bilinear resample to side x side (pixel-center aligned). side >= 32.
Image resize_image(const Image& image, std::size_t side);

struct FoldSplit {
  std::size_t k = 0;
  std::map<std::string, std::size_t> assignments;  // image_id -> fold
};

// Stratified k-fold assignment. Images sharing a patient_id always share a
// fold; without patient ids every image is its own group. Deterministic in
// (records, k, seed).
FoldSplit make_folds(std::span<const ImageRecord> records, std::size_t k, std::uint64_t seed);

// CSV image_id,fold in the order of `order` (or map order when empty).
void write_folds(const std::filesystem::path& path, const FoldSplit& split,
                 std::span<const std::string> order = {});
FoldSplit read_folds(const std::filesystem::path& path);

// There is intentionally no vertical flip: tissue layers have a fixed order.
struct AugmentConfig {
  double p_blur = 0.2;
  double p_noise = 0.2;
  double p_hflip = 0.5;
  double p_brightness_contrast = 0.5;
  double noise_sigma = 5.0;  // intensity levels
  double blur_sigma_min = 0.3;
  double blur_sigma_max = 1.5;
  double brightness_delta = 0.2;  // fraction of full scale
  double contrast_delta = 0.2;

  static AugmentConfig none();
  void validate() const;
};

Image flip_horizontal(const Image& image);
Image gaussian_blur(const Image& image, double sigma);

// Applies blur, noise, horizontal flip and brightness/contrast, each with its
// own probability. Always consumes four uniform draws first.
Image augment(const Image& image, const AugmentConfig& config, Rng& rng);

// Resizes when needed, replicates gray to three channels, scales to [0,1]
// and standardizes with mean 0.5 / std 0.5. Output (B, side, side, 3).
Tensor to_model_input(std::span<const Image> images, std::size_t side);

}  // namespace hovertrans
