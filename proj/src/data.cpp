#include "hovertrans/data.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <numeric>
#include <set>

#include "hovertrans/csv.hpp"
#include "hovertrans/error.hpp"

namespace hovertrans {

namespace {

std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

std::uint8_t clamp_u8(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

}  // namespace

std::string birads_name(BiRads b) {
  switch (b) {
    case BiRads::b2: return "2";
    case BiRads::b3: return "3";
    case BiRads::b4a: return "4A";
    case BiRads::b4b: return "4B";
    case BiRads::b4c: return "4C";
    case BiRads::b5: return "5";
  }
  return "?";
}

BiRads parse_birads(const std::string& s) {
  const std::string v = lower(trim(s));
  if (v == "2") return BiRads::b2;
  if (v == "3") return BiRads::b3;
  if (v == "4a") return BiRads::b4a;
  if (v == "4b") return BiRads::b4b;
  if (v == "4c") return BiRads::b4c;
  if (v == "5") return BiRads::b5;
  throw ValidationError("unknown BI-RADS category '" + s + "'");
}

std::string birads_bucket(BiRads b) { return b == BiRads::b2 || b == BiRads::b3 ? "2-3" : "4-5"; }

int parse_label(const std::string& s) {
  const std::string v = lower(trim(s));
  if (v == "benign") return kBenign;
  if (v == "malignant") return kMalignant;
  throw ValidationError("unknown label '" + s + "' (expected benign or malignant)");
}

// ---------------------------------------------------------------------------

std::vector<ImageRecord> load_manifest(const std::filesystem::path& manifest_path,
                                       const std::filesystem::path& image_root) {
  const CsvTable table = read_csv(manifest_path);
  if (table.header.size() < 2 || table.header[0] != "image_path" || table.header[1] != "label") {
    throw ValidationError(manifest_path.string() + ": header must start with image_path,label");
  }
  static const std::set<std::string> optional_columns{"patient_id", "birads", "center"};
  for (std::size_t i = 2; i < table.header.size(); ++i) {
    if (!optional_columns.count(table.header[i])) {
      throw ValidationError(manifest_path.string() + ": unknown column '" + table.header[i] + "'");
    }
  }
  const int patient_col = table.column("patient_id");
  const int birads_col = table.column("birads");
  const int center_col = table.column("center");
  auto optional_field = [](const std::vector<std::string>& row, int col) -> std::optional<std::string> {
    if (col < 0) return std::nullopt;
    std::string v = trim(row[static_cast<std::size_t>(col)]);
    if (v.empty()) return std::nullopt;
    return v;
  };

  std::vector<ImageRecord> records;
  std::set<std::string> seen;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    const std::string where = manifest_path.string() + " row " + std::to_string(r + 1);
    ImageRecord rec;
    rec.image_id = trim(row[0]);
    if (rec.image_id.empty()) throw ValidationError(where + ": empty image_path");
    if (!seen.insert(rec.image_id).second) throw ValidationError(where + ": duplicate image_id '" + rec.image_id + "'");
    try {
      rec.label = parse_label(row[1]);
    } catch (const ValidationError& e) {
      throw ValidationError(where + ": " + e.what());
    }
    rec.patient_id = optional_field(row, patient_col);
    rec.center = optional_field(row, center_col);
    if (auto b = optional_field(row, birads_col)) {
      try {
        rec.birads = parse_birads(*b);
      } catch (const ValidationError& e) {
        throw ValidationError(where + ": " + e.what());
      }
    }
    const std::filesystem::path file = image_root / rec.image_id;
    if (!std::filesystem::exists(file)) throw IngestionError(where + ": image file not found: " + file.string());
    try {
      rec.image = read_png(file);
    } catch (const IngestionError& e) {
      throw IngestionError(where + ": " + e.what());
    }
    if (rec.image.height < 32 || rec.image.width < 32) {
      throw ValidationError(where + ": image is smaller than 32x32");
    }
    records.push_back(std::move(rec));
  }
  return records;
}

void write_manifest(const std::filesystem::path& path, std::span<const ImageRecord> records) {
  CsvTable table;
  table.header = {"image_path", "label", "patient_id", "birads", "center"};
  for (const auto& r : records) {
    table.rows.push_back({r.image_id, r.label == kMalignant ? "malignant" : "benign", r.patient_id.value_or(""),
                          r.birads ? birads_name(*r.birads) : "", r.center.value_or("")});
  }
  write_csv(path, table);
}

// ---------------------------------------------------------------------------

ForegroundResult extract_foreground(const Image& image) {
  ForegroundResult result;
  result.image = image;
  result.box = {0, 0, image.height, image.width};
  if (image.height < 3 || image.width < 3) return result;

  const Image gray = to_grayscale(image);
  const auto [lo_it, hi_it] = std::minmax_element(gray.pixels.begin(), gray.pixels.end());
  const int lo = *lo_it, hi = *hi_it;
  if (hi - lo < 32) return result;  // no usable contrast
  const int threshold = (lo + hi) / 2;

  const std::size_t h = gray.height, w = gray.width;
  std::vector<std::uint8_t> mask(h * w);
  for (std::size_t i = 0; i < h * w; ++i) mask[i] = gray.pixels[i] > threshold;

  // 8-connected components of the bright mask.
  std::vector<int> label(h * w, -1);
  struct Component {
    std::size_t top, left, bottom, right, count;
  };
  std::vector<Component> comps;
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < h * w; ++start) {
    if (!mask[start] || label[start] >= 0) continue;
    const int id = static_cast<int>(comps.size());
    Component c{start / w, start % w, start / w, start % w, 0};
    stack.assign(1, start);
    label[start] = id;
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      const std::size_t y = p / w, x = p % w;
      ++c.count;
      c.top = std::min(c.top, y);
      c.bottom = std::max(c.bottom, y);
      c.left = std::min(c.left, x);
      c.right = std::max(c.right, x);
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const long ny = static_cast<long>(y) + dy, nx = static_cast<long>(x) + dx;
          if (ny < 0 || nx < 0 || ny >= static_cast<long>(h) || nx >= static_cast<long>(w)) continue;
          const std::size_t q = static_cast<std::size_t>(ny) * w + static_cast<std::size_t>(nx);
          if (mask[q] && label[q] < 0) {
            label[q] = id;
            stack.push_back(q);
          }
        }
      }
    }
    comps.push_back(c);
  }

  auto row_coverage = [&](std::size_t y, std::size_t x0, std::size_t x1) {
    std::size_t n = 0;
    for (std::size_t x = x0; x <= x1; ++x) n += mask[y * w + x];
    return static_cast<double>(n) / static_cast<double>(x1 - x0 + 1);
  };
  auto col_coverage = [&](std::size_t x, std::size_t y0, std::size_t y1) {
    std::size_t n = 0;
    for (std::size_t y = y0; y <= y1; ++y) n += mask[y * w + x];
    return static_cast<double>(n) / static_cast<double>(y1 - y0 + 1);
  };

  const Component* best = nullptr;
  double best_conf = 0.0;
  for (const auto& c : comps) {
    const std::size_t bh = c.bottom - c.top + 1, bw = c.right - c.left + 1;
    if (bh < 3 || bw < 3) continue;
    std::size_t covered = 0;
    for (std::size_t x = c.left; x <= c.right; ++x) covered += mask[c.top * w + x] + mask[c.bottom * w + x];
    for (std::size_t y = c.top + 1; y < c.bottom; ++y) covered += mask[y * w + c.left] + mask[y * w + c.right];
    const double conf = static_cast<double>(covered) / static_cast<double>(2 * bw + 2 * (bh - 2));
    if (conf < kForegroundMinConfidence) continue;
    if (!best || bh * bw > (best->bottom - best->top + 1) * (best->right - best->left + 1)) {
      best = &c;
      best_conf = conf;
    }
  }
  if (!best) return result;

  std::size_t top = best->top, bottom = best->bottom, left = best->left, right = best->right;
  const std::size_t interior = (bottom - top - 1) * (right - left - 1);
  std::size_t filled = 0;
  for (std::size_t y = top + 1; y < bottom; ++y) {
    for (std::size_t x = left + 1; x < right; ++x) filled += mask[y * w + x];
  }
  if (interior > 0 && static_cast<double>(filled) < 0.5 * static_cast<double>(interior)) {
    // A frame: peel fully covered boundary lines until the interior is reached.
    while (top < bottom && row_coverage(top, left, right) >= kForegroundMinConfidence) ++top;
    while (bottom > top && row_coverage(bottom, left, right) >= kForegroundMinConfidence) --bottom;
    while (left < right && col_coverage(left, top, bottom) >= kForegroundMinConfidence) ++left;
    while (right > left && col_coverage(right, top, bottom) >= kForegroundMinConfidence) --right;
    if (top >= bottom || left >= right) return result;
  }
  result.box = {top, left, bottom - top + 1, right - left + 1};
  result.image = crop(image, top, left, result.box.height, result.box.width);
  result.confidence = best_conf;
  result.fallback = false;
  return result;
}

Image resize_image(const Image& image, std::size_t side) {
  if (side < 32) throw ConfigError("resize side must be at least 32, got " + std::to_string(side));
  if (image.height == side && image.width == side) return image;
  Image out(side, side, image.channels);
  const double sy = static_cast<double>(image.height) / static_cast<double>(side);
  const double sx = static_cast<double>(image.width) / static_cast<double>(side);
  auto source = [](std::size_t dst, double scale, std::size_t limit, std::size_t& i0, std::size_t& i1, double& f) {
    double s = (static_cast<double>(dst) + 0.5) * scale - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(limit - 1));
    i0 = static_cast<std::size_t>(std::floor(s));
    i1 = std::min(i0 + 1, limit - 1);
    f = s - static_cast<double>(i0);
  };
  for (std::size_t y = 0; y < side; ++y) {
    std::size_t y0, y1;
    double fy;
    source(y, sy, image.height, y0, y1, fy);
    for (std::size_t x = 0; x < side; ++x) {
      std::size_t x0, x1;
      double fx;
      source(x, sx, image.width, x0, x1, fx);
      for (std::size_t c = 0; c < image.channels; ++c) {
        const double top = (1.0 - fx) * image.at(y0, x0, c) + fx * image.at(y0, x1, c);
        const double bot = (1.0 - fx) * image.at(y1, x0, c) + fx * image.at(y1, x1, c);
        out.at(y, x, c) = clamp_u8((1.0 - fy) * top + fy * bot);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

FoldSplit make_folds(std::span<const ImageRecord> records, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ValidationError("k must be at least 2, got " + std::to_string(k));
  std::size_t class_total[2] = {0, 0};
  for (const auto& r : records) {
    if (r.label != kBenign && r.label != kMalignant) throw ValidationError("record " + r.image_id + " has invalid label");
    ++class_total[r.label];
  }
  for (int c = 0; c < 2; ++c) {
    if (class_total[c] < k) {
      throw ValidationError(std::string(c == kBenign ? "benign" : "malignant") + " class has " +
                            std::to_string(class_total[c]) + " samples, fewer than k = " + std::to_string(k));
    }
  }

  struct Group {
    std::vector<std::size_t> members;
    std::size_t count[2] = {0, 0};
  };
  std::vector<Group> groups;
  std::map<std::string, std::size_t> by_patient;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    std::size_t g;
    if (r.patient_id) {
      auto [it, inserted] = by_patient.emplace(*r.patient_id, groups.size());
      if (inserted) groups.emplace_back();
      g = it->second;
    } else {
      g = groups.size();
      groups.emplace_back();
    }
    groups[g].members.push_back(i);
    ++groups[g].count[r.label];
  }
  if (groups.size() < k) {
    throw ValidationError(std::to_string(groups.size()) + " patient groups cannot fill " + std::to_string(k) + " folds");
  }

  std::vector<std::size_t> order(groups.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return groups[a].members.size() > groups[b].members.size();
  });

  // Greedy placement minimizing squared deviation from per-class and total targets.
  const double kd = static_cast<double>(k);
  const double target[2] = {static_cast<double>(class_total[0]) / kd, static_cast<double>(class_total[1]) / kd};
  const double target_total = static_cast<double>(records.size()) / kd;
  std::vector<std::array<double, 2>> fold_count(k, {0.0, 0.0});
  std::vector<double> fold_total(k, 0.0);
  FoldSplit split;
  split.k = k;
  for (std::size_t g : order) {
    const Group& grp = groups[g];
    std::size_t best = 0;
    double best_cost = INFINITY;
    for (std::size_t f = 0; f < k; ++f) {
      double cost = 0.0;
      for (int c = 0; c < 2; ++c) {
        const double before = fold_count[f][c] - target[c];
        const double after = before + static_cast<double>(grp.count[c]);
        cost += after * after - before * before;
      }
      const double before = fold_total[f] - target_total;
      const double after = before + static_cast<double>(grp.members.size());
      cost += after * after - before * before;
      if (cost < best_cost - 1e-9 || (std::abs(cost - best_cost) <= 1e-9 && fold_total[f] < fold_total[best])) {
        best = f;
        best_cost = cost;
      }
    }
    for (int c = 0; c < 2; ++c) fold_count[best][c] += static_cast<double>(grp.count[c]);
    fold_total[best] += static_cast<double>(grp.members.size());
    for (std::size_t i : grp.members) split.assignments[records[i].image_id] = best;
  }
  for (std::size_t f = 0; f < k; ++f) {
    if (fold_total[f] == 0.0) throw ValidationError("fold " + std::to_string(f) + " received no images");
  }
  if (split.assignments.size() != records.size()) throw ValidationError("duplicate image_id in records");
  return split;
}

void write_folds(const std::filesystem::path& path, const FoldSplit& split, std::span<const std::string> order) {
  CsvTable table;
  table.header = {"image_id", "fold"};
  if (order.empty()) {
    for (const auto& [id, fold] : split.assignments) table.rows.push_back({id, std::to_string(fold)});
  } else {
    for (const auto& id : order) table.rows.push_back({id, std::to_string(split.assignments.at(id))});
  }
  write_csv(path, table);
}

FoldSplit read_folds(const std::filesystem::path& path) {
  const CsvTable table = read_csv(path);
  const int id_col = table.column("image_id");
  const int fold_col = table.column("fold");
  if (id_col < 0 || fold_col < 0) throw ValidationError(path.string() + ": fold file needs image_id,fold columns");
  FoldSplit split;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    std::size_t fold = 0;
    try {
      fold = static_cast<std::size_t>(std::stoul(row[static_cast<std::size_t>(fold_col)]));
    } catch (const std::exception&) {
      throw ValidationError(path.string() + " row " + std::to_string(r + 1) + ": fold is not an integer");
    }
    if (!split.assignments.emplace(row[static_cast<std::size_t>(id_col)], fold).second) {
      throw ValidationError(path.string() + " row " + std::to_string(r + 1) + ": duplicate image_id");
    }
    split.k = std::max(split.k, fold + 1);
  }
  return split;
}

// ---------------------------------------------------------------------------

AugmentConfig AugmentConfig::none() {
  AugmentConfig c;
  c.p_blur = c.p_noise = c.p_hflip = c.p_brightness_contrast = 0.0;
  return c;
}

void AugmentConfig::validate() const {
  for (auto [name, p] : {std::pair{"p_blur", p_blur}, std::pair{"p_noise", p_noise}, std::pair{"p_hflip", p_hflip},
                         std::pair{"p_brightness_contrast", p_brightness_contrast}}) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string(name) + ": probability outside [0, 1]");
  }
  if (noise_sigma < 0.0) throw ConfigError("noise_sigma: must be non-negative");
  if (!(blur_sigma_min > 0.0 && blur_sigma_min <= blur_sigma_max)) {
    throw ConfigError("blur_sigma_min/blur_sigma_max: need 0 < min <= max");
  }
  if (brightness_delta < 0.0 || contrast_delta < 0.0 || contrast_delta >= 1.0) {
    throw ConfigError("brightness_delta/contrast_delta: need non-negative deltas and contrast_delta < 1");
  }
}

Image flip_horizontal(const Image& image) {
  Image out(image.height, image.width, image.channels);
  for (std::size_t y = 0; y < image.height; ++y) {
    for (std::size_t x = 0; x < image.width; ++x) {
      for (std::size_t c = 0; c < image.channels; ++c) out.at(y, image.width - 1 - x, c) = image.at(y, x, c);
    }
  }
  return out;
}

Image gaussian_blur(const Image& image, double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(2 * radius + 1);
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    total += kernel[i + radius];
  }
  for (auto& v : kernel) v /= total;
  const long h = static_cast<long>(image.height), w = static_cast<long>(image.width);
  const std::size_t ch = image.channels;
  std::vector<double> tmp(image.pixels.size());
  for (long y = 0; y < h; ++y) {
    for (long x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < ch; ++c) {
        double s = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          const long xx = std::clamp(x + i, 0L, w - 1);
          s += kernel[i + radius] * image.pixels[(y * w + xx) * ch + c];
        }
        tmp[(y * w + x) * ch + c] = s;
      }
    }
  }
  Image out(image.height, image.width, ch);
  for (long y = 0; y < h; ++y) {
    for (long x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < ch; ++c) {
        double s = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          const long yy = std::clamp(y + i, 0L, h - 1);
          s += kernel[i + radius] * tmp[(yy * w + x) * ch + c];
        }
        out.pixels[(y * w + x) * ch + c] = clamp_u8(s);
      }
    }
  }
  return out;
}

Image augment(const Image& image, const AugmentConfig& config, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double u_blur = unit(rng);
  const double u_noise = unit(rng);
  const double u_flip = unit(rng);
  const double u_bc = unit(rng);

  Image out = image;
  if (u_blur < config.p_blur) {
    std::uniform_real_distribution<double> sigma(config.blur_sigma_min, config.blur_sigma_max);
    out = gaussian_blur(out, sigma(rng));
  }
  if (u_noise < config.p_noise && config.noise_sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, config.noise_sigma);
    for (auto& p : out.pixels) p = clamp_u8(p + noise(rng));
  }
  if (u_flip < config.p_hflip) out = flip_horizontal(out);
  if (u_bc < config.p_brightness_contrast) {
    std::uniform_real_distribution<double> contrast(1.0 - config.contrast_delta, 1.0 + config.contrast_delta);
    std::uniform_real_distribution<double> brightness(-config.brightness_delta, config.brightness_delta);
    const double alpha = contrast(rng);
    const double beta = brightness(rng) * 255.0;
    for (auto& p : out.pixels) p = clamp_u8(alpha * p + beta);
  }
  return out;
}

Tensor to_model_input(std::span<const Image> images, std::size_t side) {
  Tensor out({images.size(), side, side, 3});
  std::size_t o = 0;
  for (const Image& src : images) {
    if (src.channels != 1 && src.channels != 3) throw ValidationError("model input needs 1 or 3 channel images");
    const Image img = (src.height == side && src.width == side) ? src : resize_image(src, side);
    for (std::size_t i = 0; i < side * side; ++i) {
      for (std::size_t c = 0; c < 3; ++c) {
        const std::uint8_t v = img.pixels[i * img.channels + (img.channels == 3 ? c : 0)];
        out[o++] = (static_cast<double>(v) / 255.0 - 0.5) / 0.5;
      }
    }
  }
  return out;
}

}  // namespace hovertrans
