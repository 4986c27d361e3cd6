#include "hovertrans/interpret.hpp"

#include <algorithm>
#include <cmath>

#include "hovertrans/data.hpp"
#include "hovertrans/error.hpp"

namespace hovertrans {

namespace {

// Stage-4 Conv block output for a single image, (H, W, C).
FeatureMap last_fused(HoverTransNet& model, const Image& image, Var& logits) {
  const Var input = Var::constant(to_model_input(std::span<const Image>(&image, 1), model.config.input_side));
  ForwardResult r = forward(model, input, false);
  logits = r.logits;
  return r.stages.back().fused;
}

}  // namespace

std::string method_name(HeatmapMethod m) { return m == HeatmapMethod::activation ? "activation" : "gradcam"; }

HeatmapMethod parse_method(const std::string& name) {
  if (name == "activation") return HeatmapMethod::activation;
  if (name == "gradcam") return HeatmapMethod::gradcam;
  throw ConfigError("heatmap method '" + name + "' is not one of activation, gradcam");
}

Heatmap normalize(Heatmap map) {
  if (map.values.empty()) throw ValidationError("normalize: empty heatmap");
  const auto [lo, hi] = std::minmax_element(map.values.begin(), map.values.end());
  const double mn = *lo, range = *hi - *lo;
  if (!(range > 0.0)) {
    std::fill(map.values.begin(), map.values.end(), 0.5);
    map.constant = true;
    return map;
  }
  for (auto& v : map.values) v = (v - mn) / range;
  map.constant = false;
  return map;
}

Heatmap upsample_bilinear(const Heatmap& map, std::size_t height, std::size_t width) {
  if (map.height == 0 || map.width == 0 || map.values.size() != map.height * map.width) {
    throw ValidationError("upsample_bilinear: malformed heatmap");
  }
  Heatmap out{height, width, std::vector<double>(height * width), map.constant};
  const double sy = static_cast<double>(map.height) / static_cast<double>(height);
  const double sx = static_cast<double>(map.width) / static_cast<double>(width);
  for (std::size_t y = 0; y < height; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(map.height - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, map.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(map.width - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, map.width - 1);
      const double wx = fx - static_cast<double>(x0);
      const double top = (1.0 - wx) * map.at(y0, x0) + wx * map.at(y0, x1);
      const double bot = (1.0 - wx) * map.at(y1, x0) + wx * map.at(y1, x1);
      out.values[y * width + x] = (1.0 - wy) * top + wy * bot;
    }
  }
  return out;
}

Heatmap raw_heatmap(HoverTransNet& model, const Image& image, HeatmapMethod method) {
  Var logits;
  Heatmap out;
  if (method == HeatmapMethod::activation) {
    NoGradGuard no_grad;
    const FeatureMap f = last_fused(model, image, logits);
    const std::size_t h = f.height(), w = f.width(), c = f.channels();
    out = {h, w, std::vector<double>(h * w, 0.0), false};
    const double* a = f.data.value().data();
    for (std::size_t i = 0; i < h * w; ++i) {
      double s = 0.0;
      for (std::size_t k = 0; k < c; ++k) s += std::abs(a[i * c + k]);
      out.values[i] = s / static_cast<double>(c);
    }
    return out;
  }

  FeatureMap f = last_fused(model, image, logits);
  if (!f.data.requires_grad()) throw Error("gradcam: model has no trainable parameters");
  f.data.retain_grad();
  Tensor seed(logits.shape(), 0.0);
  seed[static_cast<std::size_t>(kMalignant)] = 1.0;
  backward(logits, seed);
  const std::size_t h = f.height(), w = f.width(), c = f.channels();
  const double* a = f.data.value().data();
  const double* g = f.data.grad().data();
  std::vector<double> weight(c, 0.0);
  for (std::size_t i = 0; i < h * w; ++i) {
    for (std::size_t k = 0; k < c; ++k) weight[k] += g[i * c + k] / static_cast<double>(h * w);
  }
  out = {h, w, std::vector<double>(h * w, 0.0), false};
  for (std::size_t i = 0; i < h * w; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < c; ++k) s += weight[k] * a[i * c + k];
    out.values[i] = std::max(s, 0.0);
  }
  model.zero_grad();
  return out;
}

Heatmap heatmap(HoverTransNet& model, const Image& image, HeatmapMethod method) {
  const std::size_t side = model.config.input_side;
  if (image.height != side || image.width != side) {
    throw ValidationError("heatmap: image is " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                          ", model input is " + std::to_string(side) + "x" + std::to_string(side));
  }
  return normalize(upsample_bilinear(raw_heatmap(model, image, method), side, side));
}

Image colorize(const Heatmap& map) {
  const auto& lut = colormap_lut();
  Image out(map.height, map.width, 3);
  for (std::size_t i = 0; i < map.values.size(); ++i) {
    const auto idx = static_cast<std::size_t>(std::lround(std::clamp(map.values[i], 0.0, 1.0) * 255.0));
    for (std::size_t c = 0; c < 3; ++c) out.pixels[i * 3 + c] = lut[idx][c];
  }
  return out;
}

Image overlay(const Image& image, const Heatmap& map, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("overlay: alpha must lie in [0, 1]");
  if (image.height != map.height || image.width != map.width) {
    throw ValidationError("overlay: image is " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                          ", heatmap is " + std::to_string(map.height) + "x" + std::to_string(map.width));
  }
  const Image gray = to_grayscale(image);
  const Image color = colorize(map);
  Image out(image.height, image.width, 3);
  for (std::size_t i = 0; i < gray.pixels.size(); ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = (1.0 - alpha) * gray.pixels[i] + alpha * color.pixels[i * 3 + c];
      out.pixels[i * 3 + c] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
    }
  }
  return out;
}

nlohmann::json heatmap_sidecar(const std::string& image_id, const std::string& checkpoint_id, HeatmapMethod method,
                               double alpha) {
  return {{"image_id", image_id}, {"checkpoint_id", checkpoint_id}, {"method", method_name(method)}, {"alpha", alpha}};
}

}  // namespace hovertrans
