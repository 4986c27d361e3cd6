#include "hovertrans/embeddings.hpp"

#include "hovertrans/error.hpp"

namespace hovertrans {

namespace {

std::string dims(std::size_t h, std::size_t w) { return std::to_string(h) + "x" + std::to_string(w); }

void require_map(const FeatureMap& x, const TokenGeometry& geom) {
  x.check();
  geom.validate();
  if (x.height() != geom.height || x.width() != geom.width || x.channels() != geom.channels) {
    throw ShapeError("feature map " + shape_string(x.data.shape()) + " does not match token geometry " +
                     dims(geom.height, geom.width) + "x" + std::to_string(geom.channels));
  }
}

// Plan whose output element o reads a single input element.
ops::RemapPlan gather_plan(std::size_t in_size, Tensor::Shape out_shape, std::vector<std::size_t> sources) {
  ops::RemapPlan plan;
  plan.in_size = in_size;
  plan.out_shape = std::move(out_shape);
  plan.offsets.resize(sources.size() + 1);
  for (std::size_t i = 0; i <= sources.size(); ++i) plan.offsets[i] = i;
  plan.sources = std::move(sources);
  return plan;
}

TokenSequence project(const Var& tiles, TokenLayout layout, const EmbedParams& params, std::size_t tokens) {
  Var z = ops::linear(tiles, params.projection.weight, params.projection.bias);
  if (params.positional) {
    if (params.positional.dim(0) != tokens) {
      throw ShapeError("positional table has " + std::to_string(params.positional.dim(0)) + " rows for " +
                       std::to_string(tokens) + " tokens");
    }
    z = ops::add_broadcast(z, params.positional);
  }
  return {z, layout};
}

}  // namespace

bool sizes_aligned(std::size_t patch, std::size_t strip) {
  return patch > 0 && strip > 0 && (strip % patch == 0 || patch % strip == 0);
}

std::optional<std::string> TokenGeometry::violation() const {
  if (height == 0 || width == 0 || channels == 0) return "empty stage map " + dims(height, width);
  if (patch == 0 || strip == 0) return std::string("patch and strip sizes must be positive");
  if (height % patch || width % patch) {
    return "patch size " + std::to_string(patch) + " does not divide stage map " + dims(height, width);
  }
  if (height % strip || width % strip) {
    return "strip size " + std::to_string(strip) + " does not divide stage map " + dims(height, width);
  }
  if (!sizes_aligned(patch, strip)) {
    return "patch size " + std::to_string(patch) + " and strip size " + std::to_string(strip) +
           " are not multiples of one another";
  }
  return std::nullopt;
}

void TokenGeometry::validate() const {
  if (auto why = violation()) throw ConfigError(*why);
}

EmbedParams init_embed(std::size_t features, std::size_t dim, std::size_t tokens, bool positional, Rng& rng) {
  EmbedParams p;
  p.projection = init_linear(features, dim, rng);
  if (positional) p.positional = Var::parameter(truncated_normal_tensor({tokens, dim}, 0.02, rng));
  return p;
}

void visit_params(const std::string& prefix, EmbedParams& p, const ParamVisitor& visit) {
  visit_params(prefix + ".proj", p.projection, visit);
  if (p.positional) visit(prefix + ".pos", p.positional, ParamRole::positional);
}

ops::RemapPlan patch_plan(const TokenGeometry& g) {
  g.validate();
  const std::size_t rows = g.grid_rows(), cols = g.grid_cols(), p = g.patch, c = g.channels;
  std::vector<std::size_t> src;
  src.reserve(g.height * g.width * c);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t q = 0; q < cols; ++q) {
      for (std::size_t dy = 0; dy < p; ++dy) {
        for (std::size_t dx = 0; dx < p; ++dx) {
          const std::size_t base = ((r * p + dy) * g.width + q * p + dx) * c;
          for (std::size_t ch = 0; ch < c; ++ch) src.push_back(base + ch);
        }
      }
    }
  }
  return gather_plan(g.height * g.width * c, {rows * cols, g.patch_features()}, std::move(src));
}

ops::RemapPlan hstrip_plan(const TokenGeometry& g) {
  g.validate();
  const std::size_t count = g.hstrip_count(), c = g.channels;
  std::vector<std::size_t> src;
  src.reserve(g.height * g.width * c);
  for (std::size_t m = 0; m < count; ++m) {
    for (std::size_t i = 0; i < g.strip; ++i) {
      for (std::size_t col = 0; col < g.width; ++col) {
        const std::size_t base = ((m * g.strip + i) * g.width + col) * c;
        for (std::size_t ch = 0; ch < c; ++ch) src.push_back(base + ch);
      }
    }
  }
  return gather_plan(g.height * g.width * c, {count, g.hstrip_features()}, std::move(src));
}

ops::RemapPlan vstrip_plan(const TokenGeometry& g) {
  g.validate();
  const std::size_t count = g.vstrip_count(), c = g.channels;
  std::vector<std::size_t> src;
  src.reserve(g.height * g.width * c);
  for (std::size_t m = 0; m < count; ++m) {
    for (std::size_t j = 0; j < g.strip; ++j) {
      for (std::size_t row = 0; row < g.height; ++row) {
        const std::size_t base = (row * g.width + m * g.strip + j) * c;
        for (std::size_t ch = 0; ch < c; ++ch) src.push_back(base + ch);
      }
    }
  }
  return gather_plan(g.height * g.width * c, {count, g.vstrip_features()}, std::move(src));
}

ops::RemapPlan unpatch_plan(const TokenGeometry& g) {
  // Invert the patch gather: map position -> (token, feature).
  const ops::RemapPlan forward = patch_plan(g);
  std::vector<std::size_t> src(forward.sources.size());
  for (std::size_t k = 0; k < forward.sources.size(); ++k) src[forward.sources[k]] = k;
  return gather_plan(forward.sources.size(), {g.height, g.width, g.channels}, std::move(src));
}

ops::RemapPlan broadcast_plan(const TokenGeometry& g, StripAxis axis, std::size_t dim) {
  g.validate();
  const std::size_t rows = g.grid_rows(), cols = g.grid_cols();
  const std::size_t count = axis == StripAxis::horizontal ? g.hstrip_count() : g.vstrip_count();
  // Number of strips averaged into one grid line (1 when strip >= patch).
  const std::size_t span = g.patch > g.strip ? g.patch / g.strip : 1;
  ops::RemapPlan plan;
  plan.in_size = count * dim;
  plan.out_shape = {rows * cols, dim};
  plan.offsets.reserve(rows * cols * dim + 1);
  plan.offsets.push_back(0);
  const double w = 1.0 / static_cast<double>(span);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t q = 0; q < cols; ++q) {
      const std::size_t line = axis == StripAxis::horizontal ? r : q;
      const std::size_t first = line * g.patch / g.strip;
      for (std::size_t d = 0; d < dim; ++d) {
        for (std::size_t s = 0; s < span; ++s) {
          plan.sources.push_back((first + s) * dim + d);
          plan.weights.push_back(w);
        }
        plan.offsets.push_back(plan.sources.size());
      }
    }
  }
  if (span == 1) plan.weights.clear();
  return plan;
}

TokenSequence patch_embed(const FeatureMap& x, const TokenGeometry& geom, const EmbedParams& params) {
  require_map(x, geom);
  const Var tiles = ops::remap(x.data, patch_plan(geom));
  return project(tiles, geom.grid(), params, geom.grid_rows() * geom.grid_cols());
}

TokenSequence hstrip_embed(const FeatureMap& x, const TokenGeometry& geom, const EmbedParams& params) {
  require_map(x, geom);
  const Var tiles = ops::remap(x.data, hstrip_plan(geom));
  return project(tiles, HStrips{geom.hstrip_count()}, params, geom.hstrip_count());
}

TokenSequence vstrip_embed(const FeatureMap& x, const TokenGeometry& geom, const EmbedParams& params) {
  require_map(x, geom);
  const Var tiles = ops::remap(x.data, vstrip_plan(geom));
  return project(tiles, VStrips{geom.vstrip_count()}, params, geom.vstrip_count());
}

TokenSequence broadcast_strips(const TokenSequence& strips, const TokenGeometry& geom, StripAxis axis) {
  strips.check();
  geom.validate();
  const bool horizontal = axis == StripAxis::horizontal;
  const bool layout_ok = horizontal ? std::holds_alternative<HStrips>(strips.layout)
                                    : std::holds_alternative<VStrips>(strips.layout);
  if (!layout_ok) throw ConfigError("broadcast_strips: token layout does not match the requested axis");
  const std::size_t expected = horizontal ? geom.hstrip_count() : geom.vstrip_count();
  if (strips.tokens() != expected) {
    throw ConfigError("broadcast_strips: " + std::to_string(strips.tokens()) + " strips, geometry expects " +
                      std::to_string(expected));
  }
  return {ops::remap(strips.data, broadcast_plan(geom, axis, strips.dim())), geom.grid()};
}

FeatureMap tokens_to_map(const TokenSequence& tokens, const TokenGeometry& geom) {
  tokens.check();
  geom.validate();
  const auto* grid = std::get_if<PatchGrid>(&tokens.layout);
  if (!grid) throw ConfigError("tokens_to_map needs a patch-grid token sequence");
  if (*grid != geom.grid()) throw ConfigError("tokens_to_map: token grid does not match geometry");
  if (tokens.dim() != geom.patch_features()) {
    throw ConfigError("tokens_to_map: token dim " + std::to_string(tokens.dim()) + " != patch^2 * channels = " +
                      std::to_string(geom.patch_features()));
  }
  return {ops::remap(tokens.data, unpatch_plan(geom))};
}

}  // namespace hovertrans
