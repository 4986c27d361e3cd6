#pragma once

#include <cstddef>
#include <optional>
#include <string>

#include "hovertrans/nn.hpp"

namespace hovertrans {

// Tiling of one stage input map into patch and strip tokens.
//
// Patch tiles are `patch` x `patch` pixels, flattened (row, col, channel).
// Horizontal strips are `strip` rows by the full width, flattened
// (row, col, channel). Vertical strips are the full height by `strip`
// columns, flattened (col, row, channel), so a vertical strip of a map is
// bit-identical to the horizontal strip of its transpose.
struct TokenGeometry {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::size_t patch = 0;
  std::size_t strip = 0;

  std::size_t grid_rows() const { return height / patch; }
  std::size_t grid_cols() const { return width / patch; }
  std::size_t hstrip_count() const { return height / strip; }
  std::size_t vstrip_count() const { return width / strip; }
  // Token dim shared by all three schemes: patch^2 * channels.
  std::size_t embed_dim() const { return patch * patch * channels; }
  std::size_t patch_features() const { return patch * patch * channels; }
  std::size_t hstrip_features() const { return strip * width * channels; }
  std::size_t vstrip_features() const { return height * strip * channels; }
  PatchGrid grid() const { return {grid_rows(), grid_cols()}; }

  // Empty when legal; otherwise the reason (divisibility or alignment).
  std::optional<std::string> violation() const;
  // Throws ConfigError carrying violation().
  void validate() const;
};

// Strip and patch sizes must nest: one is a multiple of the other.
bool sizes_aligned(std::size_t patch, std::size_t strip);

struct EmbedParams {
  LinearParams projection;  // (features, embed_dim)
  Var positional;           // (tokens, embed_dim); undefined when disabled
};

enum class StripAxis { horizontal, vertical };

EmbedParams init_embed(std::size_t features, std::size_t dim, std::size_t tokens, bool positional, Rng& rng);
void visit_params(const std::string& prefix, EmbedParams& p, const ParamVisitor& visit);

// Gather plans; exposed for tests and for reuse by the embed functions.
ops::RemapPlan patch_plan(const TokenGeometry& geom);
ops::RemapPlan hstrip_plan(const TokenGeometry& geom);
ops::RemapPlan vstrip_plan(const TokenGeometry& geom);
ops::RemapPlan unpatch_plan(const TokenGeometry& geom);
ops::RemapPlan broadcast_plan(const TokenGeometry& geom, StripAxis axis, std::size_t dim);

TokenSequence patch_embed(const FeatureMap& x, const TokenGeometry& geom, const EmbedParams& params);
TokenSequence hstrip_embed(const FeatureMap& x, const TokenGeometry& geom, const EmbedParams& params);
TokenSequence vstrip_embed(const FeatureMap& x, const TokenGeometry& geom, const EmbedParams& params);

// Spreads strip tokens over the patch grid so they can be added to patch
// tokens. With strip >= patch, grid cell (r, c) takes horizontal strip
// floor(r * patch / strip) (vertical: column c). With strip < patch each grid
// row spans patch/strip strips and takes their mean, so every strip feeds
// the grid. In both cases the grid total is cols * (strip / patch) times the
// strip total.
TokenSequence broadcast_strips(const TokenSequence& strips, const TokenGeometry& geom, StripAxis axis);

// Inverse of the patch tiling: each token (dim patch^2 * channels) is
// unflattened into its tile. No learned unprojection.
FeatureMap tokens_to_map(const TokenSequence& tokens, const TokenGeometry& geom);

}  // namespace hovertrans
