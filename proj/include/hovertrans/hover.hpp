#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "hovertrans/embeddings.hpp"
#include "hovertrans/nn.hpp"

namespace hovertrans {

// Which auxiliary strip branches exist. model_p drops both, model_p_v keeps
// only the vertical branch, model_p_h keeps only the horizontal one.
enum class Variant { full, model_p, model_p_v, model_p_h };

bool has_h_branch(Variant v);
bool has_v_branch(Variant v);
std::string variant_name(Variant v);
Variant parse_variant(const std::string& name);  // ConfigError on unknown names

// Branch activations between two HoVer blocks. The strip branches are absent
// for variants that do not build them.
struct HoverBlockState {
  std::optional<TokenSequence> h;
  std::optional<TokenSequence> v;
  TokenSequence h2v;
  TokenSequence v2h;
};

// Six independent transformer parameter sets, minus the removed strip branches.
struct HoverBlockParams {
  std::optional<BlockParams> h;
  std::optional<BlockParams> v;
  BlockParams h2v_inner;
  BlockParams h2v_outer;
  BlockParams v2h_inner;
  BlockParams v2h_outer;
};

HoverBlockParams init_hover_block(std::size_t dim, Variant variant, Rng& rng);
void visit_params(const std::string& prefix, HoverBlockParams& p, const ParamVisitor& visit);

// One HoVer-Trans block:
//   h'   = Trans_H(h)                           v'   = Trans_V(v)
//   h2v' = Trans(Trans(B_h(h') + h2v) + B_v(v'))
//   v2h' = Trans(Trans(B_v(v') + v2h) + B_h(h'))
// where B_* spread strips over the patch grid. A missing strip branch
// contributes nothing to either main branch.
HoverBlockState hover_block(const HoverBlockState& state, const HoverBlockParams& params, const TokenGeometry& geom,
                            std::size_t heads);

struct HoverStageParams {
  EmbedParams patch;
  std::optional<EmbedParams> hstrip;
  std::optional<EmbedParams> vstrip;
  std::vector<HoverBlockParams> blocks;
  ConvBlockParams fusion;
};

HoverStageParams init_hover_stage(const TokenGeometry& geom, std::size_t depth, Variant variant, bool positional,
                                  Rng& rng);
void visit_params(const std::string& prefix, HoverStageParams& p, const ParamVisitor& visit);
void visit_buffers(const std::string& prefix, HoverStageParams& p, const BufferVisitor& visit);

struct StageOutput {
  FeatureMap fused;   // Conv block output, before pooling
  FeatureMap output;  // pooled (or fused when pooling is disabled)
  std::size_t patch_tokens = 0;
  std::size_t hstrip_tokens = 0;  // 0 when the branch is absent
  std::size_t vstrip_tokens = 0;
};

// Embed, run the blocks, reshape the two main branches back to maps,
// concatenate [H2V, V2H] along channels, fuse with the Conv block and pool.
// Output is (side/2, side/2, 2C).
StageOutput hover_stage(const FeatureMap& x, HoverStageParams& params, const TokenGeometry& geom, std::size_t heads,
                        bool training, bool pool = true);

}  // namespace hovertrans
