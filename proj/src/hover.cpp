#include "hovertrans/hover.hpp"

#include "hovertrans/error.hpp"

namespace hovertrans {

bool has_h_branch(Variant v) { return v == Variant::full || v == Variant::model_p_h; }
bool has_v_branch(Variant v) { return v == Variant::full || v == Variant::model_p_v; }

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::model_p: return "model_p";
    case Variant::model_p_v: return "model_p_v";
    case Variant::model_p_h: return "model_p_h";
  }
  return "full";
}

Variant parse_variant(const std::string& name) {
  for (Variant v : {Variant::full, Variant::model_p, Variant::model_p_v, Variant::model_p_h}) {
    if (variant_name(v) == name) return v;
  }
  throw ConfigError("variant: unknown value '" + name + "' (expected full, model_p, model_p_v or model_p_h)");
}

HoverBlockParams init_hover_block(std::size_t dim, Variant variant, Rng& rng) {
  HoverBlockParams p;
  if (has_h_branch(variant)) p.h = init_block(dim, rng);
  if (has_v_branch(variant)) p.v = init_block(dim, rng);
  p.h2v_inner = init_block(dim, rng);
  p.h2v_outer = init_block(dim, rng);
  p.v2h_inner = init_block(dim, rng);
  p.v2h_outer = init_block(dim, rng);
  return p;
}

void visit_params(const std::string& prefix, HoverBlockParams& p, const ParamVisitor& visit) {
  if (p.h) visit_params(prefix + ".h", *p.h, visit);
  if (p.v) visit_params(prefix + ".v", *p.v, visit);
  visit_params(prefix + ".h2v_inner", p.h2v_inner, visit);
  visit_params(prefix + ".h2v_outer", p.h2v_outer, visit);
  visit_params(prefix + ".v2h_inner", p.v2h_inner, visit);
  visit_params(prefix + ".v2h_outer", p.v2h_outer, visit);
}

HoverBlockState hover_block(const HoverBlockState& state, const HoverBlockParams& params, const TokenGeometry& geom,
                            std::size_t heads) {
  if (state.h.has_value() != params.h.has_value() || state.v.has_value() != params.v.has_value()) {
    throw ConfigError("hover_block: strip branches in the state do not match the block parameters");
  }
  const PatchGrid grid = geom.grid();
  for (const TokenSequence* z : {&state.h2v, &state.v2h}) {
    z->check();
    const auto* g = std::get_if<PatchGrid>(&z->layout);
    if (!g || *g != grid) throw ConfigError("hover_block: main branch is not on the stage patch grid");
  }

  HoverBlockState next;
  std::optional<TokenSequence> spread_h;
  std::optional<TokenSequence> spread_v;
  if (params.h) {
    next.h = transformer_block(*state.h, *params.h, heads);
    spread_h = broadcast_strips(*next.h, geom, StripAxis::horizontal);
  }
  if (params.v) {
    next.v = transformer_block(*state.v, *params.v, heads);
    spread_v = broadcast_strips(*next.v, geom, StripAxis::vertical);
  }

  auto branch = [&](const TokenSequence& z, const std::optional<TokenSequence>& first,
                    const std::optional<TokenSequence>& second, const BlockParams& inner, const BlockParams& outer) {
    TokenSequence x = z;
    if (first) x.data = ops::add(first->data, x.data);
    x = transformer_block(x, inner, heads);
    if (second) x.data = ops::add(x.data, second->data);
    return transformer_block(x, outer, heads);
  };
  next.h2v = branch(state.h2v, spread_h, spread_v, params.h2v_inner, params.h2v_outer);
  next.v2h = branch(state.v2h, spread_v, spread_h, params.v2h_inner, params.v2h_outer);
  return next;
}

HoverStageParams init_hover_stage(const TokenGeometry& geom, std::size_t depth, Variant variant, bool positional,
                                  Rng& rng) {
  geom.validate();
  const std::size_t dim = geom.embed_dim();
  HoverStageParams p;
  p.patch = init_embed(geom.patch_features(), dim, geom.grid_rows() * geom.grid_cols(), positional, rng);
  if (has_h_branch(variant)) p.hstrip = init_embed(geom.hstrip_features(), dim, geom.hstrip_count(), positional, rng);
  if (has_v_branch(variant)) p.vstrip = init_embed(geom.vstrip_features(), dim, geom.vstrip_count(), positional, rng);
  for (std::size_t l = 0; l < depth; ++l) p.blocks.push_back(init_hover_block(dim, variant, rng));
  p.fusion = init_conv_block(2 * geom.channels, 2 * geom.channels, rng);
  return p;
}

void visit_params(const std::string& prefix, HoverStageParams& p, const ParamVisitor& visit) {
  visit_params(prefix + ".patch_embed", p.patch, visit);
  if (p.hstrip) visit_params(prefix + ".hstrip_embed", *p.hstrip, visit);
  if (p.vstrip) visit_params(prefix + ".vstrip_embed", *p.vstrip, visit);
  for (std::size_t l = 0; l < p.blocks.size(); ++l) {
    visit_params(prefix + ".block" + std::to_string(l), p.blocks[l], visit);
  }
  visit_params(prefix + ".conv", p.fusion, visit);
}

void visit_buffers(const std::string& prefix, HoverStageParams& p, const BufferVisitor& visit) {
  visit_buffers(prefix + ".conv", p.fusion, visit);
}

StageOutput hover_stage(const FeatureMap& x, HoverStageParams& params, const TokenGeometry& geom, std::size_t heads,
                        bool training, bool pool) {
  if (params.blocks.empty()) throw ConfigError("hover_stage: depth must be at least 1");
  HoverBlockState state;
  state.h2v = patch_embed(x, geom, params.patch);
  state.v2h = state.h2v;
  if (params.hstrip) state.h = hstrip_embed(x, geom, *params.hstrip);
  if (params.vstrip) state.v = vstrip_embed(x, geom, *params.vstrip);

  StageOutput out;
  out.patch_tokens = state.h2v.tokens();
  out.hstrip_tokens = state.h ? state.h->tokens() : 0;
  out.vstrip_tokens = state.v ? state.v->tokens() : 0;

  for (const auto& block : params.blocks) state = hover_block(state, block, geom, heads);

  const FeatureMap h2v = tokens_to_map(state.h2v, geom);
  const FeatureMap v2h = tokens_to_map(state.v2h, geom);
  out.fused = conv_block({ops::concat_last(h2v.data, v2h.data)}, params.fusion, training);
  out.output = pool ? pool2(out.fused) : out.fused;
  return out;
}

}  // namespace hovertrans
