#include <doctest.h>

#include "hovertrans/error.hpp"
#include "hovertrans/hover.hpp"
#include "test_support.hpp"

using namespace hovertrans;
using hovertrans::testing::grad_check;
using hovertrans::testing::random_tensor;

namespace {

void zero_all(BlockParams& p) {
  visit_params("b", p, [](const std::string&, Var& v, ParamRole) { v.mutable_value().fill(0.0); });
}

void randomize(HoverBlockParams& p, Rng& rng, double scale) {
  visit_params("blk", p, [&](const std::string&, Var& v, ParamRole) { v.mutable_value() = random_tensor(v.shape(), rng, scale); });
}

HoverBlockState random_state(const TokenGeometry& g, std::size_t batch, Rng& rng, bool strips = true) {
  const std::size_t d = g.embed_dim(), t = g.grid_rows() * g.grid_cols();
  HoverBlockState s;
  if (strips) {
    s.h = TokenSequence{Var::constant(random_tensor({batch, g.hstrip_count(), d}, rng)), HStrips{g.hstrip_count()}};
    s.v = TokenSequence{Var::constant(random_tensor({batch, g.vstrip_count(), d}, rng)), VStrips{g.vstrip_count()}};
  }
  s.h2v = {Var::constant(random_tensor({batch, t, d}, rng)), g.grid()};
  s.v2h = {Var::constant(random_tensor({batch, t, d}, rng)), g.grid()};
  return s;
}

// Transposes grid positions of a (B, rows*cols, D) sequence on a square grid.
Tensor transpose_grid(const Tensor& x, std::size_t side) {
  Tensor out(x.shape());
  const std::size_t b = x.dim(0), d = x.dim(2);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t r = 0; r < side; ++r)
      for (std::size_t c = 0; c < side; ++c)
        for (std::size_t k = 0; k < d; ++k) out.at({i, c * side + r, k}) = x.at({i, r * side + c, k});
  return out;
}

void check_close(const Tensor& a, const Tensor& b, double tol) {
  REQUIRE(a.shape() == b.shape());
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  CHECK(worst <= tol);
}

}  // namespace

TEST_SUITE("hover") {
  TEST_CASE("variants and names") {
    CHECK(has_h_branch(Variant::full));
    CHECK(has_v_branch(Variant::full));
    CHECK_FALSE(has_h_branch(Variant::model_p));
    CHECK_FALSE(has_v_branch(Variant::model_p));
    CHECK(has_v_branch(Variant::model_p_v));
    CHECK_FALSE(has_h_branch(Variant::model_p_v));
    CHECK(has_h_branch(Variant::model_p_h));
    CHECK_FALSE(has_v_branch(Variant::model_p_h));
    for (Variant v : {Variant::full, Variant::model_p, Variant::model_p_v, Variant::model_p_h}) {
      CHECK(parse_variant(variant_name(v)) == v);
    }
    CHECK_THROWS_AS(parse_variant("model_q"), ConfigError);
  }

  TEST_CASE("stage-1 block preserves shapes") {
    Rng rng(1);
    const TokenGeometry g{64, 64, 4, 2, 2};
    const HoverBlockParams p = init_hover_block(16, Variant::full, rng);
    NoGradGuard ng;
    const HoverBlockState in = random_state(g, 1, rng);
    const HoverBlockState out = hover_block(in, p, g, 2);
    CHECK(out.h->data.shape() == in.h->data.shape());
    CHECK(out.v->data.shape() == in.v->data.shape());
    CHECK(out.h2v.data.shape() == Tensor::Shape{1, 1024, 16});
    CHECK(out.v2h.data.shape() == Tensor::Shape{1, 1024, 16});
    CHECK(std::get<PatchGrid>(out.h2v.layout) == PatchGrid{32, 32});
  }

  TEST_CASE("zero weights pass main branches through plus broadcast strips") {
    Rng rng(2);
    const TokenGeometry g{8, 8, 1, 2, 2};
    HoverBlockParams p = init_hover_block(4, Variant::full, rng);
    visit_params("blk", p, [](const std::string& n, Var& v, ParamRole role) {
      v.mutable_value().fill(role == ParamRole::norm && n.find("scale") != std::string::npos ? 1.0 : 0.0);
    });
    HoverBlockState zero_strips = random_state(g, 1, rng);
    zero_strips.h->data = Var::constant(Tensor(zero_strips.h->data.shape()));
    zero_strips.v->data = Var::constant(Tensor(zero_strips.v->data.shape()));
    const HoverBlockState out = hover_block(zero_strips, p, g, 1);
    CHECK(out.h2v.data.value().identical(zero_strips.h2v.data.value()));
    CHECK(out.v2h.data.value().identical(zero_strips.v2h.data.value()));

    const HoverBlockState s = random_state(g, 1, rng);
    const HoverBlockState o = hover_block(s, p, g, 1);
    const Tensor bh = broadcast_strips(*s.h, g, StripAxis::horizontal).data.value();
    const Tensor bv = broadcast_strips(*s.v, g, StripAxis::vertical).data.value();
    Tensor expect = s.h2v.data.value();
    for (std::size_t i = 0; i < expect.size(); ++i) expect[i] = (expect[i] + bh[i]) + bv[i];
    check_close(o.h2v.data.value(), expect, 1e-12);
  }

  TEST_CASE("zeroed strip pathways reduce to two stacked transformer blocks") {
    Rng rng(3);
    const TokenGeometry g{8, 8, 2, 2, 2};
    HoverBlockParams p = init_hover_block(8, Variant::full, rng);
    randomize(p, rng, 0.2);
    zero_all(*p.h);
    zero_all(*p.v);
    HoverBlockState s = random_state(g, 2, rng);
    s.h->data = Var::constant(Tensor(s.h->data.shape()));
    s.v->data = Var::constant(Tensor(s.v->data.shape()));
    const HoverBlockState out = hover_block(s, p, g, 2);
    const Tensor h2v = transformer_block(transformer_block(s.h2v, p.h2v_inner, 2), p.h2v_outer, 2).data.value();
    const Tensor v2h = transformer_block(transformer_block(s.v2h, p.v2h_inner, 2), p.v2h_outer, 2).data.value();
    check_close(out.h2v.data.value(), h2v, 1e-6);
    check_close(out.v2h.data.value(), v2h, 1e-6);

    // The structurally stripped variant computes the same thing.
    HoverBlockParams q = init_hover_block(8, Variant::model_p, rng);
    CHECK_FALSE(q.h);
    CHECK_FALSE(q.v);
    q.h2v_inner = p.h2v_inner;
    q.h2v_outer = p.h2v_outer;
    q.v2h_inner = p.v2h_inner;
    q.v2h_outer = p.v2h_outer;
    HoverBlockState bare = s;
    bare.h.reset();
    bare.v.reset();
    const HoverBlockState out_p = hover_block(bare, q, g, 2);
    check_close(out_p.h2v.data.value(), h2v, 1e-6);
    check_close(out_p.v2h.data.value(), v2h, 1e-6);
    CHECK_FALSE(out_p.h);
  }

  TEST_CASE("transposition symmetry with swapped branches") {
    Rng rng(4);
    const TokenGeometry g{8, 8, 1, 2, 2};
    HoverBlockParams a = init_hover_block(4, Variant::full, rng);
    randomize(a, rng, 0.3);
    const HoverBlockState sa = random_state(g, 1, rng);
    HoverBlockParams b = a;
    std::swap(b.h, b.v);
    std::swap(b.h2v_inner, b.v2h_inner);
    std::swap(b.h2v_outer, b.v2h_outer);
    HoverBlockState sb;
    sb.h = TokenSequence{sa.v->data, HStrips{sa.v->tokens()}};
    sb.v = TokenSequence{sa.h->data, VStrips{sa.h->tokens()}};
    sb.h2v = {Var::constant(transpose_grid(sa.v2h.data.value(), 4)), g.grid()};
    sb.v2h = {Var::constant(transpose_grid(sa.h2v.data.value(), 4)), g.grid()};
    const HoverBlockState oa = hover_block(sa, a, g, 1);
    const HoverBlockState ob = hover_block(sb, b, g, 1);
    check_close(ob.h->data.value(), oa.v->data.value(), 1e-12);
    check_close(ob.v->data.value(), oa.h->data.value(), 1e-12);
    check_close(ob.h2v.data.value(), transpose_grid(oa.v2h.data.value(), 4), 1e-12);
    check_close(ob.v2h.data.value(), transpose_grid(oa.h2v.data.value(), 4), 1e-12);
  }

  TEST_CASE("hover block matches finite differences at tiny geometry") {
    Rng rng(5);
    const TokenGeometry g{8, 8, 1, 2, 4};
    HoverBlockParams p = init_hover_block(4, Variant::full, rng);
    randomize(p, rng, 0.5);
    const HoverBlockState s = random_state(g, 2, rng);
    std::vector<std::pair<std::string, Var>> params;
    visit_params("blk", p, [&](const std::string& n, Var& v, ParamRole) { params.emplace_back(n, v); });
    std::vector<std::pair<std::size_t, std::size_t>> coords;
    for (std::size_t i = 0; i < params.size(); ++i) {
      for (std::size_t j = 0; j < params[i].second.value().size(); ++j) coords.emplace_back(i, j);
    }
    Rng probe_rng(6);
    const Tensor w1 = random_tensor({2, 16, 4}, probe_rng), w2 = random_tensor({2, 16, 4}, probe_rng);
    const Tensor w3 = random_tensor({2, 2, 4}, probe_rng), w4 = random_tensor({2, 2, 4}, probe_rng);
    auto loss = [&] {
      const HoverBlockState o = hover_block(s, p, g, 1);
      Var l = ops::add(ops::weighted_sum(o.h2v.data, w1), ops::weighted_sum(o.v2h.data, w2));
      l = ops::add(l, ops::weighted_sum(o.h->data, w3));
      return ops::add(l, ops::weighted_sum(o.v->data, w4));
    };
    const auto r = grad_check(loss, params, coords);
    INFO(r.worst);
    CHECK(r.max_rel_error < 1e-3);
  }

  TEST_CASE("stage shapes, determinism and batch independence") {
    Rng rng(7);
    {
      const TokenGeometry g{64, 64, 4, 2, 2};
      HoverStageParams p = init_hover_stage(g, 2, Variant::full, true, rng);
      NoGradGuard ng;
      const FeatureMap x{Var::constant(random_tensor({1, 64, 64, 4}, rng))};
      const StageOutput o = hover_stage(x, p, g, 2, false);
      CHECK(o.fused.data.shape() == Tensor::Shape{1, 64, 64, 8});
      CHECK(o.output.data.shape() == Tensor::Shape{1, 32, 32, 8});
      CHECK(o.patch_tokens == 1024);
      CHECK(o.hstrip_tokens == 32);
      CHECK(o.vstrip_tokens == 32);
    }
    const TokenGeometry g{8, 8, 32, 2, 2};
    HoverStageParams p = init_hover_stage(g, 2, Variant::full, true, rng);
    NoGradGuard ng;
    Tensor xs = random_tensor({2, 8, 8, 32}, rng);
    const StageOutput a = hover_stage({Var::constant(xs)}, p, g, 16, false);
    const StageOutput b = hover_stage({Var::constant(xs)}, p, g, 16, false);
    CHECK(a.output.data.shape() == Tensor::Shape{2, 4, 4, 64});
    CHECK(a.output.data.value().identical(b.output.data.value()));

    for (std::size_t i = 0; i < 8 * 8 * 32; ++i) xs[i] += 1.0;  // perturb sample 0 only
    const StageOutput c = hover_stage({Var::constant(xs)}, p, g, 16, false);
    const std::size_t half = c.output.data.value().size() / 2;
    for (std::size_t i = 0; i < half; ++i) REQUIRE(c.output.data.value()[half + i] == a.output.data.value()[half + i]);
    bool changed = false;
    for (std::size_t i = 0; i < half; ++i) changed = changed || c.output.data.value()[i] != a.output.data.value()[i];
    CHECK(changed);
  }

  TEST_CASE("stripped variants carry no strip parameters") {
    Rng rng(8);
    const TokenGeometry g{8, 8, 2, 2, 2};
    HoverStageParams p = init_hover_stage(g, 1, Variant::model_p, true, rng);
    CHECK_FALSE(p.hstrip);
    CHECK_FALSE(p.vstrip);
    visit_params("stage", p, [](const std::string& n, Var&, ParamRole) {
      CHECK(n.find("strip") == std::string::npos);
      CHECK(n.find(".h.") == std::string::npos);
      CHECK(n.find(".v.") == std::string::npos);
    });
    HoverStageParams pv = init_hover_stage(g, 1, Variant::model_p_v, true, rng);
    CHECK_FALSE(pv.hstrip);
    CHECK(pv.vstrip);
    NoGradGuard ng;
    const StageOutput o = hover_stage({Var::constant(random_tensor({1, 8, 8, 2}, rng))}, pv, g, 2, false);
    CHECK(o.hstrip_tokens == 0);
    CHECK(o.vstrip_tokens == 4);
  }
}
