#include <doctest.h>

#include <cmath>
#include <numbers>
#include <set>

#include "hovertrans/error.hpp"
#include "hovertrans/synthetic.hpp"
#include "hovertrans/train.hpp"
#include "test_support.hpp"

using namespace hovertrans;
using namespace hovertrans::testing;

namespace {

std::vector<ImageRecord> phantoms(std::size_t count, std::uint64_t seed) {
  SyntheticConfig c;
  c.count = count;
  c.side = 32;
  c.seed = seed;
  return make_layered_dataset(c);
}

TrainConfig quick(std::size_t epochs) {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = 8;
  t.base_lr = 3e-3;
  t.warmup_epochs = epochs > 2 ? 2 : 0;
  t.augment = AugmentConfig::none();
  return t;
}

}  // namespace

TEST_SUITE("train") {
  TEST_CASE("schedule endpoints and continuity") {
    TrainConfig c;  // 250 epochs, 10 warm-up, base 1e-4
    const std::size_t spe = 7;
    CHECK(lr_at(0, spe, c) == 0.0);
    CHECK(lr_at(10 * spe, spe, c) == 1e-4);
    CHECK(lr_at(250 * spe, spe, c) == 0.0);
    CHECK(lr_at(250 * spe + 5, spe, c) == 0.0);
    CHECK(std::abs(lr_at(10 * spe - 1, spe, c) - 1e-4) < 1e-4 / (10 * spe) + 1e-18);
    const double last_progress = (240.0 * spe - 1.0) / (240.0 * spe);
    CHECK(lr_at(250 * spe - 1, spe, c) ==
          doctest::Approx(1e-4 * 0.5 * (1.0 + std::cos(std::numbers::pi * last_progress))).epsilon(1e-9));
    CHECK(lr_at(250 * spe - 1, spe, c) > 0.0);
    // Midpoint of the cosine phase is half the peak.
    CHECK(lr_at(130 * spe, spe, c) == doctest::Approx(5e-5).epsilon(1e-12));
    double prev = lr_at(10 * spe, spe, c);
    for (std::size_t s = 10 * spe + 1; s <= 250 * spe; ++s) {
      const double cur = lr_at(s, spe, c);
      REQUIRE(cur <= prev);
      prev = cur;
    }
    CHECK_THROWS_AS(lr_at(0, 0, c), ConfigError);
  }

  TEST_CASE("config validation") {
    TrainConfig c;
    c.warmup_epochs = c.epochs;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = {};
    c.batch_size = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
  }

  TEST_CASE("decoupled decay shrinks a zero-gradient weight geometrically") {
    ParamRef w{"w", Var::parameter(Tensor({3}, {1.5, -2.0, 0.25})), true};
    ParamRef n{"norm", Var::parameter(Tensor({2}, {1.0, 3.0})), false};
    const std::vector<ParamRef> params{w, n};
    AdamW opt(0.9, 0.999, 1e-8, 0.1);
    const double lr = 1e-3;
    const int k = 25;
    for (int i = 0; i < k; ++i) opt.step(params, lr);
    CHECK(opt.steps() == k);
    const double factor = std::pow(1.0 - lr * 0.1, k);
    CHECK(w.param.value()[0] == doctest::Approx(1.5 * factor).epsilon(1e-14));
    CHECK(w.param.value()[1] == doctest::Approx(-2.0 * factor).epsilon(1e-14));
    CHECK(n.param.value()[0] == 1.0);
    CHECK(n.param.value()[1] == 3.0);
  }

  TEST_CASE("first AdamW step moves by lr * g / (|g| + eps)") {
    Var p = Var::parameter(Tensor({2}, {0.5, -0.5}));
    backward(ops::weighted_sum(p, Tensor({2}, {2.0, -0.25})));
    const std::vector<ParamRef> params{{"p", p, false}};
    AdamW opt(0.9, 0.999, 1e-8, 0.1);
    opt.step(params, 0.01);
    CHECK(p.value()[0] == doctest::Approx(0.5 - 0.01 * 2.0 / (2.0 + 1e-8)).epsilon(1e-14));
    CHECK(p.value()[1] == doctest::Approx(-0.5 + 0.01 * 0.25 / (0.25 + 1e-8)).epsilon(1e-14));
  }

  TEST_CASE("decay applies to weights and positional tables only") {
    HoverTransNet m = build_model(ModelConfig::tiny(), 0);
    for (const ParamRef& p : collect_params(m)) {
      const bool bias_or_norm = p.name.find("bias") != std::string::npos || p.name.find("norm") != std::string::npos ||
                                p.name.find(".bn") != std::string::npos;
      if (p.name.find(".pos") != std::string::npos) CHECK(p.decay);
      if (bias_or_norm) CHECK_FALSE(p.decay);
    }
  }

  TEST_CASE("overlapping train and validation ids are rejected") {
    const auto recs = phantoms(8, 1);
    HoverTransNet m = build_model(ModelConfig::tiny(), 0);
    CHECK_THROWS_AS(train_fold(m, std::span(recs).first(5), std::span(recs).subspan(4), quick(1)), ValidationError);
  }

  TEST_CASE("non-finite loss names the step") {
    const auto recs = phantoms(8, 2);
    HoverTransNet m = build_model(ModelConfig::tiny(), 0);
    m.head.bias.mutable_value()[0] = std::nan("");
    try {
      train_fold(m, recs, {}, quick(1));
      FAIL("expected NumericError");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("step") != std::string::npos);
    }
  }

  TEST_CASE("same seed gives identical runs and validation never enters a batch") {
    const auto recs = phantoms(24, 3);
    const auto train = std::span(recs).first(16);
    const auto val = std::span(recs).subspan(16);
    std::set<std::string> val_ids;
    for (const auto& r : val) val_ids.insert(r.image_id);
    TrainConfig cfg = quick(3);
    cfg.augment = AugmentConfig{};
    std::size_t batches = 0, leaked = 0;
    TrainHooks hooks;
    hooks.on_batch = [&](std::size_t, std::span<const std::string> ids) {
      ++batches;
      for (const auto& id : ids) leaked += val_ids.count(id);
    };
    TrainResult a = train_fold(build_model(ModelConfig::tiny(), 4), train, val, cfg, hooks);
    TrainResult b = train_fold(build_model(ModelConfig::tiny(), 4), train, val, cfg);
    CHECK(batches == 3 * 2);
    CHECK(leaked == 0);
    REQUIRE(a.log.size() == 3);
    CHECK(a.log.back().train_loss == b.log.back().train_loss);
    CHECK(*a.log.back().val_loss == *b.log.back().val_loss);
    REQUIRE(a.val_scores.size() == 8);
    for (std::size_t i = 0; i < 8; ++i) CHECK(a.val_scores[i].score == b.val_scores[i].score);
    const nlohmann::json j = to_json(a.log.front());
    CHECK(j.contains("epoch"));
    CHECK(j.contains("lr"));
    CHECK(j.contains("train_loss"));
    CHECK(j.contains("val_loss"));
  }

  TEST_CASE("cross-validation scores partition the records") {
    const auto recs = phantoms(24, 5);
    const FoldSplit split = make_folds(recs, 3, 6);
    TempDir dir("cv");
    CrossValidationOptions opt;
    opt.output_dir = dir.path();
    const CrossValidationResult r = cross_validate(recs, split, ModelConfig::tiny(), quick(1), opt);
    REQUIRE(r.scores.size() == recs.size());
    std::set<std::string> ids;
    for (const auto& row : r.scores) {
      ids.insert(row.image_id);
      CHECK(row.fold == split.assignments.at(row.image_id));
      CHECK((row.score >= 0.0 && row.score <= 1.0));
    }
    CHECK(ids.size() == recs.size());
    CHECK(r.report.folds.size() == 3);
    for (const char* f : {"fold0.ckpt", "fold2_scores.csv", "fold1_log.jsonl", "scores.csv", "metrics.json"}) {
      CHECK(std::filesystem::exists(dir / f));
    }
    CHECK(read_scores(dir / "scores.csv").size() == recs.size());
  }

  TEST_CASE("tiny model memorizes 32 phantoms") {
    const auto recs = phantoms(32, 7);
    TrainResult r = train_fold(build_model(ModelConfig::tiny(), 8), recs, {}, quick(100));
    const Evaluation e = evaluate_model(r.model, recs);
    INFO("final loss " << r.log.back().train_loss);
    CHECK(e.accuracy >= 0.95);
  }
}
