#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "hovertrans/error.hpp"
#include "hovertrans/interpret.hpp"
#include "hovertrans/synthetic.hpp"
#include "test_support.hpp"

using namespace hovertrans;
using namespace hovertrans::testing;

namespace {

Heatmap grid(std::size_t h, std::size_t w, std::vector<double> v) { return Heatmap{h, w, std::move(v), false}; }

ModelConfig tiny64() {
  ModelConfig c = ModelConfig::tiny();
  c.input_side = 64;
  return c;
}

Image phantom(std::size_t side, std::uint64_t seed) {
  Rng rng(seed);
  return layered_phantom(true, side, 4, 10.0, rng);
}

}  // namespace

TEST_SUITE("interpret") {
  TEST_CASE("method names") {
    CHECK(parse_method("activation") == HeatmapMethod::activation);
    CHECK(parse_method(method_name(HeatmapMethod::gradcam)) == HeatmapMethod::gradcam);
    CHECK_THROWS_AS(parse_method("rollout"), ConfigError);
  }

  TEST_CASE("normalization") {
    const Heatmap c = normalize(grid(2, 2, {3.0, 3.0, 3.0, 3.0}));
    CHECK(c.constant);
    for (double v : c.values) CHECK(v == 0.5);

    const Heatmap n = normalize(grid(2, 3, {2.0, -1.0, 5.0, 0.5, 1.0, 4.0}));
    CHECK_FALSE(n.constant);
    CHECK(*std::min_element(n.values.begin(), n.values.end()) == 0.0);
    CHECK(*std::max_element(n.values.begin(), n.values.end()) == 1.0);
    CHECK(n.at(0, 0) == doctest::Approx(0.5));
    const Heatmap again = normalize(n);
    CHECK(again.values == n.values);
  }

  TEST_CASE("single-cell locality and upsampled shape") {
    std::vector<double> v(16, 0.0);
    v[1 * 4 + 2] = 1.0;
    const Heatmap up = normalize(upsample_bilinear(grid(4, 4, v), 256, 256));
    CHECK(up.height == 256);
    CHECK(up.width == 256);
    const auto it = std::max_element(up.values.begin(), up.values.end());
    const std::size_t idx = static_cast<std::size_t>(it - up.values.begin());
    const std::size_t r = idx / 256, c = idx % 256;
    CHECK((r >= 64 && r < 128));
    CHECK((c >= 128 && c < 192));
    CHECK(*it == 1.0);

    // Upsampling a constant map stays constant; corners reproduce the source corners.
    const Heatmap flat = upsample_bilinear(grid(3, 3, std::vector<double>(9, 0.25)), 7, 11);
    for (double x : flat.values) CHECK(x == doctest::Approx(0.25).epsilon(1e-15));
    const Heatmap corners = upsample_bilinear(grid(2, 2, {0.0, 1.0, 2.0, 3.0}), 8, 8);
    CHECK(corners.at(0, 0) == 0.0);
    CHECK(corners.at(7, 7) == 3.0);
  }

  TEST_CASE("model heatmaps") {
    HoverTransNet m = build_model(tiny64(), 3);
    const Image img = phantom(64, 4);
    const Heatmap raw = raw_heatmap(m, img);
    CHECK(raw.height == 2);
    CHECK(raw.width == 2);
    const Heatmap h = heatmap(m, img);
    CHECK(h.height == 64);
    CHECK(h.width == 64);
    if (!h.constant) {
      CHECK(*std::min_element(h.values.begin(), h.values.end()) == 0.0);
      CHECK(*std::max_element(h.values.begin(), h.values.end()) == 1.0);
    }
    CHECK(heatmap(m, img).values == h.values);

    const Heatmap g = heatmap(m, img, HeatmapMethod::gradcam);
    CHECK(g.height == 64);
    for (double x : g.values) CHECK((x >= 0.0 && x <= 1.0));
    CHECK(heatmap(m, img, HeatmapMethod::gradcam).values == g.values);

    CHECK_THROWS_AS(heatmap(m, phantom(32, 5)), ValidationError);

    // The 32 px tiny model ends in a 1x1 map: flat by construction.
    HoverTransNet t = build_model(ModelConfig::tiny(), 3);
    const Heatmap flat = heatmap(t, phantom(32, 6));
    CHECK(flat.constant);
    for (double x : flat.values) CHECK(x == 0.5);
  }

  TEST_CASE("heatmap survives a checkpoint round trip bit for bit") {
    TempDir dir("hm");
    HoverTransNet m = build_model(tiny64(), 8);
    save_checkpoint(dir / "m.ckpt", m);
    LoadedCheckpoint l = load_checkpoint(dir / "m.ckpt");
    const Image img = phantom(64, 9);
    CHECK(heatmap(m, img).values == heatmap(l.model, img).values);
  }

  TEST_CASE("overlay blending") {
    Image img(16, 16, 1);
    std::vector<double> v(256);
    for (std::size_t i = 0; i < 256; ++i) {
      img.pixels[i] = static_cast<std::uint8_t>((i * 37) % 256);
      v[i] = static_cast<double>((i * 11) % 256) / 255.0;
    }
    const Heatmap map = grid(16, 16, v);
    const Image a0 = overlay(img, map, 0.0);
    const Image a1 = overlay(img, map, 1.0);
    const Image col = colorize(map);
    CHECK(a0.channels == 3);
    for (std::size_t i = 0; i < 256; ++i)
      for (std::size_t c = 0; c < 3; ++c) REQUIRE(a0.pixels[i * 3 + c] == img.pixels[i]);
    CHECK(a1 == col);
    const Image half = overlay(img, map, 0.5);
    for (std::size_t i = 0; i < half.pixels.size(); ++i) {
      REQUIRE(std::abs(half.pixels[i] - (a0.pixels[i] + a1.pixels[i]) / 2.0) <= 1.0);
    }
    Image prev = a0;
    for (int step = 1; step <= 10; ++step) {
      const Image cur = overlay(img, map, step / 10.0);
      for (std::size_t i = 0; i < cur.pixels.size(); ++i) {
        if (a1.pixels[i] >= a0.pixels[i]) {
          REQUIRE(cur.pixels[i] >= prev.pixels[i]);
        } else {
          REQUIRE(cur.pixels[i] <= prev.pixels[i]);
        }
      }
      prev = cur;
    }
    // RGB input is reduced to gray before blending.
    Image rgb(16, 16, 3, 90);
    CHECK(overlay(rgb, map, 0.0).pixels[0] == 90);

    CHECK_THROWS_AS(overlay(img, grid(8, 8, std::vector<double>(64, 0.0)), 0.5), ValidationError);
    CHECK_THROWS_AS(overlay(img, map, 1.5), ValidationError);
    CHECK_THROWS_AS(overlay(img, map, -0.1), ValidationError);
  }

  TEST_CASE("lookup table rendering") {
    const auto& lut = colormap_lut();
    CHECK(lut.size() == 256);
    CHECK(lut[0] != lut[255]);
    const Image c = colorize(grid(1, 2, {0.0, 1.0}));
    CHECK(c.pixels[0] == lut[0][0]);
    CHECK(c.pixels[2] == lut[0][2]);
    CHECK(c.pixels[3] == lut[255][0]);
    CHECK(c.pixels[5] == lut[255][2]);
    const nlohmann::json s = heatmap_sidecar("x.png", "abc", HeatmapMethod::gradcam, 0.4);
    CHECK(s.at("method") == "gradcam");
    CHECK(s.at("checkpoint_id") == "abc");
  }
}
