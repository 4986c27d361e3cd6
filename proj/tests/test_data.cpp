#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <set>

#include "hovertrans/csv.hpp"
#include "hovertrans/data.hpp"
#include "hovertrans/error.hpp"
#include "test_support.hpp"

using namespace hovertrans;
using namespace hovertrans::testing;

namespace {

void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

ImageRecord stub(const std::string& id, int label, std::optional<std::string> patient = std::nullopt) {
  ImageRecord r;
  r.image_id = id;
  r.label = label;
  r.patient_id = std::move(patient);
  return r;
}

// Draws a bright frame `border` px thick on img.
void draw_frame(Image& img, std::size_t top, std::size_t left, std::size_t h, std::size_t w, std::size_t border) {
  for (std::size_t y = top; y < top + h; ++y)
    for (std::size_t x = left; x < left + w; ++x) {
      const bool edge = y < top + border || y >= top + h - border || x < left + border || x >= left + w - border;
      if (edge) img.at(y, x) = 255;
    }
}

Image textured(std::size_t h, std::size_t w, std::uint64_t seed) {
  Image img(h, w, 1);
  Rng rng(seed);
  std::uniform_int_distribution<int> d(20, 100);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(d(rng));
  return img;
}

}  // namespace

TEST_SUITE("data") {
  TEST_CASE("labels and BI-RADS parsing") {
    CHECK(parse_label("benign") == 0);
    CHECK(parse_label("Malignant") == 1);
    CHECK(parse_label("MALIGNANT") == 1);
    CHECK_THROWS_AS(parse_label("unknown"), ValidationError);
    CHECK(parse_birads("4a") == BiRads::b4a);
    CHECK(birads_name(BiRads::b4c) == "4C");
    CHECK(birads_bucket(BiRads::b3) == "2-3");
    CHECK(birads_bucket(BiRads::b4a) == "4-5");
    CHECK(birads_bucket(BiRads::b5) == "4-5");
    CHECK_THROWS_AS(parse_birads("6"), ValidationError);
  }

  TEST_CASE("manifest loading") {
    TempDir dir("manifest");
    write_png(dir / "a.png", Image(40, 48, 1, 10));
    write_png(dir / "b.png", Image(64, 64, 3, 200));
    write_text(dir / "m.csv", "image_path,label,patient_id,birads\na.png,benign,P1,3\nb.png,Malignant,,4B\n");
    const auto recs = load_manifest(dir / "m.csv", dir.path());
    REQUIRE(recs.size() == 2);
    CHECK(recs[0].label == 0);
    CHECK(recs[1].label == 1);
    CHECK(recs[0].image_id == "a.png");
    CHECK(recs[0].patient_id == "P1");
    CHECK_FALSE(recs[1].patient_id);
    CHECK(recs[1].birads == BiRads::b4b);
    CHECK(recs[0].image.height == 40);
    CHECK(recs[1].image.channels == 3);

    TempDir out("manifest_out");
    write_manifest(out / "m.csv", recs);
    const CsvTable t = read_csv(out / "m.csv");
    CHECK(t.rows.size() == 2);
    CHECK(t.rows[1][1] == "malignant");
  }

  TEST_CASE("manifest errors") {
    TempDir dir("manifest_err");
    write_png(dir / "a.png", Image(40, 40, 1, 10));
    write_text(dir / "missing.csv", "image_path,label\na.png,benign\nnope.png,benign\n");
    try {
      load_manifest(dir / "missing.csv", dir.path());
      FAIL("expected IngestionError");
    } catch (const IngestionError& e) {
      CHECK(std::string(e.what()).find("row 2") != std::string::npos);
    }
    write_text(dir / "label.csv", "image_path,label\na.png,unsure\n");
    CHECK_THROWS_AS(load_manifest(dir / "label.csv", dir.path()), ValidationError);
    write_text(dir / "dup.csv", "image_path,label\na.png,benign\na.png,malignant\n");
    CHECK_THROWS_AS(load_manifest(dir / "dup.csv", dir.path()), ValidationError);
    write_png(dir / "small.png", Image(16, 40, 1, 10));
    write_text(dir / "small.csv", "image_path,label\nsmall.png,benign\n");
    CHECK_THROWS_AS(load_manifest(dir / "small.csv", dir.path()), ValidationError);
    write_text(dir / "header.csv", "path,label\na.png,benign\n");
    CHECK_THROWS_AS(load_manifest(dir / "header.csv", dir.path()), ValidationError);
  }

  TEST_CASE("foreground frame crops to the interior") {
    Image img = textured(300, 300, 1);
    for (auto& p : img.pixels) p = 0;
    // 200 wide, 150 tall, top-left at row 40, col 60, 3 px border.
    Image inner = textured(144, 194, 2);
    for (std::size_t y = 0; y < 144; ++y)
      for (std::size_t x = 0; x < 194; ++x) img.at(43 + y, 63 + x) = inner.at(y, x);
    draw_frame(img, 40, 60, 150, 200, 3);
    const ForegroundResult r = extract_foreground(img);
    CHECK_FALSE(r.fallback);
    CHECK(r.box == Rect{43, 63, 144, 194});
    CHECK(r.image == inner);
    CHECK(r.confidence >= kForegroundMinConfidence);

    const ForegroundResult again = extract_foreground(r.image);
    CHECK(again.image == r.image);
  }

  TEST_CASE("foreground picks the larger rectangle") {
    Image img(300, 300, 1);
    draw_frame(img, 10, 10, 50, 50, 2);
    draw_frame(img, 150, 120, 100, 100, 2);
    const ForegroundResult r = extract_foreground(img);
    CHECK_FALSE(r.fallback);
    CHECK(r.box == Rect{152, 122, 96, 96});
  }

  TEST_CASE("uniform image falls back") {
    const Image img(120, 90, 1, 128);
    const ForegroundResult r = extract_foreground(img);
    CHECK(r.fallback);
    CHECK(r.image == img);
    CHECK(r.box == Rect{0, 0, 120, 90});
  }

  TEST_CASE("resize contracts") {
    const Image big(384, 512, 3, 7);
    const Image r = resize_image(big, 256);
    CHECK(r.height == 256);
    CHECK(r.width == 256);
    CHECK(r.channels == 3);
    const Image same = textured(256, 256, 3);
    CHECK(resize_image(same, 256) == same);
    const Image constant(100, 70, 1, 93);
    const Image up = resize_image(constant, 256);
    CHECK(std::all_of(up.pixels.begin(), up.pixels.end(), [](std::uint8_t v) { return v == 93; }));
    CHECK_THROWS_AS(resize_image(constant, 16), ConfigError);

    const Image src = textured(77, 131, 4);
    const auto [lo, hi] = std::minmax_element(src.pixels.begin(), src.pixels.end());
    for (std::size_t side : {32, 100, 256}) {
      const Image o = resize_image(src, side);
      const auto [olo, ohi] = std::minmax_element(o.pixels.begin(), o.pixels.end());
      CHECK(*olo + 1 >= *lo);
      CHECK(*ohi <= *hi + 1);
    }
  }

  TEST_CASE("folds of 2405 records") {
    std::vector<ImageRecord> recs;
    for (std::size_t i = 0; i < 2405; ++i) recs.push_back(stub("img" + std::to_string(i), i < 886 ? 0 : 1));
    std::size_t benign = 0;
    for (const auto& r : recs) benign += r.label == 0;
    CHECK(benign == 886);
    CHECK(recs.size() - benign == 1519);
    const FoldSplit s = make_folds(recs, 5, 17);
    CHECK(s.assignments.size() == 2405);
    std::vector<std::size_t> size(5, 0), mal(5, 0);
    for (const auto& r : recs) {
      const std::size_t f = s.assignments.at(r.image_id);
      REQUIRE(f < 5);
      ++size[f];
      mal[f] += r.label;
    }
    for (std::size_t f = 0; f < 5; ++f) {
      CHECK(size[f] == 481);
      CHECK(std::abs(static_cast<double>(mal[f]) / size[f] - 1519.0 / 2405.0) <= 0.05);
    }
    const FoldSplit again = make_folds(recs, 5, 17);
    CHECK(again.assignments == s.assignments);
  }

  TEST_CASE("small stratified folds and patient grouping") {
    std::vector<ImageRecord> recs;
    for (int i = 0; i < 10; ++i) recs.push_back(stub("r" + std::to_string(i), i % 2));
    const FoldSplit s = make_folds(recs, 5, 3);
    std::vector<std::array<int, 2>> count(5, {0, 0});
    for (const auto& r : recs) ++count[s.assignments.at(r.image_id)][r.label];
    for (const auto& c : count) CHECK(c == std::array<int, 2>{1, 1});

    std::vector<ImageRecord> grouped;
    for (int i = 0; i < 4; ++i) grouped.push_back(stub("p1_" + std::to_string(i), i % 2, "P1"));
    for (int i = 0; i < 8; ++i) grouped.push_back(stub("q" + std::to_string(i), i % 2, "Q" + std::to_string(i)));
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const FoldSplit g = make_folds(grouped, 2, seed);
      std::set<std::size_t> p1;
      for (int i = 0; i < 4; ++i) p1.insert(g.assignments.at("p1_" + std::to_string(i)));
      CHECK(p1.size() == 1);
    }

    std::vector<ImageRecord> few = {stub("a", 0), stub("b", 1), stub("c", 1), stub("d", 1)};
    CHECK_THROWS_AS(make_folds(few, 2, 0), ValidationError);
    CHECK_THROWS_AS(make_folds(recs, 1, 0), ValidationError);
  }

  TEST_CASE("fold file round trip") {
    TempDir dir("folds");
    std::vector<ImageRecord> recs;
    for (int i = 0; i < 12; ++i) recs.push_back(stub("x/" + std::to_string(i) + ".png", i % 2));
    const FoldSplit s = make_folds(recs, 3, 9);
    write_folds(dir / "f.csv", s);
    const FoldSplit back = read_folds(dir / "f.csv");
    CHECK(back.k == 3);
    CHECK(back.assignments == s.assignments);
  }

  TEST_CASE("augmentation contracts") {
    const Image x = orientation_fixture(64);
    Rng rng(5);
    CHECK(augment(x, AugmentConfig::none(), rng) == x);

    AugmentConfig flip = AugmentConfig::none();
    flip.p_hflip = 1.0;
    const Image f = augment(x, flip, rng);
    for (std::size_t r = 0; r < 64; ++r)
      for (std::size_t c = 0; c < 64; ++c) REQUIRE(f.at(r, c) == x.at(r, 63 - c));
    CHECK(flip_horizontal(flip_horizontal(x)) == x);

    // Every transform on: shape is kept and the vertical ramp is never inverted.
    AugmentConfig all;
    all.p_blur = all.p_noise = all.p_hflip = all.p_brightness_contrast = 1.0;
    for (int i = 0; i < 200; ++i) {
      const Image a = augment(x, all, rng);
      CHECK(a.height == 64);
      CHECK(a.width == 64);
      const Orientation o = read_orientation(a);
      CHECK(o.hflipped);
      CHECK_FALSE(o.vflipped);
    }

    AugmentConfig bad;
    bad.p_blur = 1.5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
  }

  TEST_CASE("augmentation draws four uniforms before any transform") {
    // With every probability 0 the stream advances by exactly four draws.
    Rng a(77), b(77);
    augment(orientation_fixture(32), AugmentConfig::none(), a);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (int i = 0; i < 4; ++i) unit(b);
    CHECK(a() == b());
  }

  TEST_CASE("hflip frequency and vertical audit") {
    const Image x = orientation_fixture(32);
    AugmentConfig cfg;
    Rng rng(123);
    std::size_t h = 0, v = 0;
    for (int i = 0; i < 10000; ++i) {
      const Orientation o = read_orientation(augment(x, cfg, rng));
      h += o.hflipped;
      v += o.vflipped;
    }
    CHECK(v == 0);
    CHECK(h >= 4800);
    CHECK(h <= 5200);
  }

  TEST_CASE("model input scaling") {
    Image gray(32, 32, 1, 255);
    gray.at(0, 0) = 0;
    Image rgb(32, 32, 3, 0);
    rgb.at(0, 0, 1) = 255;
    const std::vector<Image> imgs = {gray, rgb};
    const Tensor t = to_model_input(imgs, 32);
    CHECK(t.shape() == Tensor::Shape{2, 32, 32, 3});
    CHECK(t.at({0, 0, 0, 0}) == -1.0);
    CHECK(t.at({0, 0, 0, 2}) == -1.0);
    CHECK(t.at({0, 5, 5, 1}) == 1.0);
    CHECK(t.at({1, 0, 0, 0}) == -1.0);
    CHECK(t.at({1, 0, 0, 1}) == 1.0);
    const std::vector<Image> big = {Image(64, 48, 1, 0)};
    CHECK(to_model_input(big, 32).shape() == Tensor::Shape{1, 32, 32, 3});
  }
}
