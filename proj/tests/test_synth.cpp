#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "bright/synth.hpp"
#include "bright/tiling.hpp"

using namespace bright;

namespace {

SlideSpec spec_of(const std::string& cls, uint64_t seed, int px = 192, double frac = 0.5) {
  SlideSpec s;
  s.width_px = px;
  s.height_px = px;
  s.class_signal = cls;
  s.signal_fraction = frac;
  s.seed = seed;
  return s;
}

ImageRGB uniform_image(int w, int h, uint8_t r, uint8_t g, uint8_t b) {
  ImageRGB img(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) img.set(x, y, r, g, b);
  return img;
}

bool images_equal(const ImageRGB& a, const ImageRGB& b) {
  return a.width == b.width && a.height == b.height && a.data == b.data;
}

}  // namespace

TEST_CASE("slides are deterministic in the spec and sensitive to the seed") {
  const SyntheticSlide s1 = generate_synthetic_slide(spec_of("A", 5));
  const SyntheticSlide s2 = generate_synthetic_slide(spec_of("A", 5));
  const SyntheticSlide s3 = generate_synthetic_slide(spec_of("A", 6));
  CHECK(images_equal(s1.image, s2.image));
  CHECK(s1.mask.data == s2.mask.data);
  CHECK(!images_equal(s1.image, s3.image));
}

TEST_CASE("background is near-white, tissue is stained") {
  const SyntheticSlide s = generate_synthetic_slide(spec_of("A", 17));
  int64_t background = 0, tissue = 0;
  for (int y = 0; y < s.image.height; ++y) {
    for (int x = 0; x < s.image.width; ++x) {
      const double sat = saturation(s.image.at(x, y, 0), s.image.at(x, y, 1), s.image.at(x, y, 2));
      if (sat < 0.05) {
        ++background;
        CHECK(luminance(s.image.at(x, y, 0), s.image.at(x, y, 1), s.image.at(x, y, 2)) > 0.9);
      } else if (sat > 0.08) {
        ++tissue;
      }
    }
  }
  const double total = double(s.image.width) * s.image.height;
  // Tissue fraction is drawn from [0.60, 0.75].
  CHECK(tissue / total > 0.5);
  CHECK(tissue / total < 0.85);
  CHECK(background / total > 0.1);
}

TEST_CASE("mask area tracks the requested signal fraction") {
  for (double frac : {0.3, 0.6}) {
    const SyntheticSlide s = generate_synthetic_slide(spec_of("A", 23, 192, frac));
    int64_t mask_px = 0, tissue_px = 0;
    for (int y = 0; y < s.image.height; ++y) {
      for (int x = 0; x < s.image.width; ++x) {
        const double sat =
            saturation(s.image.at(x, y, 0), s.image.at(x, y, 1), s.image.at(x, y, 2));
        if (sat >= 0.05) ++tissue_px;
        if (s.mask.at(x, y) == 255) ++mask_px;
      }
    }
    REQUIRE(tissue_px > 0);
    CHECK(double(mask_px) / double(tissue_px) == doctest::Approx(frac).epsilon(0.2));
  }
  const SyntheticSlide all = generate_synthetic_slide(spec_of("A", 29, 128, 1.0));
  int64_t mask_px = 0;
  for (uint8_t m : all.mask.data) mask_px += m == 255 ? 1 : 0;
  CHECK(mask_px > 0);
  const SyntheticSlide none = generate_synthetic_slide(spec_of("A", 29, 128, 0.0));
  for (uint8_t m : none.mask.data) CHECK(m == 0);
}

TEST_CASE("class textures are separable by local variance, not by color") {
  // Fine dots ("A") produce higher 3x3 local variance than coarse dots ("B")
  // at matched stain; the margin must hold across independent slides.
  int wins = 0;
  for (uint64_t seed = 0; seed < 6; ++seed) {
    const SyntheticSlide a = generate_synthetic_slide(spec_of("A", 100 + seed, 160, 1.0));
    const SyntheticSlide b = generate_synthetic_slide(spec_of("B", 200 + seed, 160, 1.0));
    if (mean_local_variance(a.image, &a.mask) > mean_local_variance(b.image, &b.mask)) ++wins;
  }
  CHECK(wins == 6);
}

TEST_CASE("stain jitter varies across slides of the same class") {
  const SyntheticSlide s1 = generate_synthetic_slide(spec_of("A", 31));
  const SyntheticSlide s2 = generate_synthetic_slide(spec_of("A", 32));
  auto mean_red_in_tissue = [](const SyntheticSlide& s) {
    double sum = 0;
    int64_t n = 0;
    for (int y = 0; y < s.image.height; ++y) {
      for (int x = 0; x < s.image.width; ++x) {
        if (saturation(s.image.at(x, y, 0), s.image.at(x, y, 1), s.image.at(x, y, 2)) > 0.08) {
          sum += s.image.at(x, y, 0);
          ++n;
        }
      }
    }
    return sum / double(n);
  };
  CHECK(std::abs(mean_red_in_tissue(s1) - mean_red_in_tissue(s2)) > 0.5);
}

TEST_CASE("generator rejects bad specs") {
  SlideSpec s = spec_of("A", 1, 64);
  CHECK_THROWS_AS(generate_synthetic_slide(spec_of("A", 1, 32), 64), std::invalid_argument);
  s.signal_fraction = 1.5;
  CHECK_THROWS_AS(generate_synthetic_slide(s), std::invalid_argument);
  s.signal_fraction = 0.5;
  s.mpp = 0.0;
  CHECK_THROWS_AS(generate_synthetic_slide(s), std::invalid_argument);
}

TEST_CASE("unknown class labels map to a stable texture") {
  const auto t1 = synth_detail::class_texture("mystery");
  const auto t2 = synth_detail::class_texture("mystery");
  CHECK(t1.dot_spacing == t2.dot_spacing);
  CHECK(synth_detail::class_texture("A").dot_spacing == 2.6);
  CHECK(synth_detail::class_texture("B").dot_spacing == 9.0);
}

TEST_CASE("tissue filter separates stained from blank tiles") {
  CHECK(!tissue_mask(uniform_image(32, 32, 250, 250, 249), 0.08));
  CHECK(tissue_mask(uniform_image(32, 32, 220, 160, 200), 0.08));
  // Exactly 5% colored pixels is not enough; strictly more passes.
  ImageRGB img = uniform_image(40, 40, 250, 250, 250);
  for (int i = 0; i < 80; ++i) img.set(i % 40, i / 40, 200, 100, 150);  // 5%
  CHECK(!tissue_mask(img, 0.08));
  for (int i = 80; i < 96; ++i) img.set(i % 40, i / 40, 200, 100, 150);  // 6%
  CHECK(tissue_mask(img, 0.08));
}

TEST_CASE("tiling uses a floor grid with non-overlapping strides") {
  TileSpec spec;
  spec.tile_size = 224;
  spec.stride = 224;
  const ImageRGB big = uniform_image(448, 448, 210, 150, 190);
  const TileBag four = tile_slide(big, spec, "s1", "p1", 0.25);
  CHECK(four.size() == 4);
  CHECK(four.coords ==
        std::vector<std::pair<uint32_t, uint32_t>>{{0, 0}, {224, 0}, {0, 224}, {224, 224}});
  CHECK(four.slide_id == "s1");
  CHECK(four.patient_id == "p1");
  CHECK(four.mpp == 0.25);
  CHECK(four.tile_size == 224);

  // 500 px leaves a 52-px remainder strip that is dropped, not padded.
  const ImageRGB odd = uniform_image(500, 500, 210, 150, 190);
  CHECK(tile_slide(odd, spec).size() == 4);
  const ImageRGB wide = uniform_image(450, 300, 210, 150, 190);
  CHECK(tile_slide(wide, spec).size() == 2);
}

TEST_CASE("tiles are exact crops of the source image") {
  const SyntheticSlide s = generate_synthetic_slide(spec_of("B", 77, 192));
  TileSpec spec;
  spec.tile_size = 64;
  spec.stride = 64;
  const TileBag bag = tile_slide(s.image, spec, "s", "p");
  REQUIRE(!bag.empty());
  for (size_t i = 0; i < bag.size(); ++i) {
    const auto [x, y] = bag.coords[i];
    CHECK(x % 64 == 0);
    CHECK(y % 64 == 0);
    const ImageRGB ref = crop(s.image, int(x), int(y), 64, 64);
    CHECK(bag.tiles[i].data == ref.data);
  }
}

TEST_CASE("blank slides yield an empty bag, undersized slides throw") {
  TileSpec spec;
  const ImageRGB blank = uniform_image(256, 256, 250, 250, 250);
  CHECK(tile_slide(blank, spec).empty());
  const ImageRGB small = uniform_image(32, 32, 210, 150, 190);
  CHECK_THROWS_AS(tile_slide(small, spec), std::invalid_argument);
  TileSpec overlapping;
  overlapping.stride = 32;
  CHECK_THROWS_AS(tile_slide(blank, overlapping), std::invalid_argument);
  TileSpec bad_thr;
  bad_thr.tissue_threshold = 1.5;
  CHECK_THROWS_AS(tile_slide(blank, bad_thr), std::invalid_argument);
}

TEST_CASE("local variance statistic responds to granularity") {
  // A checkerboard has maximal 3x3 variance; a flat image has none.
  ImageRGB flat = uniform_image(32, 32, 128, 128, 128);
  CHECK(mean_local_variance(flat) < 1e-9);
  ImageRGB checker(32, 32);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) {
      const uint8_t v = (x + y) % 2 ? 255 : 0;
      checker.set(x, y, v, v, v);
    }
  CHECK(mean_local_variance(checker) > mean_local_variance(flat));
}
