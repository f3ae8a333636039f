#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <atomic>
#include <filesystem>
#include <set>

#include "bright/heatmap.hpp"
#include "bright/manifest.hpp"
#include "bright/splits.hpp"

using namespace bright;

namespace {

std::string temp_path(const std::string& stem) {
  static std::atomic<int> counter{0};
  return (std::filesystem::temp_directory_path() /
          (stem + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++)))
      .string();
}

std::vector<SlideRecord> demo_records() {
  std::vector<SlideRecord> recs;
  for (int i = 0; i < 6; ++i) {
    SlideRecord r;
    r.patient_id = "P" + std::to_string(i / 2);  // two slides per patient
    r.slide_id = "S" + std::to_string(i);
    r.image_path = "img/" + r.slide_id + ".png";
    r.mask_path = i % 2 ? "mask/" + r.slide_id + ".png" : "";
    r.mpp = 0.25 * (i + 1);
    r.role = i < 2 ? "pretrain" : "downstream-train";
    r.labels["grade"] = std::to_string(i % 3);
    r.labels["note"] = "free, text " + std::to_string(i);
    recs.push_back(r);
  }
  return recs;
}

// Patients with controlled slide counts and labels for split tests.
std::vector<SlideRecord> cohort(int n_patients, int slides_per_patient, int n_classes) {
  std::vector<SlideRecord> recs;
  for (int p = 0; p < n_patients; ++p) {
    for (int s = 0; s < slides_per_patient; ++s) {
      SlideRecord r;
      r.patient_id = "P" + std::to_string(p);
      r.slide_id = "P" + std::to_string(p) + "_S" + std::to_string(s);
      r.image_path = r.slide_id + ".png";
      r.labels["y"] = std::to_string(p % n_classes);
      recs.push_back(r);
    }
  }
  return recs;
}

}  // namespace

TEST_CASE("manifest round-trips records and label columns") {
  const auto recs = demo_records();
  const std::string path = temp_path("manifest") + ".csv";
  write_manifest(path, recs, {"grade", "note"});
  std::vector<std::string> cols;
  const auto back = read_manifest(path, &cols);
  CHECK(cols == std::vector<std::string>{"grade", "note"});
  REQUIRE(back.size() == recs.size());
  for (size_t i = 0; i < recs.size(); ++i) {
    CHECK(back[i].patient_id == recs[i].patient_id);
    CHECK(back[i].slide_id == recs[i].slide_id);
    CHECK(back[i].image_path == recs[i].image_path);
    CHECK(back[i].mask_path == recs[i].mask_path);
    CHECK(back[i].mpp == doctest::Approx(recs[i].mpp));
    CHECK(back[i].role == recs[i].role);
    CHECK(back[i].labels.at("grade") == recs[i].labels.at("grade"));
    CHECK(back[i].labels.at("note") == recs[i].labels.at("note"));  // quoted comma survived
  }
  std::filesystem::remove(path);
}

TEST_CASE("typed label access with named errors") {
  SlideRecord r;
  r.slide_id = "S9";
  r.labels["grade"] = "2";
  r.labels["time"] = "3.5";
  r.labels["junk"] = "2x";
  CHECK(label_of(r, "grade") == "2");
  CHECK(int_label(r, "grade") == 2);
  CHECK(double_label(r, "time") == doctest::Approx(3.5));
  CHECK_THROWS_WITH_AS(label_of(r, "missing"), doctest::Contains("missing label column"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(int_label(r, "junk"), doctest::Contains("not an integer"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(double_label(r, "junk"), doctest::Contains("not a number"),
                       std::invalid_argument);
}

TEST_CASE("manifest validation rejects malformed inputs") {
  const std::string path = temp_path("badmanifest") + ".csv";
  auto write_raw = [&](const std::string& text) {
    std::ofstream f(path);
    f << text;
  };
  write_raw("patient_id,slide_id\nP1,S1\n");  // image_path missing
  CHECK_THROWS_WITH_AS(read_manifest(path), doctest::Contains("image_path"),
                       std::invalid_argument);
  write_raw("patient_id,slide_id,image_path,role\nP1,S1,a.png,teacher\n");
  CHECK_THROWS_WITH_AS(read_manifest(path), doctest::Contains("unknown role 'teacher'"),
                       std::invalid_argument);
  write_raw("patient_id,slide_id,image_path\nP1,,a.png\n");
  CHECK_THROWS_WITH_AS(read_manifest(path), doctest::Contains("row 2"), std::invalid_argument);
  write_raw("patient_id,slide_id,image_path\nP1,S1,a.png\nP2,S1,b.png\n");
  CHECK_THROWS_WITH_AS(read_manifest(path), doctest::Contains("duplicate slide_id"),
                       std::invalid_argument);
  // Role column optional; mpp defaults when blank.
  write_raw("patient_id,slide_id,image_path,mpp\nP1,S1,a.png,\n");
  const auto recs = read_manifest(path);
  CHECK(recs[0].mpp == 0.5);
  CHECK(recs[0].role.empty());
  std::filesystem::remove(path);
}

TEST_CASE("role audit flags pretrain slides reused for evaluation") {
  auto recs = demo_records();
  CHECK(role_overlap_violations(recs).empty());
  CHECK_NOTHROW(audit_roles(recs));
  // Same slide id listed under both pretrain and a downstream role.
  SlideRecord dup = recs[0];
  dup.role = "internal-val";
  recs.push_back(dup);
  const auto bad = role_overlap_violations(recs);
  REQUIRE(bad.size() == 1);
  CHECK(bad[0] == recs[0].slide_id);
  CHECK_THROWS_WITH_AS(audit_roles(recs), doctest::Contains("role audit"), std::invalid_argument);
}

TEST_CASE("bag index round-trip and duplicate rejection") {
  const std::string path = temp_path("bagindex") + ".csv";
  write_bag_index(path, {{"S1", "bags/S1.brte"}, {"S2", "bags/S2.brte"}});
  const auto idx = read_bag_index(path);
  CHECK(idx.size() == 2);
  CHECK(idx.at("S1") == "bags/S1.brte");
  write_bag_index(path, {{"S1", "a"}, {"S1", "b"}});
  CHECK_THROWS_WITH_AS(read_bag_index(path), doctest::Contains("duplicate"),
                       std::invalid_argument);
  {
    std::ofstream f(path);
    f << "foo,bar\n1,2\n";
  }
  CHECK_THROWS_WITH_AS(read_bag_index(path), doctest::Contains("not a bag index"),
                       std::invalid_argument);
  std::filesystem::remove(path);
}

TEST_CASE("holdout split keeps patients whole and hits the fraction") {
  const auto recs = cohort(20, 3, 2);
  const SplitAssignment split = patient_level_split(recs, 0.75, 42);
  int64_t train_slides = 0, val_slides = 0;
  for (const auto& r : recs) {
    (split.group_of(r) == 0 ? train_slides : val_slides) += 1;
  }
  CHECK(train_slides + val_slides == 60);
  // Accurate to within one patient (3 slides).
  CHECK(std::abs(double(train_slides) - 45.0) <= 3.0);
  CHECK(val_slides > 0);

  // Same patient, same group, by construction of the map.
  for (const auto& r : recs) CHECK(split.group_of(r) == split.group_of_patient(r.patient_id));

  // Deterministic under the seed.
  const SplitAssignment again = patient_level_split(recs, 0.75, 42);
  CHECK(again.patient_to_group == split.patient_to_group);
  const SplitAssignment other = patient_level_split(recs, 0.75, 43);
  CHECK(other.patient_to_group != split.patient_to_group);

  // Extreme fractions still leave both sides non-empty.
  const SplitAssignment hi = patient_level_split(recs, 0.999, 1);
  int val_patients = 0;
  for (const auto& [id, g] : hi.patient_to_group) val_patients += g;
  CHECK(val_patients >= 1);

  CHECK_THROWS_AS(patient_level_split(recs, 0.0, 1), std::invalid_argument);
  CHECK_THROWS_AS(patient_level_split(recs, 1.0, 1), std::invalid_argument);
  CHECK_THROWS_AS(patient_level_split({recs[0]}, 0.5, 1), std::invalid_argument);
  CHECK_THROWS_AS(split.group_of_patient("nobody"), std::invalid_argument);
}

TEST_CASE("stratified k-fold partitions patients with balanced labels") {
  const auto recs = cohort(30, 2, 2);  // 15 patients per class
  const int k = 5;
  const auto folds = kfold_by_patient(recs, k, 7, "y");
  REQUIRE(folds.size() == size_t(k));

  // Every patient is validation in exactly one fold.
  std::map<std::string, int> val_count;
  for (const auto& fold : folds) {
    for (const auto& [pid, g] : fold.patient_to_group) {
      if (g == 1) ++val_count[pid];
    }
  }
  CHECK(val_count.size() == 30);
  for (const auto& [pid, c] : val_count) CHECK(c == 1);

  // Per-fold class balance: 15 patients / 5 folds = exactly 3 per class.
  for (const auto& fold : folds) {
    std::map<int, int> per_class;
    for (const auto& r : recs) {
      if (fold.group_of(r) == 1 && r.slide_id.ends_with("_S0")) {
        ++per_class[int_label(r, "y")];
      }
    }
    CHECK(per_class[0] == 3);
    CHECK(per_class[1] == 3);
  }

  // Deterministic; unstratified variant also partitions cleanly.
  const auto again = kfold_by_patient(recs, k, 7, "y");
  for (int f = 0; f < k; ++f) {
    CHECK(again[size_t(f)].patient_to_group == folds[size_t(f)].patient_to_group);
  }
  const auto plain = kfold_by_patient(recs, 3, 7);
  std::map<std::string, int> plain_count;
  for (const auto& fold : plain) {
    for (const auto& [pid, g] : fold.patient_to_group) plain_count[pid] += g;
  }
  for (const auto& [pid, c] : plain_count) CHECK(c == 1);

  CHECK_THROWS_AS(kfold_by_patient(recs, 1, 7), std::invalid_argument);
  CHECK_THROWS_WITH_AS(kfold_by_patient(cohort(3, 1, 2), 5, 7), doctest::Contains("exceeds"),
                       std::invalid_argument);
}

TEST_CASE("leakage audit spots split-straddling patients") {
  const auto recs = cohort(4, 2, 2);
  std::map<std::string, int> clean;
  for (const auto& r : recs) clean[r.slide_id] = r.patient_id == "P0" || r.patient_id == "P1" ? 0 : 1;
  CHECK(patient_leakage_violations(recs, clean).empty());
  CHECK_NOTHROW(audit_patient_leakage(recs, clean));

  std::map<std::string, int> leaky = clean;
  leaky["P2_S1"] = 0;  // P2's other slide stays in group 1
  const auto bad = patient_leakage_violations(recs, leaky);
  REQUIRE(bad.size() == 1);
  CHECK(bad[0] == "P2");
  CHECK_THROWS_WITH_AS(audit_patient_leakage(recs, leaky), doctest::Contains("P2"),
                       std::invalid_argument);

  std::map<std::string, int> partial = clean;
  partial.erase("P0_S0");
  CHECK_THROWS_WITH_AS(patient_leakage_violations(recs, partial),
                       doctest::Contains("no assignment"), std::invalid_argument);
}

TEST_CASE("attention csv round-trips at full precision") {
  const std::string path = temp_path("attn") + ".csv";
  std::vector<AttentionRow> rows = {{0, 0, 0.123456789}, {224, 0, 1e-9}, {0, 224, 0.5}};
  write_attention_csv(path, "S42", rows);
  std::string id;
  const auto back = read_attention_csv(path, &id);
  CHECK(id == "S42");
  REQUIRE(back.size() == rows.size());
  for (size_t i = 0; i < rows.size(); ++i) {
    CHECK(back[i].x == rows[i].x);
    CHECK(back[i].y == rows[i].y);
    CHECK(back[i].attention == doctest::Approx(rows[i].attention).epsilon(1e-9));
  }
  {
    std::ofstream f(path);
    f << "slide_id,x,y,attention\nA,0,0,0.5\nB,32,0,0.5\n";
  }
  CHECK_THROWS_WITH_AS(read_attention_csv(path, &id), doctest::Contains("mixed slide_ids"),
                       std::invalid_argument);
  {
    std::ofstream f(path);
    f << "a,b\n1,2\n";
  }
  CHECK_THROWS_WITH_AS(read_attention_csv(path), doctest::Contains("not an attention CSV"),
                       std::invalid_argument);
  std::filesystem::remove(path);
}

TEST_CASE("colormap endpoints and clamping") {
  uint8_t r, g, b;
  colormap_heat(0.0, &r, &g, &b);
  CHECK(int(r) == 0);
  CHECK(int(g) == 0);
  CHECK(int(b) == 255);
  colormap_heat(1.0 / 3.0, &r, &g, &b);
  CHECK(int(r) == 0);
  CHECK(int(g) == 255);
  CHECK(int(b) == 255);
  colormap_heat(2.0 / 3.0, &r, &g, &b);
  CHECK(int(r) == 255);
  CHECK(int(g) == 255);
  CHECK(int(b) == 0);
  colormap_heat(1.0, &r, &g, &b);
  CHECK(int(r) == 255);
  CHECK(int(g) == 0);
  CHECK(int(b) == 0);
  uint8_t r2, g2, b2;
  colormap_heat(-5.0, &r, &g, &b);
  colormap_heat(0.0, &r2, &g2, &b2);
  CHECK(r == r2);
  colormap_heat(7.0, &r, &g, &b);
  colormap_heat(1.0, &r2, &g2, &b2);
  CHECK(r == r2);
}

TEST_CASE("heatmap rendering paints normalized tile rectangles") {
  // 8x8 slide, tile 4: grid positions (0,0), (4,0), (0,4); (4,4) left out.
  std::vector<AttentionRow> rows = {{0, 0, 0.1}, {4, 0, 0.9}, {0, 4, 0.5}};
  const ImageRGB img = render_heatmap(rows, 8, 8, 4);
  CHECK(img.width == 8);
  CHECK(img.height == 8);
  // Min tile -> t = 0 -> blue; max tile -> red; absent tile -> background.
  CHECK(int(img.at(0, 0, 2)) == 255);
  CHECK(int(img.at(0, 0, 0)) == 0);
  CHECK(int(img.at(5, 1, 0)) == 255);
  CHECK(int(img.at(5, 1, 2)) == 0);
  CHECK(int(img.at(6, 6, 0)) == 255);
  CHECK(int(img.at(6, 6, 1)) == 255);
  CHECK(int(img.at(6, 6, 2)) == 255);
  // Mid tile uses the normalized midpoint of the map.
  uint8_t mr, mg, mb;
  colormap_heat(0.5, &mr, &mg, &mb);
  CHECK(img.at(1, 5, 0) == mr);
  CHECK(img.at(1, 5, 1) == mg);
  CHECK(img.at(1, 5, 2) == mb);

  // Constant attention collapses to the midpoint color everywhere painted.
  const ImageRGB flat = render_heatmap({{0, 0, 0.3}, {4, 0, 0.3}}, 8, 8, 4);
  CHECK(flat.at(0, 0, 0) == mr);
  CHECK(flat.at(5, 0, 1) == mg);

  // Scale shrinks the raster with floor geometry.
  const ImageRGB half = render_heatmap(rows, 8, 8, 4, 0.5);
  CHECK(half.width == 4);
  CHECK(half.height == 4);
  CHECK(int(half.at(0, 0, 2)) == 255);  // blue tile now covers [0,2)x[0,2)
  CHECK(int(half.at(2, 0, 0)) == 255);  // red tile at [2,4)x[0,2)

  // Empty rows: clean background.
  const ImageRGB none = render_heatmap({}, 8, 8, 4);
  CHECK(int(none.at(3, 3, 0)) == 255);
}

TEST_CASE("heatmap rendering blends over a thumbnail and validates input") {
  std::vector<AttentionRow> rows = {{0, 0, 0.0}, {4, 4, 1.0}};
  ImageRGB slide(8, 8, 100);
  const double alpha = 0.55;
  const ImageRGB out = render_heatmap(rows, 8, 8, 4, 1.0, &slide, alpha);
  // Max tile is pure red blended over gray 100.
  const uint8_t want_r = uint8_t(alpha * 255 + (1 - alpha) * 100);
  const uint8_t want_g = uint8_t(alpha * 0 + (1 - alpha) * 100);
  CHECK(out.at(5, 5, 0) == want_r);
  CHECK(out.at(5, 5, 1) == want_g);
  // Unpainted area keeps the thumbnail.
  CHECK(int(out.at(5, 1, 0)) == 100);

  ImageRGB wrong(4, 4, 0);
  CHECK_THROWS_WITH_AS(render_heatmap(rows, 8, 8, 4, 1.0, &wrong),
                       doctest::Contains("disagree"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(render_heatmap({{3, 0, 0.5}}, 8, 8, 4),
                       doctest::Contains("off the tile grid"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(render_heatmap({{4, 0, 0.5}}, 6, 8, 4), doctest::Contains("off the"),
                       std::invalid_argument);
  CHECK_THROWS_AS(render_heatmap(rows, 8, 8, 4, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(render_heatmap(rows, 8, 8, 4, 1.5), std::invalid_argument);
  CHECK_THROWS_AS(render_heatmap(rows, 0, 8, 4), std::invalid_argument);
}

TEST_CASE("png io and bilinear resize support the renderer") {
  Rng rng(77);
  ImageRGB img(13, 9);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      img.set(x, y, uint8_t(rng.uniform_int(256)), uint8_t(rng.uniform_int(256)),
              uint8_t(rng.uniform_int(256)));
    }
  }
  const std::string path = temp_path("img") + ".png";
  write_png_rgb(path, img);
  const ImageRGB back = read_png_rgb(path);
  REQUIRE(back.width == img.width);
  REQUIRE(back.height == img.height);
  CHECK(back.data == img.data);
  std::filesystem::remove(path);

  ImageRGB flat(10, 10, 42);
  const ImageRGB small = resize_bilinear(flat, 3, 7);
  CHECK(small.width == 3);
  CHECK(small.height == 7);
  for (int y = 0; y < 7; ++y) {
    for (int x = 0; x < 3; ++x) {
      CHECK(int(small.at(x, y, 1)) == 42);  // interpolating a constant
    }
  }
}
