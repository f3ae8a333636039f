#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <atomic>
#include <filesystem>
#include <fstream>

#include "bright/embed.hpp"
#include "bright/lora.hpp"
#include "bright/synth.hpp"

using namespace bright;

namespace {

std::string temp_path(const std::string& stem) {
  static std::atomic<int> counter{0};
  return (std::filesystem::temp_directory_path() /
          (stem + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++)))
      .string();
}

EmbeddingBag random_bag(Rng& rng, const std::string& slide, const std::string& patient,
                        int n_tiles, int dim) {
  EmbeddingBag bag;
  bag.slide_id = slide;
  bag.patient_id = patient;
  bag.tile_size = 64;
  bag.mpp = 0.5;
  bag.embeddings.resize(n_tiles, dim);
  for (int t = 0; t < n_tiles; ++t) {
    bag.coords.emplace_back(uint32_t(64 * t), uint32_t(64 * (t % 3)));
    for (int c = 0; c < dim; ++c) bag.embeddings(t, c) = float(rng.normal());
  }
  return bag;
}

ViTConfig small_cfg() {
  ViTConfig c;
  c.image_size = 32;
  c.patch_size = 8;
  c.dim = 32;
  c.depth = 2;
  c.heads = 2;
  c.mlp_ratio = 2;
  return c;
}

TileBag synthetic_tile_bag(uint64_t seed, const std::string& cls = "A") {
  SlideSpec s;
  s.width_px = 128;
  s.height_px = 128;
  s.class_signal = cls;
  s.signal_fraction = 0.8;
  s.seed = seed;
  const SyntheticSlide slide = generate_synthetic_slide(s);
  TileSpec spec;
  spec.tile_size = 32;
  spec.stride = 32;
  return tile_slide(slide.image, spec, "s" + std::to_string(seed), "p", 0.5);
}

}  // namespace

TEST_CASE("bags round-trip byte-exactly across many shapes") {
  Rng rng(1);
  for (int i = 0; i < 50; ++i) {
    const int n_tiles = 1 + int(rng.uniform_int(uint64_t(12)));
    const int dim = 2 + int(rng.uniform_int(uint64_t(40)));
    const EmbeddingBag bag =
        random_bag(rng, "slide_" + std::to_string(i), "pat_" + std::to_string(i / 3), n_tiles, dim);
    const std::string path = temp_path("bag") + ".brte";
    write_bag(path, bag);
    const EmbeddingBag back = read_bag(path);
    CHECK(back.slide_id == bag.slide_id);
    CHECK(back.patient_id == bag.patient_id);
    CHECK(back.tile_size == bag.tile_size);
    CHECK(back.mpp == bag.mpp);
    CHECK(back.coords == bag.coords);
    CHECK(back.embeddings == bag.embeddings);
    std::filesystem::remove(path);
  }
}

TEST_CASE("corrupted headers raise distinct error codes") {
  Rng rng(2);
  const EmbeddingBag bag = random_bag(rng, "s", "p", 3, 8);
  const std::string path = temp_path("bag_corrupt") + ".brte";

  auto mangle = [&](size_t offset, char byte) {
    write_bag(path, bag);
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(std::streamoff(offset));
    f.write(&byte, 1);
  };

  mangle(1, 'X');
  try {
    read_bag(path);
    CHECK(false);
  } catch (const IoError& e) {
    CHECK(e.code() == IoCode::bad_magic);
  }

  mangle(5, char(0x2a));
  try {
    read_bag(path);
    CHECK(false);
  } catch (const IoError& e) {
    CHECK(e.code() == IoCode::version_mismatch);
  }

  write_bag(path, bag);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 5);
  try {
    read_bag(path);
    CHECK(false);
  } catch (const IoError& e) {
    CHECK(e.code() == IoCode::truncated_payload);
  }
  std::filesystem::remove(path);
}

TEST_CASE("bag validation rejects inconsistent contents") {
  Rng rng(3);
  EmbeddingBag bag = random_bag(rng, "s", "p", 3, 8);
  bag.coords.pop_back();
  CHECK_THROWS_AS(bag.validate(), std::invalid_argument);
  EmbeddingBag empty;
  empty.slide_id = "e";
  CHECK_THROWS_AS(empty.validate(), std::invalid_argument);
}

TEST_CASE("fused layout is specialist first, generalist second") {
  const ViTConfig cfg = small_cfg();
  Rng rng(4), lr(5), noise(6);
  const ViTParams base = init_vit(cfg, rng);
  LoraParams lora = init_lora(cfg, LoraConfig{}, lr);
  for (auto& b : lora.blocks) {
    for (Eigen::Index i = 0; i < b.b_q.size(); ++i) b.b_q(i) = 0.05f * float(noise.normal());
  }
  DualEmbedder emb;
  emb.specialist = merge_lora(base, lora);
  emb.generalist = base;
  CHECK(emb.fused_dim() == 128);

  const TileBag tiles = synthetic_tile_bag(9);
  REQUIRE(!tiles.empty());
  const Eigen::RowVectorXf fused = embed_tile_fused(emb, tiles.tiles[0]);
  const Eigen::RowVectorXf spec = vit_embed_tile(emb.specialist, tiles.tiles[0]);
  const Eigen::RowVectorXf gen = vit_embed_tile(emb.generalist, tiles.tiles[0]);
  CHECK(fused.head(64) == spec);
  CHECK(fused.tail(64) == gen);
  CHECK(spec != gen);  // adapter is live

  // Zero adapter: both halves agree bit for bit.
  DualEmbedder zero;
  zero.specialist = merge_lora(base, init_lora(cfg, LoraConfig{}, lr));
  zero.generalist = base;
  const Eigen::RowVectorXf z = embed_tile_fused(zero, tiles.tiles[0]);
  CHECK(z.head(64) == z.tail(64));
}

TEST_CASE("bag embedding is thread-count invariant and metadata preserving") {
  const ViTConfig cfg = small_cfg();
  Rng rng(7);
  const ViTParams base = init_vit(cfg, rng);
  DualEmbedder emb;
  emb.specialist = base;
  emb.generalist = base;
  const TileBag tiles = synthetic_tile_bag(11);
  const EmbeddingBag b1 = embed_bag(emb, tiles, 1);
  const EmbeddingBag b4 = embed_bag(emb, tiles, 4);
  CHECK(b1.embeddings == b4.embeddings);
  CHECK(b1.slide_id == tiles.slide_id);
  CHECK(b1.coords == tiles.coords);
  CHECK(b1.n_tiles() == Eigen::Index(tiles.size()));
  CHECK(b1.fused_dim() == emb.fused_dim());

  TileBag empty;
  empty.slide_id = "none";
  CHECK_THROWS_WITH_AS(embed_bag(emb, empty), doctest::Contains("no tissue"),
                       std::invalid_argument);
}

TEST_CASE("branch slices partition the fused matrix") {
  Rng rng(8);
  const EmbeddingBag bag = random_bag(rng, "s", "p", 4, 10);
  const EmbeddingBag spec = slice_specialist(bag, 6);
  const EmbeddingBag gen = slice_generalist(bag, 6);
  CHECK(spec.fused_dim() == 6);
  CHECK(gen.fused_dim() == 4);
  CHECK(spec.embeddings == bag.embeddings.leftCols(6));
  CHECK(gen.embeddings == bag.embeddings.rightCols(4));
  CHECK(spec.slide_id == bag.slide_id);
  CHECK_THROWS_AS(slice_specialist(bag, 0), std::invalid_argument);
  CHECK_THROWS_AS(slice_generalist(bag, 10), std::invalid_argument);
}

TEST_CASE("knn separates two clusters and respects k") {
  Eigen::MatrixXf train(6, 2);
  train << 1, 0, 0.9, 0.1, 1, 0.2, 0, 1, 0.1, 0.9, 0.2, 1;
  const std::vector<int> labels = {0, 0, 0, 1, 1, 1};
  Eigen::MatrixXf test(2, 2);
  test << 1, 0.05, 0.05, 1;
  const std::vector<int> pred = knn_classify(train, labels, test, 3, 2);
  CHECK(pred == std::vector<int>{0, 1});
  // k larger than the training set is clamped; the full-set vote ties 3-3 and
  // resolves to the smaller class.
  CHECK(knn_classify(train, labels, test, 50, 2) == std::vector<int>{0, 0});
  CHECK_THROWS_AS(knn_classify(train, labels, test, 0, 2), std::invalid_argument);
  Eigen::MatrixXf wrong(1, 3);
  CHECK_THROWS_AS(knn_classify(train, labels, wrong, 1, 2), std::invalid_argument);
  CHECK_THROWS_AS(knn_classify(Eigen::MatrixXf(0, 2), {}, test, 1, 2), std::invalid_argument);
}

TEST_CASE("knn vote ties resolve to the smaller class index") {
  Eigen::MatrixXf train(2, 2);
  train << 1, 0, 0, 1;
  Eigen::MatrixXf test(1, 2);
  test << 0.7071f, 0.7071f;  // equidistant
  CHECK(knn_classify(train, {1, 0}, test, 2, 2) == std::vector<int>{0});
}
