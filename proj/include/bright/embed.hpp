// Dual-branch tile embedding and the on-disk bag container.
//
// Each tile is encoded twice: by the adapted (specialist) backbone and by the
// frozen base (generalist) backbone. The fused vector is the specialist
// embedding followed by the generalist embedding, so the fused width is the
// sum of the two branch widths. Specialist weights are pre-merged (base plus
// adapter delta), which makes a zero adapter reproduce the generalist branch
// bit for bit.
//
// Bag files: magic "BRTE", version u16 LE, then u32 LE fused_dim, n_tiles,
// tile_size; f64 LE mpp; n_tiles (x, y) u32 LE pairs; the n_tiles x fused_dim
// f32 LE matrix row-major; then slide_id and patient_id as u32
// length-prefixed UTF-8. Embeddings are stored at 32-bit precision.
#pragma once

#include <bright/checkpoint.hpp>
#include <bright/common.hpp>
#include <bright/tiling.hpp>
#include <bright/vit.hpp>

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace bright {

inline constexpr uint16_t kBagVersion = 1;

struct EmbeddingBag {
  std::string slide_id;
  std::string patient_id;
  uint32_t tile_size = 0;
  double mpp = 0.0;
  std::vector<std::pair<uint32_t, uint32_t>> coords;  // tile origin (x, y) in px
  Eigen::MatrixXf embeddings;                         // n_tiles x fused_dim

  int64_t n_tiles() const { return embeddings.rows(); }
  int64_t fused_dim() const { return embeddings.cols(); }

  void validate() const {
    if (embeddings.rows() != Eigen::Index(coords.size())) {
      throw std::invalid_argument("bag: coords/embedding row mismatch for slide " + slide_id);
    }
    if (embeddings.rows() < 1) {
      throw std::invalid_argument("bag: empty bag for slide " + slide_id);
    }
  }
};

inline void write_bag(const std::string& path, const EmbeddingBag& bag) {
  bag.validate();
  std::string buf;
  buf += "BRTE";
  detail::put_u16(buf, kBagVersion);
  detail::put_u32(buf, uint32_t(bag.fused_dim()));
  detail::put_u32(buf, uint32_t(bag.n_tiles()));
  detail::put_u32(buf, bag.tile_size);
  detail::put_f64(buf, bag.mpp);
  for (const auto& [x, y] : bag.coords) {
    detail::put_u32(buf, x);
    detail::put_u32(buf, y);
  }
  for (Eigen::Index r = 0; r < bag.embeddings.rows(); ++r) {
    for (Eigen::Index c = 0; c < bag.embeddings.cols(); ++c) {
      detail::put_f32(buf, bag.embeddings(r, c));
    }
  }
  detail::put_u32(buf, uint32_t(bag.slide_id.size()));
  buf += bag.slide_id;
  detail::put_u32(buf, uint32_t(bag.patient_id.size()));
  buf += bag.patient_id;
  detail::write_file_bytes(path, buf);
}

inline EmbeddingBag read_bag(const std::string& path) {
  const std::string buf = detail::read_file_bytes(path);
  detail::Reader rd(buf, path);
  if (rd.str(4) != "BRTE") {
    throw IoError(IoCode::bad_magic, path + ": not a bag file (bad magic)");
  }
  const uint16_t version = rd.u16();
  if (version != kBagVersion) {
    throw IoError(IoCode::version_mismatch,
                  path + ": bag version " + std::to_string(version) + ", expected " +
                      std::to_string(kBagVersion));
  }
  EmbeddingBag bag;
  const uint32_t fused_dim = rd.u32();
  const uint32_t n_tiles = rd.u32();
  bag.tile_size = rd.u32();
  bag.mpp = rd.f64();
  bag.coords.resize(n_tiles);
  for (uint32_t i = 0; i < n_tiles; ++i) {
    bag.coords[i].first = rd.u32();
    bag.coords[i].second = rd.u32();
  }
  bag.embeddings.resize(n_tiles, fused_dim);
  for (uint32_t r = 0; r < n_tiles; ++r) {
    for (uint32_t c = 0; c < fused_dim; ++c) bag.embeddings(r, c) = rd.f32();
  }
  bag.slide_id = rd.str(rd.u32());
  bag.patient_id = rd.str(rd.u32());
  return bag;
}

// ---------------------------------------------------------------------------
// Embedding
// ---------------------------------------------------------------------------

struct DualEmbedder {
  ViTParams specialist;  // adapter already merged into the weights
  ViTParams generalist;  // frozen base

  void validate() const {
    specialist.cfg.validate();
    generalist.cfg.validate();
    if (specialist.cfg.image_size != generalist.cfg.image_size) {
      throw std::invalid_argument("dual embedder: branch input sizes differ");
    }
  }

  int fused_dim() const { return specialist.cfg.embed_dim() + generalist.cfg.embed_dim(); }
};

// Specialist embedding first, generalist second.
inline Eigen::RowVectorXf embed_tile_fused(const DualEmbedder& emb, const ImageRGB& tile) {
  Eigen::RowVectorXf out(emb.fused_dim());
  out.head(emb.specialist.cfg.embed_dim()) = vit_embed_tile(emb.specialist, tile);
  out.tail(emb.generalist.cfg.embed_dim()) = vit_embed_tile(emb.generalist, tile);
  return out;
}

// Stateless map over tiles; rows are written by tile index, so the result is
// independent of the thread count.
inline EmbeddingBag embed_bag(const DualEmbedder& emb, const TileBag& tiles, int n_threads = 1) {
  emb.validate();
  if (tiles.tiles.empty()) {
    throw std::invalid_argument("embed_bag: slide " + tiles.slide_id + " has no tissue tiles");
  }
  EmbeddingBag bag;
  bag.slide_id = tiles.slide_id;
  bag.patient_id = tiles.patient_id;
  bag.tile_size = uint32_t(tiles.tile_size);
  bag.mpp = tiles.mpp;
  bag.coords = tiles.coords;
  bag.embeddings.resize(Eigen::Index(tiles.tiles.size()), emb.fused_dim());
  parallel_for(tiles.tiles.size(), n_threads, [&](size_t i) {
    bag.embeddings.row(Eigen::Index(i)) = embed_tile_fused(emb, tiles.tiles[i]);
  });
  return bag;
}

// Column views for branch ablations: the fused layout is specialist first.
inline EmbeddingBag slice_specialist(const EmbeddingBag& bag, int specialist_dim) {
  if (specialist_dim <= 0 || specialist_dim >= bag.fused_dim()) {
    throw std::invalid_argument("slice_specialist: dim outside fused width");
  }
  EmbeddingBag out = bag;
  out.embeddings = bag.embeddings.leftCols(specialist_dim).eval();
  return out;
}

inline EmbeddingBag slice_generalist(const EmbeddingBag& bag, int specialist_dim) {
  if (specialist_dim <= 0 || specialist_dim >= bag.fused_dim()) {
    throw std::invalid_argument("slice_generalist: dim outside fused width");
  }
  EmbeddingBag out = bag;
  out.embeddings = bag.embeddings.rightCols(bag.fused_dim() - specialist_dim).eval();
  return out;
}

// ---------------------------------------------------------------------------
// Cosine k-NN probe
// ---------------------------------------------------------------------------

// Majority vote over the k nearest training rows by cosine similarity;
// vote ties resolve to the smallest class index, similarity ties to the
// lower training row index.
inline std::vector<int> knn_classify(const Eigen::MatrixXf& train,
                                     const std::vector<int>& train_labels,
                                     const Eigen::MatrixXf& test, int k, int n_classes,
                                     int n_threads = 1) {
  if (train.rows() != Eigen::Index(train_labels.size()) || train.rows() == 0) {
    throw std::invalid_argument("knn_classify: empty or mismatched training set");
  }
  if (train.cols() != test.cols()) {
    throw std::invalid_argument("knn_classify: train/test dims differ");
  }
  if (k < 1) throw std::invalid_argument("knn_classify: k must be >= 1");
  k = std::min<int>(k, int(train.rows()));

  Eigen::MatrixXf tr = train;
  for (Eigen::Index r = 0; r < tr.rows(); ++r) {
    const float n = tr.row(r).norm();
    if (n > 0) tr.row(r) /= n;
  }
  std::vector<int> pred(size_t(test.rows()));
  parallel_for(size_t(test.rows()), n_threads, [&](size_t i) {
    Eigen::RowVectorXf q = test.row(Eigen::Index(i));
    const float n = q.norm();
    if (n > 0) q /= n;
    Eigen::VectorXf sims = tr * q.transpose();
    std::vector<int> idx(size_t(tr.rows()));
    for (size_t j = 0; j < idx.size(); ++j) idx[j] = int(j);
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int a, int b) {
      if (sims(a) != sims(b)) return sims(a) > sims(b);
      return a < b;
    });
    std::vector<int> votes(size_t(n_classes), 0);
    for (int j = 0; j < k; ++j) {
      const int lab = train_labels[size_t(idx[size_t(j)])];
      if (lab < 0 || lab >= n_classes) {
        throw std::invalid_argument("knn_classify: label out of range");
      }
      ++votes[size_t(lab)];
    }
    int best = 0;
    for (int c = 1; c < n_classes; ++c) {
      if (votes[size_t(c)] > votes[size_t(best)]) best = c;
    }
    pred[i] = best;
  });
  return pred;
}

}  // namespace bright
