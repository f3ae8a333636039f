// Non-overlapping tiling of slide images with a saturation-based tissue
// filter. Remainder pixels at the right/bottom edges are dropped (floor
// grid, no padding).
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "bright/image.hpp"

namespace bright {

struct TileSpec {
  int tile_size = 64;
  int stride = 64;                 // must equal tile_size (non-overlapping)
  double tissue_threshold = 0.08;  // HSV saturation cutoff per pixel

  void validate() const {
    if (tile_size <= 0) throw std::invalid_argument("tile_size must be positive");
    if (stride != tile_size) {
      throw std::invalid_argument("stride must equal tile_size (non-overlapping grid)");
    }
    if (tissue_threshold < 0.0 || tissue_threshold > 1.0) {
      throw std::invalid_argument("tissue_threshold must lie in [0, 1]");
    }
  }
};

struct TileBag {
  std::string slide_id;
  std::string patient_id;
  std::vector<std::pair<uint32_t, uint32_t>> coords;  // top-left offsets, row-major order
  std::vector<ImageRGB> tiles;
  double mpp = 0.5;
  int tile_size = 0;

  size_t size() const { return tiles.size(); }
  bool empty() const { return tiles.empty(); }
};

// A tile is tissue when more than 5% of its pixels exceed the saturation
// threshold. Near-white background fails; stained tissue passes.
inline bool tissue_mask(const ImageRGB& tile, double tissue_threshold) {
  int64_t hits = 0;
  const int64_t total = int64_t(tile.width) * tile.height;
  for (int y = 0; y < tile.height; ++y) {
    for (int x = 0; x < tile.width; ++x) {
      if (saturation(tile.at(x, y, 0), tile.at(x, y, 1), tile.at(x, y, 2)) > tissue_threshold) {
        ++hits;
      }
    }
  }
  return double(hits) > 0.05 * double(total);
}

inline TileBag tile_slide(const ImageRGB& image, const TileSpec& spec,
                          const std::string& slide_id = "", const std::string& patient_id = "",
                          double mpp = 0.5) {
  spec.validate();
  if (image.width < spec.tile_size || image.height < spec.tile_size) {
    throw std::invalid_argument("image " + std::to_string(image.width) + "x" +
                                std::to_string(image.height) +
                                " smaller than one tile; bag would be empty");
  }
  TileBag bag;
  bag.slide_id = slide_id;
  bag.patient_id = patient_id;
  bag.mpp = mpp;
  bag.tile_size = spec.tile_size;
  const int nx = image.width / spec.tile_size;
  const int ny = image.height / spec.tile_size;
  for (int gy = 0; gy < ny; ++gy) {
    for (int gx = 0; gx < nx; ++gx) {
      const int x0 = gx * spec.tile_size;
      const int y0 = gy * spec.tile_size;
      ImageRGB tile = crop(image, x0, y0, spec.tile_size, spec.tile_size);
      if (!tissue_mask(tile, spec.tissue_threshold)) continue;
      bag.coords.emplace_back(uint32_t(x0), uint32_t(y0));
      bag.tiles.push_back(std::move(tile));
    }
  }
  return bag;
}

}  // namespace bright
