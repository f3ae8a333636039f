// Attention heatmaps: per-tile attention rows (slide_id, x, y, attention)
// round-trip through CSV, and a renderer that paints each tile rectangle
// with a min-max normalized colormap over an optional slide thumbnail.
#pragma once

#include <bright/csv.hpp>
#include <bright/image.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace bright {

struct AttentionRow {
  uint32_t x = 0;  // tile origin in slide pixels
  uint32_t y = 0;
  double attention = 0.0;
};

inline void write_attention_csv(const std::string& path, const std::string& slide_id,
                                const std::vector<AttentionRow>& rows) {
  CsvTable t;
  t.header = {"slide_id", "x", "y", "attention"};
  for (const auto& r : rows) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.9g", r.attention);
    t.rows.push_back({slide_id, std::to_string(r.x), std::to_string(r.y), buf});
  }
  write_csv(path, t);
}

inline std::vector<AttentionRow> read_attention_csv(const std::string& path,
                                                    std::string* slide_id = nullptr) {
  const CsvTable t = read_csv(path);
  if (t.header != std::vector<std::string>{"slide_id", "x", "y", "attention"}) {
    throw std::invalid_argument(path + ": not an attention CSV");
  }
  std::vector<AttentionRow> rows;
  for (size_t i = 0; i < t.rows.size(); ++i) {
    const auto& row = t.rows[i];
    if (slide_id) {
      if (i == 0) *slide_id = row[0];
      else if (*slide_id != row[0]) {
        throw std::invalid_argument(path + ": mixed slide_ids in one attention file");
      }
    }
    AttentionRow r;
    r.x = uint32_t(std::stoul(row[1]));
    r.y = uint32_t(std::stoul(row[2]));
    r.attention = std::stod(row[3]);
    rows.push_back(r);
  }
  return rows;
}

// Piecewise-linear blue -> cyan -> yellow -> red map on [0, 1].
inline void colormap_heat(double t, uint8_t* r, uint8_t* g, uint8_t* b) {
  t = std::clamp(t, 0.0, 1.0);
  double rd, gd, bd;
  if (t < 1.0 / 3.0) {
    const double u = t * 3.0;
    rd = 0.0;
    gd = u;
    bd = 1.0;
  } else if (t < 2.0 / 3.0) {
    const double u = (t - 1.0 / 3.0) * 3.0;
    rd = u;
    gd = 1.0;
    bd = 1.0 - u;
  } else {
    const double u = (t - 2.0 / 3.0) * 3.0;
    rd = 1.0;
    gd = 1.0 - u;
    bd = 0.0;
  }
  *r = uint8_t(std::lround(rd * 255.0));
  *g = uint8_t(std::lround(gd * 255.0));
  *b = uint8_t(std::lround(bd * 255.0));
}

// Renders at `scale` (thumbnail factor in (0, 1]); tile (x, y) covers output
// pixels [floor(x*scale), floor((x+tile)*scale)) in each axis. Tiles missing
// from `rows` keep the background. When a slide image is provided it is
// resized to the thumbnail and the colors are alpha-blended over it.
inline ImageRGB render_heatmap(const std::vector<AttentionRow>& rows, int slide_w, int slide_h,
                               int tile_size, double scale = 1.0,
                               const ImageRGB* slide_image = nullptr, double overlay_alpha = 0.55) {
  if (slide_w <= 0 || slide_h <= 0 || tile_size <= 0) {
    throw std::invalid_argument("render_heatmap: non-positive geometry");
  }
  if (!(scale > 0.0) || scale > 1.0) {
    throw std::invalid_argument("render_heatmap: scale must be in (0, 1]");
  }
  for (const auto& r : rows) {
    if (r.x % uint32_t(tile_size) != 0 || r.y % uint32_t(tile_size) != 0 ||
        r.x + uint32_t(tile_size) > uint32_t(slide_w) ||
        r.y + uint32_t(tile_size) > uint32_t(slide_h)) {
      throw std::invalid_argument("render_heatmap: coord (" + std::to_string(r.x) + ", " +
                                  std::to_string(r.y) + ") off the tile grid");
    }
  }
  const int out_w = std::max(1, int(std::floor(slide_w * scale)));
  const int out_h = std::max(1, int(std::floor(slide_h * scale)));
  ImageRGB out(out_w, out_h, 255);
  if (slide_image) {
    if (slide_image->width != slide_w || slide_image->height != slide_h) {
      throw std::invalid_argument("render_heatmap: slide image dims disagree with geometry");
    }
    out = resize_bilinear(*slide_image, out_w, out_h);
  }

  if (rows.empty()) return out;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& r : rows) {
    lo = std::min(lo, r.attention);
    hi = std::max(hi, r.attention);
  }
  const double span = hi - lo;

  for (const auto& r : rows) {
    const double t = span > 0.0 ? (r.attention - lo) / span : 0.5;
    uint8_t cr, cg, cb;
    colormap_heat(t, &cr, &cg, &cb);
    const int x0 = int(std::floor(double(r.x) * scale));
    const int x1 = std::min(out_w, int(std::floor(double(r.x + uint32_t(tile_size)) * scale)));
    const int y0 = int(std::floor(double(r.y) * scale));
    const int y1 = std::min(out_h, int(std::floor(double(r.y + uint32_t(tile_size)) * scale)));
    for (int y = y0; y < y1; ++y) {
      for (int x = x0; x < x1; ++x) {
        if (slide_image) {
          const double a = overlay_alpha;
          out.set(x, y, uint8_t(a * cr + (1 - a) * out.at(x, y, 0)),
                  uint8_t(a * cg + (1 - a) * out.at(x, y, 1)),
                  uint8_t(a * cb + (1 - a) * out.at(x, y, 2)));
        } else {
          out.set(x, y, cr, cg, cb);
        }
      }
    }
  }
  return out;
}

}  // namespace bright
