// Synthetic slide generator. Slides are procedural noise compositions:
// near-white background, blob-shaped tissue in an eosin-like base color,
// and a planted "signal" region whose nuclear-dot granularity depends on
// the class label. The per-class cue is dot geometry, not color: stain
// colors are jittered per slide so that color alone does not identify
// the class.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "bright/common.hpp"
#include "bright/image.hpp"

namespace bright {

struct SlideSpec {
  int width_px = 0;
  int height_px = 0;
  double mpp = 0.5;            // microns per pixel
  std::string class_signal;    // categorical texture label, e.g. "A"
  double signal_fraction = 0;  // fraction of tissue area carrying the class texture
  uint64_t seed = 0;
};

struct SyntheticSlide {
  ImageRGB image;
  ImageGray mask;  // 255 where the class texture was planted
};

namespace synth_detail {

// Hash-lattice value noise: bilinear interpolation of per-cell hashes with
// smoothstep easing. O(1) per lookup, no stored lattice.
class LatticeNoise {
 public:
  LatticeNoise(uint64_t seed, double spacing) : seed_(seed), spacing_(spacing) {}

  double at(double x, double y) const {
    const double gx = x / spacing_;
    const double gy = y / spacing_;
    const int i = int(std::floor(gx));
    const int j = int(std::floor(gy));
    double fx = gx - i;
    double fy = gy - j;
    fx = fx * fx * (3 - 2 * fx);
    fy = fy * fy * (3 - 2 * fy);
    const double v00 = corner(i, j);
    const double v10 = corner(i + 1, j);
    const double v01 = corner(i, j + 1);
    const double v11 = corner(i + 1, j + 1);
    return (1 - fy) * ((1 - fx) * v00 + fx * v10) + fy * ((1 - fx) * v01 + fx * v11);
  }

 private:
  double corner(int i, int j) const {
    const uint64_t key = (uint64_t(uint32_t(i)) << 32) | uint64_t(uint32_t(j));
    return double(mix64(seed_ ^ key) >> 11) * 0x1.0p-53;
  }

  uint64_t seed_;
  double spacing_;
};

// Per-pixel grain, independent across pixels.
inline double grain(uint64_t seed, int x, int y) {
  const uint64_t key = (uint64_t(uint32_t(x)) << 32) | uint64_t(uint32_t(y));
  return double(mix64(seed ^ mix64(key)) >> 11) * 0x1.0p-53;
}

struct ClassTexture {
  double dot_spacing;    // lattice spacing of the nuclear-dot field, px
  double dot_threshold;  // field value above which a dot is painted
};

// Known two-class benchmark uses fine ("A") vs coarse ("B") dots; other
// labels get a spacing derived from the label hash.
inline ClassTexture class_texture(const std::string& label) {
  if (label == "A") return {2.6, 0.60};
  if (label == "B") return {9.0, 0.60};
  const uint64_t h = mix64(fnv1a64(label));
  return {3.0 + double(h % 9), 0.60};
}

inline uint8_t clamp_u8(double v) {
  return uint8_t(std::min(255.0, std::max(0.0, v + 0.5)));
}

// Quantile by nth_element; q in [0,1], returns the value such that about
// a (1-q) fraction of entries exceed it.
inline float quantile(std::vector<float> values, double q) {
  if (values.empty()) return 0.f;
  const size_t k = std::min(values.size() - 1, size_t(q * double(values.size())));
  std::nth_element(values.begin(), values.begin() + long(k), values.end());
  return values[k];
}

}  // namespace synth_detail

// min_tile_px is the tile size the slide must accommodate (profile dependent).
inline SyntheticSlide generate_synthetic_slide(const SlideSpec& spec, int min_tile_px = 1) {
  if (spec.width_px < min_tile_px || spec.height_px < min_tile_px) {
    throw std::invalid_argument(
        "slide dimensions " + std::to_string(spec.width_px) + "x" + std::to_string(spec.height_px) +
        " smaller than one tile (" + std::to_string(min_tile_px) + " px)");
  }
  if (spec.signal_fraction < 0.0 || spec.signal_fraction > 1.0) {
    throw std::invalid_argument("signal_fraction must lie in [0, 1]");
  }
  if (spec.mpp <= 0.0) throw std::invalid_argument("mpp must be positive");

  const int w = spec.width_px;
  const int h = spec.height_px;
  Rng rng(spec.seed);

  // Per-slide stain jitter. Drawn first so the draw order is stable.
  const double tj_r = rng.uniform(-10, 10), tj_g = rng.uniform(-10, 10), tj_b = rng.uniform(-10, 10);
  const double dj_r = rng.uniform(-22, 22), dj_g = rng.uniform(-18, 18), dj_b = rng.uniform(-22, 22);
  const double tissue_frac = rng.uniform(0.60, 0.75);

  const double base_r = 233 + tj_r, base_g = 188 + tj_g, base_b = 214 + tj_b;
  const double dot_r = 84 + dj_r, dot_g = 62 + dj_g, dot_b = 112 + dj_b;

  const auto tex = synth_detail::class_texture(spec.class_signal);
  const double min_dim = std::min(w, h);
  synth_detail::LatticeNoise tissue_field(rng.derive("tissue").seed(), std::max(24.0, min_dim / 5.0));
  synth_detail::LatticeNoise signal_field(rng.derive("signal").seed(), std::max(16.0, min_dim / 8.0));
  synth_detail::LatticeNoise dot_field(rng.derive("dots").seed(), tex.dot_spacing);
  synth_detail::LatticeNoise shade_field(rng.derive("shade").seed(), 14.0);
  const uint64_t grain_seed = rng.derive("grain").seed();

  std::vector<float> tvals(size_t(w) * h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) tvals[size_t(y) * w + x] = float(tissue_field.at(x, y));
  const float tissue_thr = synth_detail::quantile(tvals, 1.0 - tissue_frac);

  // Signal threshold is the (1 - fraction) quantile of the signal field over
  // tissue pixels, so the planted area tracks signal_fraction closely.
  std::vector<float> svals;
  svals.reserve(tvals.size());
  std::vector<float> sfield(size_t(w) * h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      sfield[size_t(y) * w + x] = float(signal_field.at(x, y));
      if (tvals[size_t(y) * w + x] >= tissue_thr) svals.push_back(sfield[size_t(y) * w + x]);
    }
  }
  float signal_thr = 0.f;
  if (spec.signal_fraction > 0.0 && spec.signal_fraction < 1.0) {
    signal_thr = synth_detail::quantile(std::move(svals), 1.0 - spec.signal_fraction);
  }

  SyntheticSlide out;
  out.image = ImageRGB(w, h);
  out.mask = ImageGray(w, h, 0);

  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const size_t idx = size_t(y) * w + x;
      const double g1 = synth_detail::grain(grain_seed, x, y);
      const bool in_tissue = tvals[idx] >= tissue_thr;
      if (!in_tissue) {
        // Background stays near-white: luminance > 0.9 by construction.
        const double v = 248 + (g1 - 0.5) * 6.0;
        out.image.set(x, y, synth_detail::clamp_u8(v), synth_detail::clamp_u8(v),
                      synth_detail::clamp_u8(v - 1));
        continue;
      }
      bool in_signal = false;
      if (spec.signal_fraction >= 1.0) {
        in_signal = true;
      } else if (spec.signal_fraction > 0.0) {
        in_signal = sfield[idx] >= signal_thr;
      }
      const double shade = (shade_field.at(x, y) - 0.5) * 26.0;
      const double noise = (g1 - 0.5) * 16.0;
      double r = base_r + shade + noise;
      double g = base_g + shade * 0.8 + noise;
      double b = base_b + shade * 0.9 + noise;
      if (in_signal) {
        out.mask.at(x, y) = 255;
        if (dot_field.at(x, y) > tex.dot_threshold) {
          // Nuclear dot: blend strongly toward the hematoxylin-like color.
          const double a = 0.85;
          r = (1 - a) * r + a * (dot_r + noise * 0.5);
          g = (1 - a) * g + a * (dot_g + noise * 0.5);
          b = (1 - a) * b + a * (dot_b + noise * 0.5);
        }
      }
      out.image.set(x, y, synth_detail::clamp_u8(r), synth_detail::clamp_u8(g),
                    synth_detail::clamp_u8(b));
    }
  }
  return out;
}

// Mean local variance of grayscale intensity over mask pixels, 3x3 windows.
// Separates fine-grained from coarse-grained dot textures; used by tests and
// the texture calibration tooling.
inline double mean_local_variance(const ImageRGB& img, const ImageGray* mask = nullptr) {
  double sum = 0;
  int64_t count = 0;
  for (int y = 1; y + 1 < img.height; ++y) {
    for (int x = 1; x + 1 < img.width; ++x) {
      if (mask && mask->at(x, y) == 0) continue;
      double m = 0, m2 = 0;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int xx = x + dx, yy = y + dy;
          const double v = 0.299 * img.at(xx, yy, 0) + 0.587 * img.at(xx, yy, 1) +
                           0.114 * img.at(xx, yy, 2);
          m += v;
          m2 += v * v;
        }
      }
      m /= 9.0;
      sum += m2 / 9.0 - m * m;
      ++count;
    }
  }
  return count ? sum / double(count) : 0.0;
}

}  // namespace bright
