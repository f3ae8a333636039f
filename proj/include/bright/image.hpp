// 8-bit RGB / grayscale images with PNG I/O (libpng) and bilinear resize.
#pragma once

#include <png.h>

#include <cstdint>
#include <cstdio>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "bright/common.hpp"

namespace bright {

struct ImageRGB {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> data;  // row-major, 3 bytes per pixel

  ImageRGB() = default;
  ImageRGB(int w, int h, uint8_t fill = 0)
      : width(w), height(h), data(size_t(w) * h * 3, fill) {}

  uint8_t& at(int x, int y, int c) { return data[(size_t(y) * width + x) * 3 + c]; }
  uint8_t at(int x, int y, int c) const { return data[(size_t(y) * width + x) * 3 + c]; }

  void set(int x, int y, uint8_t r, uint8_t g, uint8_t b) {
    uint8_t* p = &data[(size_t(y) * width + x) * 3];
    p[0] = r;
    p[1] = g;
    p[2] = b;
  }

  bool same_size(const ImageRGB& o) const {
    return width == o.width && height == o.height;
  }
};

struct ImageGray {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> data;

  ImageGray() = default;
  ImageGray(int w, int h, uint8_t fill = 0)
      : width(w), height(h), data(size_t(w) * h, fill) {}

  uint8_t& at(int x, int y) { return data[size_t(y) * width + x]; }
  uint8_t at(int x, int y) const { return data[size_t(y) * width + x]; }
};

// HSV saturation in [0, 1].
inline double saturation(uint8_t r, uint8_t g, uint8_t b) {
  const int mx = std::max(r, std::max(g, b));
  const int mn = std::min(r, std::min(g, b));
  if (mx == 0) return 0.0;
  return double(mx - mn) / double(mx);
}

// Rec. 709 luminance in [0, 1].
inline double luminance(uint8_t r, uint8_t g, uint8_t b) {
  return (0.2126 * r + 0.7152 * g + 0.0722 * b) / 255.0;
}

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace detail

inline void write_png_rgb(const std::string& path, const ImageRGB& img) {
  detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw IoError(IoCode::io_fail, "cannot open for write: " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError(IoCode::io_fail, "libpng write failure: " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < img.height; ++y) {
    png_write_row(png, const_cast<png_bytep>(&img.data[size_t(y) * img.width * 3]));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline void write_png_gray(const std::string& path, const ImageGray& img) {
  detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw IoError(IoCode::io_fail, "cannot open for write: " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError(IoCode::io_fail, "libpng write failure: " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < img.height; ++y) {
    png_write_row(png, const_cast<png_bytep>(&img.data[size_t(y) * img.width]));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// Reads any 8/16-bit PNG, normalizing to 8-bit RGB.
inline ImageRGB read_png_rgb(const std::string& path) {
  detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IoError(IoCode::io_fail, "cannot open for read: " + path);
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw IoError(IoCode::bad_magic, "not a PNG file: " + path);
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError(IoCode::io_fail, "libpng read failure: " + path);
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  png_set_expand(png);          // palette / low-bit gray to 8-bit
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);

  ImageRGB img(int(png_get_image_width(png, info)), int(png_get_image_height(png, info)));
  if (png_get_rowbytes(png, info) != size_t(img.width) * 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError(IoCode::io_fail, "unexpected PNG row size: " + path);
  }
  for (int y = 0; y < img.height; ++y) {
    png_read_row(png, &img.data[size_t(y) * img.width * 3], nullptr);
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

inline ImageGray read_png_gray(const std::string& path) {
  ImageRGB rgb = read_png_rgb(path);
  ImageGray g(rgb.width, rgb.height);
  for (int y = 0; y < rgb.height; ++y)
    for (int x = 0; x < rgb.width; ++x)
      g.at(x, y) = uint8_t((int(rgb.at(x, y, 0)) + rgb.at(x, y, 1) + rgb.at(x, y, 2)) / 3);
  return g;
}

// Bilinear resize with half-pixel centers. Identity when dimensions match.
inline ImageRGB resize_bilinear(const ImageRGB& src, int out_w, int out_h) {
  if (out_w <= 0 || out_h <= 0) throw std::invalid_argument("resize: non-positive output size");
  if (out_w == src.width && out_h == src.height) return src;
  ImageRGB out(out_w, out_h);
  const double sx = double(src.width) / out_w;
  const double sy = double(src.height) / out_h;
  for (int y = 0; y < out_h; ++y) {
    double fy = (y + 0.5) * sy - 0.5;
    if (fy < 0) fy = 0;
    int y0 = int(fy);
    int y1 = std::min(y0 + 1, src.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      double fx = (x + 0.5) * sx - 0.5;
      if (fx < 0) fx = 0;
      int x0 = int(fx);
      int x1 = std::min(x0 + 1, src.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        const double v = (1 - wy) * ((1 - wx) * src.at(x0, y0, c) + wx * src.at(x1, y0, c)) +
                         wy * ((1 - wx) * src.at(x0, y1, c) + wx * src.at(x1, y1, c));
        out.at(x, y, c) = uint8_t(v + 0.5);
      }
    }
  }
  return out;
}

// Crop [x0, x0+w) x [y0, y0+h); must lie inside the image.
inline ImageRGB crop(const ImageRGB& src, int x0, int y0, int w, int h) {
  if (x0 < 0 || y0 < 0 || x0 + w > src.width || y0 + h > src.height || w <= 0 || h <= 0) {
    throw std::invalid_argument("crop: window outside image");
  }
  ImageRGB out(w, h);
  for (int y = 0; y < h; ++y) {
    const uint8_t* s = &src.data[(size_t(y0 + y) * src.width + x0) * 3];
    std::copy(s, s + size_t(w) * 3, &out.data[size_t(y) * w * 3]);
  }
  return out;
}

// Float RGB image in [0, 1], used by the augmentation and model pipelines.
struct FloatImageRGB {
  int width = 0;
  int height = 0;
  std::vector<float> data;  // row-major, 3 floats per pixel

  FloatImageRGB() = default;
  FloatImageRGB(int w, int h, float fill = 0.f)
      : width(w), height(h), data(size_t(w) * h * 3, fill) {}

  float& at(int x, int y, int c) { return data[(size_t(y) * width + x) * 3 + c]; }
  float at(int x, int y, int c) const { return data[(size_t(y) * width + x) * 3 + c]; }
};

inline FloatImageRGB to_float(const ImageRGB& src) {
  FloatImageRGB out(src.width, src.height);
  for (size_t i = 0; i < src.data.size(); ++i) out.data[i] = float(src.data[i]) / 255.f;
  return out;
}

inline FloatImageRGB crop(const FloatImageRGB& src, int x0, int y0, int w, int h) {
  if (x0 < 0 || y0 < 0 || x0 + w > src.width || y0 + h > src.height || w <= 0 || h <= 0) {
    throw std::invalid_argument("crop: window outside image");
  }
  FloatImageRGB out(w, h);
  for (int y = 0; y < h; ++y) {
    const float* s = &src.data[(size_t(y0 + y) * src.width + x0) * 3];
    std::copy(s, s + size_t(w) * 3, &out.data[size_t(y) * w * 3]);
  }
  return out;
}

inline FloatImageRGB resize_bilinear(const FloatImageRGB& src, int out_w, int out_h) {
  if (src.width <= 0 || src.height <= 0) throw std::invalid_argument("resize: empty source");
  if (out_w <= 0 || out_h <= 0) throw std::invalid_argument("resize: non-positive target size");
  if (out_w == src.width && out_h == src.height) return src;
  FloatImageRGB out(out_w, out_h);
  const double sx = double(src.width) / out_w;
  const double sy = double(src.height) / out_h;
  for (int y = 0; y < out_h; ++y) {
    double fy = (y + 0.5) * sy - 0.5;
    if (fy < 0) fy = 0;
    int y0 = int(fy);
    int y1 = std::min(y0 + 1, src.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      double fx = (x + 0.5) * sx - 0.5;
      if (fx < 0) fx = 0;
      int x0 = int(fx);
      int x1 = std::min(x0 + 1, src.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        const double v = (1 - wy) * ((1 - wx) * src.at(x0, y0, c) + wx * src.at(x1, y0, c)) +
                         wy * ((1 - wx) * src.at(x0, y1, c) + wx * src.at(x1, y1, c));
        out.at(x, y, c) = float(v);
      }
    }
  }
  return out;
}

inline FloatImageRGB hflip(const FloatImageRGB& src) {
  FloatImageRGB out(src.width, src.height);
  for (int y = 0; y < src.height; ++y) {
    for (int x = 0; x < src.width; ++x) {
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = src.at(src.width - 1 - x, y, c);
    }
  }
  return out;
}

}  // namespace bright
