#pragma once

// 16-bit depth PNGs (KITTI devkit encoding: meters = value / 256, 0 = no
// measurement) and 8-bit color PNGs.

#include <png.h>

#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "semattnet/tensor.hpp"

namespace semattnet {

inline constexpr double kDepthScale = 256.0;

struct Image16 {
  int width = 0, height = 0;
  std::vector<std::uint16_t> pixels;  // row-major
};

struct Image8 {
  int width = 0, height = 0, channels = 0;
  std::vector<std::uint8_t> pixels;  // row-major, interleaved
};

namespace png_detail {

inline char* error_text() {
  thread_local char text[256] = {0};
  return text;
}

inline void on_error(png_structp png, png_const_charp msg) {
  std::snprintf(error_text(), 256, "%s", msg);
  png_longjmp(png, 1);
}
inline void on_warning(png_structp, png_const_charp) {}

struct Reader {
  std::FILE* file = nullptr;
  png_structp png = nullptr;
  png_infop info = nullptr;

  explicit Reader(const std::string& path) {
    file = std::fopen(path.c_str(), "rb");
    if (!file) throw DataError("cannot open '" + path + "'");
    png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, on_error, on_warning);
    if (png) info = png_create_info_struct(png);
    if (!png || !info) throw FormatError("libpng initialization failed");
  }
  ~Reader() {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    if (file) std::fclose(file);
  }
  Reader(const Reader&) = delete;
  Reader& operator=(const Reader&) = delete;
};

struct Header {
  png_uint_32 width = 0, height = 0;
  int bit_depth = 0, color_type = 0, channels = 0;
  std::size_t rowbytes = 0;
};

// Only POD state lives between setjmp and a possible longjmp.
inline bool read_header(Reader& r, Header& h, bool to_rgb8) {
  if (setjmp(png_jmpbuf(r.png))) return false;
  unsigned char signature[8];
  if (std::fread(signature, 1, 8, r.file) != 8 || png_sig_cmp(signature, 0, 8) != 0) {
    std::snprintf(error_text(), 256, "not a PNG file");
    return false;
  }
  png_init_io(r.png, r.file);
  png_set_sig_bytes(r.png, 8);
  png_read_info(r.png, r.info);
  h.width = png_get_image_width(r.png, r.info);
  h.height = png_get_image_height(r.png, r.info);
  h.bit_depth = png_get_bit_depth(r.png, r.info);
  h.color_type = png_get_color_type(r.png, r.info);
  if (to_rgb8) {
    if (h.color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(r.png);
    if (h.color_type == PNG_COLOR_TYPE_GRAY || h.color_type == PNG_COLOR_TYPE_GRAY_ALPHA)
      png_set_gray_to_rgb(r.png);
    if (h.color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(r.png);
    if (h.bit_depth == 16) png_set_strip_16(r.png);
    if (h.bit_depth < 8) png_set_packing(r.png);
  }
  png_set_interlace_handling(r.png);
  png_read_update_info(r.png, r.info);
  h.channels = png_get_channels(r.png, r.info);
  h.rowbytes = png_get_rowbytes(r.png, r.info);
  return true;
}

inline bool read_rows(Reader& r, png_bytep* rows) {
  if (setjmp(png_jmpbuf(r.png))) return false;
  png_read_image(r.png, rows);
  png_read_end(r.png, nullptr);
  return true;
}

inline bool write_png(std::FILE* file, png_uint_32 width, png_uint_32 height, int bit_depth,
                      int color_type, png_bytep* rows) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, on_error, on_warning);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, info ? &info : nullptr);
    return false;
  }
  png_init_io(png, file);
  png_set_IHDR(png, info, width, height, bit_depth, color_type, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return true;
}

inline void write_file(const std::string& path, png_uint_32 width, png_uint_32 height, int bit_depth,
                       int color_type, std::vector<std::uint8_t>& bytes, std::size_t rowbytes) {
  std::vector<png_bytep> rows(height);
  for (png_uint_32 y = 0; y < height; ++y) rows[y] = bytes.data() + y * rowbytes;
  std::FILE* file = std::fopen(path.c_str(), "wb");
  if (!file) throw DataError("cannot write '" + path + "'");
  const bool ok = write_png(file, width, height, bit_depth, color_type, rows.data());
  std::fclose(file);
  if (!ok) throw FormatError("failed to encode '" + path + "': " + error_text());
}

}  // namespace png_detail

inline Image16 read_png16(const std::string& path) {
  png_detail::Reader r(path);
  png_detail::Header h;
  if (!png_detail::read_header(r, h, false))
    throw FormatError("'" + path + "': " + png_detail::error_text());
  if (h.bit_depth != 16 || h.color_type != PNG_COLOR_TYPE_GRAY)
    throw FormatError("'" + path + "': expected a 16-bit single-channel PNG, got bit depth " +
                      std::to_string(h.bit_depth) + " with " + std::to_string(h.channels) + " channel(s)");
  std::vector<std::uint8_t> bytes(h.rowbytes * h.height);
  std::vector<png_bytep> rows(h.height);
  for (png_uint_32 y = 0; y < h.height; ++y) rows[y] = bytes.data() + y * h.rowbytes;
  if (!png_detail::read_rows(r, rows.data()))
    throw FormatError("'" + path + "': " + png_detail::error_text());
  Image16 img{static_cast<int>(h.width), static_cast<int>(h.height), {}};
  img.pixels.resize(static_cast<std::size_t>(h.width) * h.height);
  for (std::size_t i = 0; i < img.pixels.size(); ++i)  // PNG samples are big-endian
    img.pixels[i] = static_cast<std::uint16_t>((bytes[2 * i] << 8) | bytes[2 * i + 1]);
  return img;
}

inline void write_png16(const std::string& path, const Image16& img) {
  if (img.pixels.size() != static_cast<std::size_t>(img.width) * img.height || img.width <= 0)
    throw DimensionError("write_png16: pixel buffer does not match size");
  std::vector<std::uint8_t> bytes(img.pixels.size() * 2);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    bytes[2 * i] = static_cast<std::uint8_t>(img.pixels[i] >> 8);
    bytes[2 * i + 1] = static_cast<std::uint8_t>(img.pixels[i] & 0xFF);
  }
  png_detail::write_file(path, img.width, img.height, 16, PNG_COLOR_TYPE_GRAY, bytes,
                         static_cast<std::size_t>(img.width) * 2);
}

// Any 8-bit-reducible PNG, expanded to RGB.
inline Image8 read_png_rgb8(const std::string& path) {
  png_detail::Reader r(path);
  png_detail::Header h;
  if (!png_detail::read_header(r, h, true))
    throw FormatError("'" + path + "': " + png_detail::error_text());
  if (h.channels != 3) throw FormatError("'" + path + "': could not expand to RGB");
  Image8 img{static_cast<int>(h.width), static_cast<int>(h.height), 3, {}};
  img.pixels.resize(h.rowbytes * h.height);
  std::vector<png_bytep> rows(h.height);
  for (png_uint_32 y = 0; y < h.height; ++y) rows[y] = img.pixels.data() + y * h.rowbytes;
  if (!png_detail::read_rows(r, rows.data()))
    throw FormatError("'" + path + "': " + png_detail::error_text());
  return img;
}

inline void write_png_rgb8(const std::string& path, const Image8& img) {
  if (img.channels != 3 || img.pixels.size() != static_cast<std::size_t>(img.width) * img.height * 3)
    throw DimensionError("write_png_rgb8: expected interleaved RGB");
  auto bytes = img.pixels;
  png_detail::write_file(path, img.width, img.height, 8, PNG_COLOR_TYPE_RGB, bytes,
                         static_cast<std::size_t>(img.width) * 3);
}

// ---- tensor conversions

inline Tensor<float> load_depth_png(const std::string& path) {
  const Image16 img = read_png16(path);
  Tensor<float> depth(1, 1, img.height, img.width);
  for (std::size_t i = 0; i < img.pixels.size(); ++i)
    depth[i] = static_cast<float>(img.pixels[i] / kDepthScale);
  return depth;
}

inline Image16 encode_depth(const Tensor<float>& depth) {
  if (depth.n() != 1 || depth.c() != 1) throw DimensionError("encode_depth: expected 1x1xHxW");
  Image16 img{depth.w(), depth.h(), std::vector<std::uint16_t>(depth.size())};
  for (std::size_t i = 0; i < depth.size(); ++i) {
    const double v = std::isfinite(depth[i]) ? std::round(depth[i] * kDepthScale) : 0.0;
    img.pixels[i] = static_cast<std::uint16_t>(std::clamp(v, 0.0, 65535.0));
  }
  return img;
}

inline void save_depth_png(const std::string& path, const Tensor<float>& depth) {
  write_png16(path, encode_depth(depth));
}

inline Tensor<float> load_rgb_png(const std::string& path) {
  const Image8 img = read_png_rgb8(path);
  Tensor<float> t(1, 3, img.height, img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c)
        t.at(0, c, y, x) = img.pixels[(static_cast<std::size_t>(y) * img.width + x) * 3 + c] / 255.0f;
  return t;
}

inline Image8 encode_rgb(const Tensor<float>& rgb) {
  if (rgb.n() != 1 || rgb.c() != 3) throw DimensionError("encode_rgb: expected 1x3xHxW");
  Image8 img{rgb.w(), rgb.h(), 3, std::vector<std::uint8_t>(rgb.size())};
  for (int y = 0; y < rgb.h(); ++y)
    for (int x = 0; x < rgb.w(); ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(static_cast<double>(rgb.at(0, c, y, x)), 0.0, 1.0);
        img.pixels[(static_cast<std::size_t>(y) * rgb.w() + x) * 3 + c] =
            static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
  return img;
}

inline void save_rgb_png(const std::string& path, const Tensor<float>& rgb) {
  write_png_rgb8(path, encode_rgb(rgb));
}

}  // namespace semattnet
