#pragma once

#include <png.h>

#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "xmodseg/error.hpp"

// Thin libpng wrappers for the three pixel layouts the project uses:
// 16-bit grayscale (slices), 8-bit grayscale (masks), 8-bit RGB (overlays).
// Buffers are native little-endian; png_set_swap handles the wire order.

namespace xmodseg::pngio {

struct Gray16 {
  int h = 0, w = 0;
  std::vector<std::uint16_t> px;
};

struct Gray8 {
  int h = 0, w = 0;
  std::vector<std::uint8_t> px;
};

namespace detail {

struct FileCloser {
  std::FILE* fp = nullptr;
  ~FileCloser() {
    if (fp) std::fclose(fp);
  }
};

}  // namespace detail

inline void write_gray16(const std::string& path, int h, int w,
                         const std::vector<std::uint16_t>& px) {
  detail::FileCloser f{std::fopen(path.c_str(), "wb")};
  if (!f.fp) throw IoError("cannot open for writing: " + path);
  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng init failed");
  }
  std::vector<png_bytep> rows(static_cast<std::size_t>(h));
  for (int r = 0; r < h; ++r)
    rows[r] = const_cast<png_bytep>(
        reinterpret_cast<const png_byte*>(px.data() + static_cast<std::size_t>(r) * w));
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("png write failed: " + path);
  }
  png_init_io(png, f.fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h),
               16, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_set_swap(png);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline void write_gray8(const std::string& path, int h, int w,
                        const std::vector<std::uint8_t>& px) {
  detail::FileCloser f{std::fopen(path.c_str(), "wb")};
  if (!f.fp) throw IoError("cannot open for writing: " + path);
  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng init failed");
  }
  std::vector<png_bytep> rows(static_cast<std::size_t>(h));
  for (int r = 0; r < h; ++r)
    rows[r] = const_cast<png_bytep>(px.data() + static_cast<std::size_t>(r) * w);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("png write failed: " + path);
  }
  png_init_io(png, f.fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h),
               8, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

/// Interleaved RGB, row-major, 3 bytes per pixel.
inline void write_rgb8(const std::string& path, int h, int w,
                       const std::vector<std::uint8_t>& px) {
  detail::FileCloser f{std::fopen(path.c_str(), "wb")};
  if (!f.fp) throw IoError("cannot open for writing: " + path);
  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng init failed");
  }
  std::vector<png_bytep> rows(static_cast<std::size_t>(h));
  for (int r = 0; r < h; ++r)
    rows[r] = const_cast<png_bytep>(px.data() + static_cast<std::size_t>(r) * w * 3);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("png write failed: " + path);
  }
  png_init_io(png, f.fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h),
               8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline Gray16 read_gray16(const std::string& path) {
  detail::FileCloser f{std::fopen(path.c_str(), "rb")};
  if (!f.fp) throw IoError("cannot open for reading: " + path);
  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng init failed");
  }
  Gray16 out;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("corrupt or unreadable PNG: " + path);
  }
  png_init_io(png, f.fp);
  png_read_info(png, info);
  if (png_get_bit_depth(png, info) != 16 ||
      png_get_color_type(png, info) != PNG_COLOR_TYPE_GRAY) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("expected 16-bit grayscale PNG: " + path);
  }
  out.h = static_cast<int>(png_get_image_height(png, info));
  out.w = static_cast<int>(png_get_image_width(png, info));
  out.px.resize(static_cast<std::size_t>(out.h) * out.w);
  rows.resize(static_cast<std::size_t>(out.h));
  for (int r = 0; r < out.h; ++r)
    rows[r] = reinterpret_cast<png_bytep>(out.px.data() +
                                          static_cast<std::size_t>(r) * out.w);
  png_set_swap(png);
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

inline Gray8 read_gray8(const std::string& path) {
  detail::FileCloser f{std::fopen(path.c_str(), "rb")};
  if (!f.fp) throw IoError("cannot open for reading: " + path);
  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng init failed");
  }
  Gray8 out;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("corrupt or unreadable PNG: " + path);
  }
  png_init_io(png, f.fp);
  png_read_info(png, info);
  if (png_get_bit_depth(png, info) != 8 ||
      png_get_color_type(png, info) != PNG_COLOR_TYPE_GRAY) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("expected 8-bit grayscale PNG: " + path);
  }
  out.h = static_cast<int>(png_get_image_height(png, info));
  out.w = static_cast<int>(png_get_image_width(png, info));
  out.px.resize(static_cast<std::size_t>(out.h) * out.w);
  rows.resize(static_cast<std::size_t>(out.h));
  for (int r = 0; r < out.h; ++r)
    rows[r] = out.px.data() + static_cast<std::size_t>(r) * out.w;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

struct Rgb8 {
  int h = 0, w = 0;
  std::vector<std::uint8_t> px;  // interleaved RGB
};

inline Rgb8 read_rgb8(const std::string& path) {
  detail::FileCloser f{std::fopen(path.c_str(), "rb")};
  if (!f.fp) throw IoError("cannot open for reading: " + path);
  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng init failed");
  }
  Rgb8 out;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("corrupt or unreadable PNG: " + path);
  }
  png_init_io(png, f.fp);
  png_read_info(png, info);
  if (png_get_bit_depth(png, info) != 8 ||
      png_get_color_type(png, info) != PNG_COLOR_TYPE_RGB) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("expected 8-bit RGB PNG: " + path);
  }
  out.h = static_cast<int>(png_get_image_height(png, info));
  out.w = static_cast<int>(png_get_image_width(png, info));
  out.px.resize(static_cast<std::size_t>(out.h) * out.w * 3);
  rows.resize(static_cast<std::size_t>(out.h));
  for (int r = 0; r < out.h; ++r)
    rows[r] = out.px.data() + static_cast<std::size_t>(r) * out.w * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

}  // namespace xmodseg::pngio
