#pragma once

// 8-bit RGB image files: binary PPM (P6) and PNG (via libpng).

#include <png.h>

#include <cctype>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "adept/dct.hpp"
#include "adept/errors.hpp"

namespace adept {

namespace detail {

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::vector<unsigned char> to_bytes(const ImageRGB& img) {
  std::vector<unsigned char> out(img.pixels.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<unsigned char>(std::lround(std::clamp(img.pixels[i], 0.0, 255.0)));
  }
  return out;
}

inline ImageRGB from_bytes(std::size_t h, std::size_t w, const unsigned char* rgb) {
  ImageRGB img(h, w);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = rgb[i];
  return img;
}

}  // namespace detail

inline ImageRGB decode_ppm(const std::vector<unsigned char>& bytes, const std::string& name = "ppm") {
  std::size_t pos = 0;
  auto corrupt = [&](const std::string& why) { return IoError(name + ": corrupt PPM (" + why + ")"); };
  auto skip_ws = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&] {
    skip_ws();
    if (pos >= bytes.size() || !std::isdigit(bytes[pos])) throw corrupt("bad header");
    long v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      if (v > (1L << 24)) throw corrupt("dimension too large");
    }
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') {
    throw IoError(name + ": unsupported format (expected P6 PPM)");
  }
  pos = 2;
  const long w = read_int(), h = read_int(), maxval = read_int();
  if (w <= 0 || h <= 0) throw corrupt("zero dimension");
  if (maxval != 255) throw IoError(name + ": only 8-bit PPM (maxval 255) is supported");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw corrupt("missing header terminator");
  ++pos;
  const std::size_t need = static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 3;
  if (bytes.size() - pos < need) throw corrupt("truncated pixel data");
  return detail::from_bytes(static_cast<std::size_t>(h), static_cast<std::size_t>(w), bytes.data() + pos);
}

inline void save_ppm(const ImageRGB& img, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  const auto bytes = detail::to_bytes(img);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

namespace detail {

struct PngReadSource {
  const std::vector<unsigned char>* bytes;
  std::size_t pos;
};

inline void png_read_mem(png_structp png, png_bytep out, png_size_t n) {
  auto* src = static_cast<PngReadSource*>(png_get_io_ptr(png));
  if (src->pos + n > src->bytes->size()) png_error(png, "truncated PNG stream");
  std::memcpy(out, src->bytes->data() + src->pos, n);
  src->pos += n;
}

inline void png_error_fn(png_structp png, png_const_charp msg) {
  auto* err = static_cast<std::string*>(png_get_error_ptr(png));
  if (err) *err = msg;
  png_longjmp(png, 1);
}

inline void png_warning_fn(png_structp, png_const_charp) {}

}  // namespace detail

inline ImageRGB decode_png(const std::vector<unsigned char>& bytes, const std::string& name = "png") {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) {
    throw IoError(name + ": unsupported format (not a PNG)");
  }
  std::string err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_error_fn,
                                           detail::png_warning_fn);
  if (!png) throw IoError(name + ": libpng init failed");
  png_infop info = png_create_info_struct(png);
  detail::PngReadSource src{&bytes, 0};
  std::vector<unsigned char> rgb;
  png_uint_32 w = 0, h = 0;
  // No C++ objects with non-trivial destructors are created between setjmp and
  // the libpng calls that may longjmp back here.
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError(name + ": corrupt PNG (" + err + ")");
  }
  png_set_read_fn(png, &src, detail::png_read_mem);
  png_read_info(png, info);
  w = png_get_image_width(png, info);
  h = png_get_image_height(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) {
    if (depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    png_set_gray_to_rgb(png);
  }
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color & PNG_COLOR_MASK_ALPHA || png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  if (png_get_rowbytes(png, info) != static_cast<png_size_t>(w) * 3) {
    png_error(png, "unexpected row layout");
  }
  rgb.resize(static_cast<std::size_t>(w) * h * 3);
  for (png_uint_32 y = 0; y < h; ++y) png_read_row(png, rgb.data() + static_cast<std::size_t>(y) * w * 3, nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return detail::from_bytes(h, w, rgb.data());
}

inline void save_png(const ImageRGB& img, const std::filesystem::path& path) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.string().c_str(), "wb"), &std::fclose);
  if (!fp) throw IoError("cannot write " + path.string());
  std::string err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_error_fn,
                                            detail::png_warning_fn);
  png_infop info = png_create_info_struct(png);
  const auto bytes = detail::to_bytes(img);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("PNG encode failed for " + path.string() + ": " + err);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < img.height; ++y) {
    png_write_row(png, const_cast<png_bytep>(bytes.data() + y * img.width * 3));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

/// Decodes a PNG or P6 PPM file, dispatching on the file signature.
inline ImageRGB load_image_file(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("no such file: " + path.string());
  const auto bytes = detail::read_file_bytes(path);
  if (bytes.size() >= 8 && png_sig_cmp(bytes.data(), 0, 8) == 0) return decode_png(bytes, path.string());
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6') return decode_ppm(bytes, path.string());
  throw IoError(path.string() + ": unsupported format (expected PNG or P6 PPM)");
}

}  // namespace adept
