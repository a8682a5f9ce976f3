#pragma once

#include <png.h>

#include <csetjmp>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "lidarflow/binary_io.hpp"
#include "lidarflow/error.hpp"

namespace lidarflow::png {

/// Decoded PNG samples, interleaved per pixel. 8-bit images store their
/// samples widened to 16 bits.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  int bit_depth = 0;
  std::vector<std::uint16_t> samples;
};

namespace detail {

struct MemoryReader {
  const io::Bytes* bytes;
  std::size_t pos;
};

inline void read_cb(png_structp png, png_bytep out, png_size_t n) {
  auto* src = static_cast<MemoryReader*>(png_get_io_ptr(png));
  if (src->bytes->size() - src->pos < n) png_error(png, "unexpected end of file");
  std::memcpy(out, src->bytes->data() + src->pos, n);
  src->pos += n;
}

inline void write_cb(png_structp png, png_bytep data, png_size_t n) {
  auto* dst = static_cast<io::Bytes*>(png_get_io_ptr(png));
  dst->insert(dst->end(), data, data + n);
}

inline void flush_cb(png_structp) {}

inline void error_cb(png_structp png, png_const_charp msg) {
  auto* buf = static_cast<char*>(png_get_error_ptr(png));
  std::strncpy(buf, msg, 255);
  buf[255] = '\0';
  png_longjmp(png, 1);
}

inline void warning_cb(png_structp, png_const_charp) {}

// Only trivially destructible locals live across the setjmp boundary.
inline bool decode(const io::Bytes& bytes, Image& out, std::vector<png_bytep>& rows, std::vector<std::uint8_t>& raw,
                   char* err) {
  MemoryReader src{&bytes, 0};
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, err, error_cb, warning_cb);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    return false;
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    return false;
  }
  png_set_read_fn(png, &src, read_cb);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  out.width = static_cast<int>(png_get_image_width(png, info));
  out.height = static_cast<int>(png_get_image_height(png, info));
  out.bit_depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE || out.bit_depth < 8) {
    std::strcpy(err, "unsupported palette or sub-byte PNG");
    png_destroy_read_struct(&png, &info, nullptr);
    return false;
  }
  out.channels = png_get_channels(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  raw.resize(stride * static_cast<std::size_t>(out.height));
  rows.resize(static_cast<std::size_t>(out.height));
  for (int y = 0; y < out.height; ++y) rows[static_cast<std::size_t>(y)] = raw.data() + stride * y;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return true;
}

inline bool encode(const Image& img, io::Bytes& out, std::vector<png_bytep>& rows, std::vector<std::uint8_t>& raw,
                   char* err) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, err, error_cb, warning_cb);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    return false;
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    return false;
  }
  const int color = img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB;
  png_set_write_fn(png, &out, write_cb, flush_cb);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), img.bit_depth,
               color, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  (void)raw;
  return true;
}

}  // namespace detail

inline Image decode(const io::Bytes& bytes, const std::string& what) {
  Image img;
  std::vector<png_bytep> rows;
  std::vector<std::uint8_t> raw;
  char err[256] = "not a PNG file";
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) throw FormatError(what + ": not a PNG file");
  if (!detail::decode(bytes, img, rows, raw, err)) throw FormatError(what + ": " + err);
  const std::size_t n = static_cast<std::size_t>(img.width) * img.height * img.channels;
  img.samples.resize(n);
  if (img.bit_depth == 16) {
    for (std::size_t i = 0; i < n; ++i) img.samples[i] = static_cast<std::uint16_t>((raw[2 * i] << 8) | raw[2 * i + 1]);
  } else {
    for (std::size_t i = 0; i < n; ++i) img.samples[i] = raw[i];
  }
  return img;
}

/// Encode 8- or 16-bit gray or RGB samples.
inline io::Bytes encode(const Image& img) {
  if ((img.bit_depth != 8 && img.bit_depth != 16) || (img.channels != 1 && img.channels != 3)) {
    throw EncodeError("png: only 8/16-bit gray or RGB images are supported");
  }
  const std::size_t n = static_cast<std::size_t>(img.width) * img.height * img.channels;
  if (img.samples.size() != n) throw EncodeError("png: sample count does not match dimensions");
  const std::size_t bytes_per = img.bit_depth / 8;
  const std::size_t stride = static_cast<std::size_t>(img.width) * img.channels * bytes_per;
  std::vector<std::uint8_t> raw(stride * img.height);
  for (std::size_t i = 0; i < n; ++i) {
    if (bytes_per == 2) {
      raw[2 * i] = static_cast<std::uint8_t>(img.samples[i] >> 8);
      raw[2 * i + 1] = static_cast<std::uint8_t>(img.samples[i] & 0xff);
    } else {
      raw[i] = static_cast<std::uint8_t>(img.samples[i]);
    }
  }
  std::vector<png_bytep> rows(static_cast<std::size_t>(img.height));
  for (int y = 0; y < img.height; ++y) rows[static_cast<std::size_t>(y)] = raw.data() + stride * y;
  io::Bytes out;
  char err[256] = "png encoding failed";
  if (!detail::encode(img, out, rows, raw, err)) throw EncodeError(std::string("png: ") + err);
  return out;
}

inline Image load(const std::filesystem::path& path) { return decode(io::read_file(path), path.string()); }
inline void save(const std::filesystem::path& path, const Image& img) { io::write_file(path, encode(img)); }

}  // namespace lidarflow::png
