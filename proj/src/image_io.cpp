#include "stimseg/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

namespace stimseg {

std::size_t BinaryMask::count() const {
  return static_cast<std::size_t>(std::count(data.begin(), data.end(), std::uint8_t{1}));
}

std::uint8_t to_byte(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::floor(c * 255.0 + 0.5));
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw ImageIoError("cannot open " + path.string());
  return f;
}

[[noreturn]] void png_fail(png_structp png, png_const_charp msg) {
  auto* where = static_cast<std::string*>(png_get_error_ptr(png));
  if (where) *where = msg;
  png_longjmp(png, 1);
}

void png_warn(png_structp, png_const_charp) {}

// Decodes to 8-bit samples with the requested channel count (1, 3 or 4).
std::vector<std::uint8_t> decode(const std::filesystem::path& path, int channels, int& height,
                                 int& width) {
  FilePtr f = open_file(path, "rb");
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw ImageIoError(path.string() + " is not a PNG file");
  }
  std::string error;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &error, png_fail, png_warn);
  png_infop info = png_create_info_struct(png);
  std::vector<std::uint8_t> out;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIoError("failed to decode " + path.string() + ": " + error);
  }
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  const bool is_gray = color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA;
  if (channels == 1) {
    if (!is_gray) png_set_rgb_to_gray_fixed(png, 1, -1, -1);
    png_set_strip_alpha(png);
  } else {
    if (is_gray) png_set_gray_to_rgb(png);
    if (channels == 3) png_set_strip_alpha(png);
    if (channels == 4) png_set_add_alpha(png, 0xFF, PNG_FILLER_AFTER);
  }
  png_read_update_info(png, info);
  width = static_cast<int>(png_get_image_width(png, info));
  height = static_cast<int>(png_get_image_height(png, info));
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  if (rowbytes != static_cast<std::size_t>(width) * channels) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIoError("unexpected PNG layout in " + path.string());
  }
  out.resize(rowbytes * height);
  rows.resize(height);
  for (int y = 0; y < height; ++y) rows[y] = out.data() + rowbytes * y;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

void encode(const std::filesystem::path& path, int height, int width, int color_type, int depth,
            const std::uint8_t* data, std::size_t rowbytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  FilePtr f = open_file(path, "wb");
  std::string error;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &error, png_fail, png_warn);
  png_infop info = png_create_info_struct(png);
  std::vector<png_bytep> rows(height);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ImageIoError("failed to encode " + path.string() + ": " + error);
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, width, height, depth, color_type, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < height; ++y) rows[y] = const_cast<png_bytep>(data + rowbytes * y);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

Image read_png_rgb(const std::filesystem::path& path) {
  int h = 0, w = 0;
  const auto bytes = decode(path, 3, h, w);
  Image img(h, w);
  for (std::size_t i = 0; i < bytes.size(); ++i) img.pixels[i] = bytes[i] / 255.0;
  return img;
}

BinaryMask read_png_mask(const std::filesystem::path& path) {
  int h = 0, w = 0;
  const auto bytes = decode(path, 1, h, w);
  BinaryMask m(h, w);
  for (std::size_t i = 0; i < bytes.size(); ++i) m.data[i] = bytes[i] >= 128 ? 1 : 0;
  return m;
}

void write_png_rgb(const std::filesystem::path& path, const Image& image) {
  std::vector<std::uint8_t> bytes(image.pixels.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = to_byte(image.pixels[i]);
  encode(path, image.height, image.width, PNG_COLOR_TYPE_RGB, 8, bytes.data(),
         static_cast<std::size_t>(image.width) * 3);
}

void write_png_mask(const std::filesystem::path& path, const BinaryMask& mask) {
  std::vector<std::uint8_t> bytes(mask.data.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = mask.data[i] ? 255 : 0;
  encode(path, mask.height, mask.width, PNG_COLOR_TYPE_GRAY, 8, bytes.data(),
         static_cast<std::size_t>(mask.width));
}

void write_png_gray16(const std::filesystem::path& path, int height, int width,
                      const std::vector<std::uint16_t>& values) {
  // PNG stores 16-bit samples big-endian.
  std::vector<std::uint8_t> bytes(values.size() * 2);
  for (std::size_t i = 0; i < values.size(); ++i) {
    bytes[2 * i] = static_cast<std::uint8_t>(values[i] >> 8);
    bytes[2 * i + 1] = static_cast<std::uint8_t>(values[i] & 0xFF);
  }
  encode(path, height, width, PNG_COLOR_TYPE_GRAY, 16, bytes.data(),
         static_cast<std::size_t>(width) * 2);
}

void write_png_rgba(const std::filesystem::path& path, int height, int width,
                    const std::vector<std::uint8_t>& rgba) {
  encode(path, height, width, PNG_COLOR_TYPE_RGB_ALPHA, 8, rgba.data(),
         static_cast<std::size_t>(width) * 4);
}

std::vector<double> resize_bilinear(const std::vector<double>& src, int src_h, int src_w,
                                    int channels, int dst_h, int dst_w) {
  std::vector<double> dst(static_cast<std::size_t>(dst_h) * dst_w * channels);
  const double sy = static_cast<double>(src_h) / dst_h;
  const double sx = static_cast<double>(src_w) / dst_w;
  for (int y = 0; y < dst_h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(src_h - 1));
    const int y0 = static_cast<int>(std::floor(fy));
    const int y1 = std::min(y0 + 1, src_h - 1);
    const double wy = fy - y0;
    for (int x = 0; x < dst_w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(src_w - 1));
      const int x0 = static_cast<int>(std::floor(fx));
      const int x1 = std::min(x0 + 1, src_w - 1);
      const double wx = fx - x0;
      for (int c = 0; c < channels; ++c) {
        auto at = [&](int yy, int xx) {
          return src[(static_cast<std::size_t>(yy) * src_w + xx) * channels + c];
        };
        const double top = at(y0, x0) * (1.0 - wx) + at(y0, x1) * wx;
        const double bot = at(y1, x0) * (1.0 - wx) + at(y1, x1) * wx;
        dst[(static_cast<std::size_t>(y) * dst_w + x) * channels + c] =
            top * (1.0 - wy) + bot * wy;
      }
    }
  }
  return dst;
}

Image resize(const Image& image, int height, int width) {
  if (image.height == height && image.width == width) return image;
  Image out(height, width);
  out.pixels = resize_bilinear(image.pixels, image.height, image.width, 3, height, width);
  return out;
}

}  // namespace stimseg
