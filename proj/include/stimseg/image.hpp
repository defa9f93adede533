#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

namespace stimseg {

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// H x W x 3, row-major, interleaved channels, unit-interval intensities.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(int h, int w) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, 0.0) {}

  double& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  double at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  bool operator==(const Image&) const = default;
};

struct BinaryMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;  // 0 or 1

  BinaryMask() = default;
  BinaryMask(int h, int w) : height(h), width(w), data(static_cast<std::size_t>(h) * w, 0) {}

  std::uint8_t& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
  std::size_t count() const;
  bool operator==(const BinaryMask&) const = default;
};

// 8-bit RGB; gray, palette and alpha inputs are converted.
Image read_png_rgb(const std::filesystem::path& path);
// Single channel, binarised at half intensity.
BinaryMask read_png_mask(const std::filesystem::path& path);

void write_png_rgb(const std::filesystem::path& path, const Image& image);
// Foreground 255, background 0.
void write_png_mask(const std::filesystem::path& path, const BinaryMask& mask);
void write_png_gray16(const std::filesystem::path& path, int height, int width,
                      const std::vector<std::uint16_t>& values);
void write_png_rgba(const std::filesystem::path& path, int height, int width,
                    const std::vector<std::uint8_t>& rgba);

// Unit interval to byte with round-half-up.
std::uint8_t to_byte(double v);

// Bilinear resample with half-pixel centres (align_corners = false).
std::vector<double> resize_bilinear(const std::vector<double>& src, int src_h, int src_w,
                                    int channels, int dst_h, int dst_w);
Image resize(const Image& image, int height, int width);

}  // namespace stimseg
