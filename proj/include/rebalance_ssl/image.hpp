#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

namespace rssl {

/// 8-bit RGB raster, row-major, interleaved channels.
struct Image {
  static constexpr int kChannels = 3;

  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(int w, int h, std::uint8_t fill = 0)
      : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * kChannels, fill) {
    if (w <= 0 || h <= 0) throw std::invalid_argument("Image: non-positive dimensions");
  }

  std::size_t index(int x, int y, int c) const {
    return (static_cast<std::size_t>(y) * width + x) * kChannels + c;
  }
  std::uint8_t& at(int x, int y, int c) { return pixels[index(x, y, c)]; }
  std::uint8_t at(int x, int y, int c) const { return pixels[index(x, y, c)]; }

  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
  bool valid() const { return width > 0 && height > 0 && pixels.size() == pixel_count() * kChannels; }

  friend bool operator==(const Image&, const Image&) = default;
};

/// Decode an image file to RGB. Throws std::runtime_error if undecodable.
Image read_image(const std::filesystem::path& path);

/// Encode as PNG (lossless). Throws on write failure.
void write_png(const std::filesystem::path& path, const Image& img);

/// Area-resample to the requested size (identity copy when sizes match).
Image resize_image(const Image& img, int width, int height);

}  // namespace rssl
