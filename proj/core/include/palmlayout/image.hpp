#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace palm {

/// 8-bit raster, interleaved channels (1 = gray, 3 = RGB), row-major.
class Image {
 public:
  Image() = default;
  Image(int width, int height, int channels, std::uint8_t fill = 0);

  int width() const { return width_; }
  int height() const { return height_; }
  int channels() const { return channels_; }
  bool empty() const { return width_ == 0 || height_ == 0; }

  std::uint8_t at(int row, int col, int ch = 0) const { return data_[index(row, col, ch)]; }
  void set(int row, int col, std::uint8_t v, int ch = 0) { data_[index(row, col, ch)] = v; }

  std::span<const std::uint8_t> data() const { return data_; }
  std::span<std::uint8_t> data() { return data_; }

  // Luma conversion for RGB; identity copy for gray.
  Image to_gray() const;

  friend bool operator==(const Image&, const Image&) = default;

 private:
  std::size_t index(int row, int col, int ch) const {
    return (static_cast<std::size_t>(row) * width_ + col) * channels_ + ch;
  }

  int width_ = 0;
  int height_ = 0;
  int channels_ = 1;
  std::vector<std::uint8_t> data_;
};

// PNG (gray, gray+alpha, RGB, RGBA, palette; alpha dropped) via libpng.
Image read_png(const std::filesystem::path& path);
void write_png(const Image& image, const std::filesystem::path& path);

}  // namespace palm
