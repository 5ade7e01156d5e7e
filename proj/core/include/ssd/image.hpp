#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "ssd/boxes.hpp"
#include "ssd/tensor.hpp"

namespace ssd {

/// 8-bit RGB image with normalized box annotations.
struct Image {
  int width = 0, height = 0;
  std::vector<uint8_t> pixels;  // row-major, 3 bytes per pixel
  std::vector<BBox> annotations;

  static Image solid(int width, int height, uint8_t r, uint8_t g, uint8_t b);

  uint8_t& at(int x, int y, int c) { return pixels[size_t(3 * (int64_t(y) * width + x) + c)]; }
  uint8_t at(int x, int y, int c) const {
    return pixels[size_t(3 * (int64_t(y) * width + x) + c)];
  }
};

Image read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& img);

/// (1,3,H,W) float tensor scaled to [0,1].
Tensor image_to_tensor(const Image& img);

/// Draws a 2-pixel box outline; color cycles by class id when r,g,b < 0.
void draw_box(Image& img, const BBox& box);

}  // namespace ssd
