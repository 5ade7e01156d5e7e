#include "ssd/image.hpp"

#include <algorithm>
#include <cstdio>

#include <png.h>

namespace ssd {

Image Image::solid(int width, int height, uint8_t r, uint8_t g, uint8_t b) {
  Image img;
  img.width = width;
  img.height = height;
  img.pixels.resize(size_t(3) * width * height);
  for (int64_t i = 0; i < int64_t(width) * height; ++i) {
    img.pixels[size_t(3 * i)] = r;
    img.pixels[size_t(3 * i + 1)] = g;
    img.pixels[size_t(3 * i + 2)] = b;
  }
  return img;
}

Image read_png(const std::filesystem::path& path) {
  FILE* fp = std::fopen(path.string().c_str(), "rb");
  check(fp != nullptr, "read_png: cannot open ", path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    fail("read_png: libpng failed on ", path.string());
  }
  png_init_io(png, fp);
  png_read_info(png, info);

  // Normalize everything to 8-bit RGB.
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY ||
      png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(png);
  png_read_update_info(png, info);

  Image img;
  img.width = int(png_get_image_width(png, info));
  img.height = int(png_get_image_height(png, info));
  img.pixels.resize(size_t(3) * img.width * img.height);
  std::vector<png_bytep> rows(size_t(img.height));
  for (int y = 0; y < img.height; ++y)
    rows[size_t(y)] = img.pixels.data() + size_t(3) * img.width * y;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return img;
}

void write_png(const std::filesystem::path& path, const Image& img) {
  check(img.width > 0 && img.height > 0, "write_png: empty image");
  FILE* fp = std::fopen(path.string().c_str(), "wb");
  check(fp != nullptr, "write_png: cannot open ", path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    fail("write_png: libpng failed on ", path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, png_uint_32(img.width), png_uint_32(img.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_const_bytep> rows(size_t(img.height));
  for (int y = 0; y < img.height; ++y)
    rows[size_t(y)] = img.pixels.data() + size_t(3) * img.width * y;
  for (int y = 0; y < img.height; ++y)
    png_write_row(png, const_cast<png_bytep>(rows[size_t(y)]));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

Tensor image_to_tensor(const Image& img) {
  check(img.width > 0 && img.height > 0, "image_to_tensor: empty image");
  Tensor t({1, 3, img.height, img.width});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x)
        t.at(0, c, y, x) = float(img.at(x, y, c)) / 255.0f;
  return t;
}

void draw_box(Image& img, const BBox& box) {
  static const uint8_t palette[6][3] = {{230, 60, 60},  {60, 200, 80}, {70, 90, 230},
                                        {230, 180, 40}, {200, 70, 200}, {60, 200, 200}};
  const auto* color = palette[size_t(box.class_id % 6)];
  const int x1 = std::clamp(int(box.x1() * img.width), 0, img.width - 1);
  const int x2 = std::clamp(int(box.x2() * img.width), 0, img.width - 1);
  const int y1 = std::clamp(int(box.y1() * img.height), 0, img.height - 1);
  const int y2 = std::clamp(int(box.y2() * img.height), 0, img.height - 1);
  auto paint = [&](int x, int y) {
    for (int c = 0; c < 3; ++c) img.at(x, y, c) = color[c];
  };
  for (int t = 0; t < 2; ++t) {
    for (int x = x1; x <= x2; ++x) {
      paint(x, std::min(y1 + t, img.height - 1));
      paint(x, std::max(y2 - t, 0));
    }
    for (int y = y1; y <= y2; ++y) {
      paint(std::min(x1 + t, img.width - 1), y);
      paint(std::max(x2 - t, 0), y);
    }
  }
}

}  // namespace ssd
