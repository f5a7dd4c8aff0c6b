#pragma once

// Binary PPM (P6, 8-bit) frames and small raster helpers.

#include <filesystem>
#include <vector>

namespace stvg {

struct Image {
  int width = 0;
  int height = 0;
  std::vector<double> rgb;  // [y][x][c] in [0, 1]

  Image() = default;
  Image(int w, int h, double fill = 0.0) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, fill) {}
  double& at(int x, int y, int c) { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  double at(int x, int y, int c) const { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
};

// Throws DataError on I/O failure or malformed files.
Image read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Image& image);

// Bilinear resize with half-pixel centers.
Image resize_bilinear(const Image& src, int width, int height);

// One-pixel rectangle outline over the inclusive pixel range [x0, x1] x [y0, y1],
// clipped to the image.
void draw_rect(Image& image, int x0, int y0, int x1, int y1, const double color[3]);

}  // namespace stvg
