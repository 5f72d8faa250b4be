#pragma once

#include <algorithm>
#include <vector>

namespace stickerlab {

// Planar RGBA raster, values in [0,1]. Plane order R,G,B,A.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<double> data;  // 4 * height * width

  Image() = default;
  Image(int w, int h) : width(w), height(h), data(static_cast<size_t>(4) * w * h, 0.0) {}

  double& at(int c, int y, int x) { return data[(static_cast<size_t>(c) * height + y) * width + x]; }
  double at(int c, int y, int x) const { return data[(static_cast<size_t>(c) * height + y) * width + x]; }

  void clamp01() {
    for (auto& v : data) v = std::clamp(v, 0.0, 1.0);
  }
};

inline double luma(const Image& im, int y, int x) {
  return im.at(3, y, x) * (0.2126 * im.at(0, y, x) + 0.7152 * im.at(1, y, x) + 0.0722 * im.at(2, y, x));
}

}  // namespace stickerlab
