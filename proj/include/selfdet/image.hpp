#pragma once

#include <string>
#include <vector>

namespace selfdet {

/// Planar (channel, row, column) image with real channel values, normally in [0, 1].
struct Image {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> data;

  Image() = default;
  Image(int c, int h, int w, double fill = 0.0)
      : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, fill) {}

  double& at(int c, int y, int x) {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  double at(int c, int y, int x) const {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
  bool empty() const { return data.empty(); }
};

/// Reads a binary (P6) or ASCII (P3) portable pixel map, 8-bit, into [0, 1].
Image read_ppm(const std::string& path);
/// Writes an 8-bit binary P6 file; values are clamped to [0, 1] and rounded.
void write_ppm(const std::string& path, const Image& img);

/// Bilinear resampling of the source window [x0, x0+src_w) x [y0, y0+src_h)
/// onto an out_h x out_w grid. Pixel centres sit at half-integer coordinates;
/// samples outside the source are clamped to the border.
Image resample_bilinear(const Image& src, double x0, double y0, double src_w, double src_h,
                        int out_h, int out_w);
Image resize_bilinear(const Image& src, int out_h, int out_w);

/// Separable Gaussian blur, kernel radius ceil(3 sigma), border replicated.
/// sigma <= 0 returns the input unchanged.
Image gaussian_blur(const Image& src, double sigma);

}  // namespace selfdet
