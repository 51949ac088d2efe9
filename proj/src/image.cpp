#include "selfdet/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace selfdet {

namespace {

void skip_ws_and_comments(std::istream& is) {
  for (;;) {
    int c = is.peek();
    if (c == '#') {
      std::string line;
      std::getline(is, line);
    } else if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
      is.get();
    } else {
      return;
    }
  }
}

int read_header_int(std::istream& is, const std::string& path) {
  skip_ws_and_comments(is);
  int v = -1;
  if (!(is >> v) || v < 0) throw std::runtime_error(path + ": malformed PPM header");
  return v;
}

}  // namespace

Image read_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::string magic(2, '\0');
  is.read(magic.data(), 2);
  if (magic != "P6" && magic != "P3") throw std::runtime_error(path + ": not a P3/P6 pixel map");
  const int w = read_header_int(is, path);
  const int h = read_header_int(is, path);
  const int maxval = read_header_int(is, path);
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) {
    throw std::runtime_error(path + ": unsupported PPM geometry or depth");
  }
  Image img(3, h, w);
  const double scale = 1.0 / maxval;
  if (magic == "P6") {
    is.get();  // single whitespace after maxval
    std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * 3);
    is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (is.gcount() != static_cast<std::streamsize>(raw.size())) {
      throw std::runtime_error(path + ": truncated pixel data");
    }
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c)
          img.at(c, y, x) = raw[(static_cast<std::size_t>(y) * w + x) * 3 + c] * scale;
  } else {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c) {
          int v = 0;
          if (!(is >> v)) throw std::runtime_error(path + ": truncated pixel data");
          img.at(c, y, x) = std::clamp(v, 0, maxval) * scale;
        }
  }
  return img;
}

void write_ppm(const std::string& path, const Image& img) {
  if (img.channels != 3 && img.channels != 1) {
    throw std::invalid_argument("write_ppm: expected 1 or 3 channels");
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  std::vector<unsigned char> raw(static_cast<std::size_t>(img.width) * img.height * 3);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = img.at(img.channels == 3 ? c : 0, y, x);
        raw[(static_cast<std::size_t>(y) * img.width + x) * 3 + c] =
            static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
      }
  os.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

Image resample_bilinear(const Image& src, double x0, double y0, double src_w, double src_h,
                        int out_h, int out_w) {
  if (out_h <= 0 || out_w <= 0) throw std::invalid_argument("resample_bilinear: empty output");
  Image out(src.channels, out_h, out_w);
  const double sx = src_w / out_w;
  const double sy = src_h / out_h;

  struct Tap {
    int i0, i1;
    double w0, w1;
  };
  auto taps = [](int n_out, double origin, double step, int n_src) {
    std::vector<Tap> t(static_cast<std::size_t>(n_out));
    for (int i = 0; i < n_out; ++i) {
      double p = origin + (i + 0.5) * step - 0.5;
      p = std::clamp(p, 0.0, static_cast<double>(n_src - 1));
      const int lo = static_cast<int>(std::floor(p));
      const int hi = std::min(lo + 1, n_src - 1);
      const double f = p - lo;
      t[static_cast<std::size_t>(i)] = {lo, hi, 1.0 - f, f};
    }
    return t;
  };
  const auto tx = taps(out_w, x0, sx, src.width);
  const auto ty = taps(out_h, y0, sy, src.height);

  for (int c = 0; c < src.channels; ++c) {
    for (int y = 0; y < out_h; ++y) {
      const Tap& a = ty[static_cast<std::size_t>(y)];
      for (int x = 0; x < out_w; ++x) {
        const Tap& b = tx[static_cast<std::size_t>(x)];
        const double top = b.w0 * src.at(c, a.i0, b.i0) + b.w1 * src.at(c, a.i0, b.i1);
        const double bot = b.w0 * src.at(c, a.i1, b.i0) + b.w1 * src.at(c, a.i1, b.i1);
        out.at(c, y, x) = a.w0 * top + a.w1 * bot;
      }
    }
  }
  return out;
}

Image resize_bilinear(const Image& src, int out_h, int out_w) {
  return resample_bilinear(src, 0.0, 0.0, src.width, src.height, out_h, out_w);
}

Image gaussian_blur(const Image& src, double sigma) {
  if (sigma <= 0.0) return src;
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * i * i / (sigma * sigma));
    kernel[static_cast<std::size_t>(i + radius)] = v;
    total += v;
  }
  for (double& v : kernel) v /= total;

  Image tmp(src.channels, src.height, src.width);
  Image out(src.channels, src.height, src.width);
  for (int c = 0; c < src.channels; ++c) {
    for (int y = 0; y < src.height; ++y)
      for (int x = 0; x < src.width; ++x) {
        double acc = 0.0;
        for (int k = -radius; k <= radius; ++k) {
          const int xx = std::clamp(x + k, 0, src.width - 1);
          acc += kernel[static_cast<std::size_t>(k + radius)] * src.at(c, y, xx);
        }
        tmp.at(c, y, x) = acc;
      }
    for (int y = 0; y < src.height; ++y)
      for (int x = 0; x < src.width; ++x) {
        double acc = 0.0;
        for (int k = -radius; k <= radius; ++k) {
          const int yy = std::clamp(y + k, 0, src.height - 1);
          acc += kernel[static_cast<std::size_t>(k + radius)] * tmp.at(c, yy, x);
        }
        out.at(c, y, x) = acc;
      }
  }
  return out;
}

}  // namespace selfdet
