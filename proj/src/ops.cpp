#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "selfdet/tensor.hpp"

namespace selfdet::nn {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMatrix = Eigen::Map<RowMatrix>;
using ConstMapMatrix = Eigen::Map<const RowMatrix>;

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                              shape_str(b));
}

void require_ndim(const char* op, const Tensor& x, int n) {
  if (x.ndim() != n) {
    throw std::invalid_argument(std::string(op) + ": expected " + std::to_string(n) +
                                "-d input, got shape " + shape_str(x.shape()));
  }
}

template <typename Pred>
void record_branches(std::span<const double> values, Pred pred) {
  KinkRecording* rec = kink_recorder();
  if (!rec) return;
  std::uint64_t word = 0;
  std::size_t bits = 0;
  for (double v : values) {
    word = (word << 2) | static_cast<std::uint64_t>(pred(v));
    if (++bits == 32) {
      rec->mix(word);
      word = 0;
      bits = 0;
    }
  }
  rec->mix(word ^ (bits << 58));
}

enum class Broadcast { kNone, kLeftScalar, kRightScalar };

Broadcast broadcast_mode(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return Broadcast::kNone;
  if (a.ndim() == 0) return Broadcast::kLeftScalar;
  if (b.ndim() == 0) return Broadcast::kRightScalar;
  shape_error(op, a.shape(), b.shape());
}

// Reduces an elementwise gradient onto a (possibly scalar) input.
void accumulate(std::span<double> dst, std::span<const double> src, bool to_scalar) {
  if (to_scalar) {
    double s = 0.0;
    for (double v : src) s += v;
    dst[0] += s;
  } else {
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
  }
}

}  // namespace

Tensor detach(const Tensor& x) { return Tensor::from_data(x.shape(), {x.data().begin(), x.data().end()}); }

Tensor add(const Tensor& a, const Tensor& b) {
  const Broadcast mode = broadcast_mode("add", a, b);
  const Tensor& big = mode == Broadcast::kLeftScalar ? b : a;
  std::vector<double> out(big.size());
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = av[mode == Broadcast::kLeftScalar ? 0 : i] + bv[mode == Broadcast::kRightScalar ? 0 : i];
  }
  return make_op("add", big.shape(), std::move(out), {a, b}, [mode](BackwardContext& ctx) {
    if (ctx.needs_grad(0)) accumulate(ctx.grad(0), ctx.grad_out(), mode == Broadcast::kLeftScalar);
    if (ctx.needs_grad(1)) accumulate(ctx.grad(1), ctx.grad_out(), mode == Broadcast::kRightScalar);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  const Broadcast mode = broadcast_mode("sub", a, b);
  const Tensor& big = mode == Broadcast::kLeftScalar ? b : a;
  std::vector<double> out(big.size());
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = av[mode == Broadcast::kLeftScalar ? 0 : i] - bv[mode == Broadcast::kRightScalar ? 0 : i];
  }
  return make_op("sub", big.shape(), std::move(out), {a, b}, [mode](BackwardContext& ctx) {
    if (ctx.needs_grad(0)) accumulate(ctx.grad(0), ctx.grad_out(), mode == Broadcast::kLeftScalar);
    if (ctx.needs_grad(1)) {
      std::vector<double> neg(ctx.grad_out().begin(), ctx.grad_out().end());
      for (double& v : neg) v = -v;
      accumulate(ctx.grad(1), neg, mode == Broadcast::kRightScalar);
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const Broadcast mode = broadcast_mode("mul", a, b);
  const Tensor& big = mode == Broadcast::kLeftScalar ? b : a;
  const std::size_t n = big.size();
  std::vector<double> out(n);
  auto av = a.data(), bv = b.data();
  auto ia = [mode](std::size_t i) { return mode == Broadcast::kLeftScalar ? 0 : i; };
  auto ib = [mode](std::size_t i) { return mode == Broadcast::kRightScalar ? 0 : i; };
  for (std::size_t i = 0; i < n; ++i) out[i] = av[ia(i)] * bv[ib(i)];
  return make_op("mul", big.shape(), std::move(out), {a, b}, [mode, n, ia, ib](BackwardContext& ctx) {
    auto g = ctx.grad_out();
    auto av = ctx.input(0), bv = ctx.input(1);
    if (ctx.needs_grad(0)) {
      std::vector<double> t(n);
      for (std::size_t i = 0; i < n; ++i) t[i] = g[i] * bv[ib(i)];
      accumulate(ctx.grad(0), t, mode == Broadcast::kLeftScalar);
    }
    if (ctx.needs_grad(1)) {
      std::vector<double> t(n);
      for (std::size_t i = 0; i < n; ++i) t[i] = g[i] * av[ia(i)];
      accumulate(ctx.grad(1), t, mode == Broadcast::kRightScalar);
    }
  });
}

Tensor scale(const Tensor& x, double s) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (double& v : out) v *= s;
  return make_op("scale", x.shape(), std::move(out), {x}, [s](BackwardContext& ctx) {
    auto g = ctx.grad_out();
    auto dx = ctx.grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += s * g[i];
  });
}

Tensor add_scalar(const Tensor& x, double s) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (double& v : out) v += s;
  return make_op("add_scalar", x.shape(), std::move(out), {x}, [](BackwardContext& ctx) {
    accumulate(ctx.grad(0), ctx.grad_out(), false);
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_ndim("matmul", a, 2);
  require_ndim("matmul", b, 2);
  if (a.dim(1) != b.dim(0)) shape_error("matmul", a.shape(), b.shape());
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(static_cast<std::size_t>(m) * n);
  MapMatrix(out.data(), m, n).noalias() =
      ConstMapMatrix(a.data().data(), m, k) * ConstMapMatrix(b.data().data(), k, n);
  return make_op("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](BackwardContext& ctx) {
    ConstMapMatrix g(ctx.grad_out().data(), m, n);
    if (ctx.needs_grad(0)) {
      MapMatrix(ctx.grad(0).data(), m, k).noalias() +=
          g * ConstMapMatrix(ctx.input(1).data(), k, n).transpose();
    }
    if (ctx.needs_grad(1)) {
      MapMatrix(ctx.grad(1).data(), k, n).noalias() +=
          ConstMapMatrix(ctx.input(0).data(), m, k).transpose() * g;
    }
  });
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  require_ndim("add_row_bias", x, 2);
  require_ndim("add_row_bias", bias, 1);
  if (x.dim(1) != bias.dim(0)) shape_error("add_row_bias", x.shape(), bias.shape());
  const int rows = x.dim(0), cols = x.dim(1);
  std::vector<double> out(x.data().begin(), x.data().end());
  auto bv = bias.data();
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) out[static_cast<std::size_t>(r) * cols + c] += bv[static_cast<std::size_t>(c)];
  return make_op("add_row_bias", x.shape(), std::move(out), {x, bias},
                 [rows, cols](BackwardContext& ctx) {
                   auto g = ctx.grad_out();
                   if (ctx.needs_grad(0)) accumulate(ctx.grad(0), g, false);
                   if (ctx.needs_grad(1)) {
                     auto db = ctx.grad(1);
                     for (int r = 0; r < rows; ++r)
                       for (int c = 0; c < cols; ++c)
                         db[static_cast<std::size_t>(c)] += g[static_cast<std::size_t>(r) * cols + c];
                   }
                 });
}

namespace {

struct ConvGeometry {
  int channels, height, width, kernel_h, kernel_w, stride, pad, out_h, out_w;
  std::size_t patch() const { return static_cast<std::size_t>(channels) * kernel_h * kernel_w; }
  std::size_t positions() const { return static_cast<std::size_t>(out_h) * out_w; }
  bool pointwise() const { return kernel_h == 1 && kernel_w == 1 && stride == 1 && pad == 0; }
};

void im2col(const double* x, const ConvGeometry& g, double* cols) {
  const std::size_t positions = g.positions();
  for (int c = 0; c < g.channels; ++c) {
    for (int ky = 0; ky < g.kernel_h; ++ky) {
      for (int kx = 0; kx < g.kernel_w; ++kx) {
        double* row = cols + ((static_cast<std::size_t>(c) * g.kernel_h + ky) * g.kernel_w + kx) * positions;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          double* dst = row + static_cast<std::size_t>(oy) * g.out_w;
          if (iy < 0 || iy >= g.height) {
            std::fill(dst, dst + g.out_w, 0.0);
            continue;
          }
          const double* src = x + (static_cast<std::size_t>(c) * g.height + iy) * g.width;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            dst[ox] = (ix >= 0 && ix < g.width) ? src[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, const ConvGeometry& g, double* dx) {
  const std::size_t positions = g.positions();
  for (int c = 0; c < g.channels; ++c) {
    for (int ky = 0; ky < g.kernel_h; ++ky) {
      for (int kx = 0; kx < g.kernel_w; ++kx) {
        const double* row =
            cols + ((static_cast<std::size_t>(c) * g.kernel_h + ky) * g.kernel_w + kx) * positions;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.height) continue;
          const double* src = row + static_cast<std::size_t>(oy) * g.out_w;
          double* dst = dx + (static_cast<std::size_t>(c) * g.height + iy) * g.width;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.width) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int pad) {
  require_ndim("conv2d", x, 3);
  require_ndim("conv2d", weight, 4);
  if (weight.dim(1) != x.dim(0)) shape_error("conv2d", x.shape(), weight.shape());
  if (stride < 1 || pad < 0) throw std::invalid_argument("conv2d: stride must be >= 1, pad >= 0");
  const bool has_bias = bias.defined();
  if (has_bias && (bias.ndim() != 1 || bias.dim(0) != weight.dim(0))) {
    shape_error("conv2d", weight.shape(), bias.shape());
  }
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), weight.dim(2), weight.dim(3), stride, pad, 0, 0};
  g.out_h = (g.height + 2 * pad - g.kernel_h) / stride + 1;
  g.out_w = (g.width + 2 * pad - g.kernel_w) / stride + 1;
  if (g.out_h <= 0 || g.out_w <= 0) shape_error("conv2d", x.shape(), weight.shape());
  const int out_c = weight.dim(0);
  const auto patch = static_cast<Eigen::Index>(g.patch());
  const auto positions = static_cast<Eigen::Index>(g.positions());

  std::shared_ptr<std::vector<double>> cols;
  const double* col_ptr = x.data().data();
  if (!g.pointwise()) {
    cols = std::make_shared<std::vector<double>>(g.patch() * g.positions());
    im2col(x.data().data(), g, cols->data());
    col_ptr = cols->data();
  }
  std::vector<double> out(static_cast<std::size_t>(out_c) * g.positions());
  MapMatrix out_m(out.data(), out_c, positions);
  out_m.noalias() = ConstMapMatrix(weight.data().data(), out_c, patch) *
                    ConstMapMatrix(col_ptr, patch, positions);
  if (has_bias) {
    auto bv = bias.data();
    for (int o = 0; o < out_c; ++o) out_m.row(o).array() += bv[static_cast<std::size_t>(o)];
  }

  std::vector<Tensor> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  // Keep the column buffer only when a gradient will be needed.
  if (!(grad_enabled() && (x.requires_grad() || weight.requires_grad() ||
                           (has_bias && bias.requires_grad())))) {
    cols.reset();
  }
  return make_op("conv2d", {out_c, g.out_h, g.out_w}, std::move(out), std::move(inputs),
                 [g, out_c, patch, positions, has_bias, cols](BackwardContext& ctx) {
                   ConstMapMatrix dout(ctx.grad_out().data(), out_c, positions);
                   if (ctx.needs_grad(1)) {
                     const double* cp = cols ? cols->data() : ctx.input(0).data();
                     MapMatrix(ctx.grad(1).data(), out_c, patch).noalias() +=
                         dout * ConstMapMatrix(cp, patch, positions).transpose();
                   }
                   if (has_bias && ctx.needs_grad(2)) {
                     auto db = ctx.grad(2);
                     for (int o = 0; o < out_c; ++o) db[static_cast<std::size_t>(o)] += dout.row(o).sum();
                   }
                   if (ctx.needs_grad(0)) {
                     ConstMapMatrix w(ctx.input(1).data(), out_c, patch);
                     if (g.pointwise()) {
                       MapMatrix(ctx.grad(0).data(), patch, positions).noalias() += w.transpose() * dout;
                     } else {
                       RowMatrix dcols = w.transpose() * dout;
                       col2im_add(dcols.data(), g, ctx.grad(0).data());
                     }
                   }
                 });
}

Tensor max_pool2d(const Tensor& x, int kernel, int stride) {
  require_ndim("max_pool2d", x, 3);
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int oh = (h - kernel) / stride + 1, ow = (w - kernel) / stride + 1;
  if (oh <= 0 || ow <= 0) throw std::invalid_argument("max_pool2d: input " + shape_str(x.shape()) + " too small");
  auto xv = x.data();
  std::vector<double> out(static_cast<std::size_t>(c) * oh * ow);
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  std::size_t o = 0;
  for (int ch = 0; ch < c; ++ch) {
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox, ++o) {
        std::size_t best = (static_cast<std::size_t>(ch) * h + oy * stride) * w + ox * stride;
        for (int ky = 0; ky < kernel; ++ky)
          for (int kx = 0; kx < kernel; ++kx) {
            const std::size_t idx = (static_cast<std::size_t>(ch) * h + oy * stride + ky) * w + ox * stride + kx;
            if (xv[idx] > xv[best]) best = idx;
          }
        out[o] = xv[best];
        (*argmax)[o] = best;
      }
    }
  }
  if (KinkRecording* rec = kink_recorder()) {
    for (std::size_t idx : *argmax) rec->mix(idx);
  }
  return make_op("max_pool2d", {c, oh, ow}, std::move(out), {x}, [argmax](BackwardContext& ctx) {
    auto g = ctx.grad_out();
    auto dx = ctx.grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) dx[(*argmax)[i]] += g[i];
  });
}

Tensor upsample_nearest2x(const Tensor& x) {
  require_ndim("upsample_nearest2x", x, 3);
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  auto xv = x.data();
  std::vector<double> out(static_cast<std::size_t>(c) * 4 * h * w);
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < 2 * h; ++y)
      for (int xx = 0; xx < 2 * w; ++xx)
        out[(static_cast<std::size_t>(ch) * 2 * h + y) * 2 * w + xx] =
            xv[(static_cast<std::size_t>(ch) * h + y / 2) * w + xx / 2];
  return make_op("upsample_nearest2x", {c, 2 * h, 2 * w}, std::move(out), {x},
                 [c, h, w](BackwardContext& ctx) {
                   auto g = ctx.grad_out();
                   auto dx = ctx.grad(0);
                   for (int ch = 0; ch < c; ++ch)
                     for (int y = 0; y < 2 * h; ++y)
                       for (int xx = 0; xx < 2 * w; ++xx)
                         dx[(static_cast<std::size_t>(ch) * h + y / 2) * w + xx / 2] +=
                             g[(static_cast<std::size_t>(ch) * 2 * h + y) * 2 * w + xx];
                 });
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (double& v : out) v = v > 0.0 ? v : 0.0;
  record_branches(x.data(), [](double v) { return v > 0.0; });
  return make_op("relu", x.shape(), std::move(out), {x}, [](BackwardContext& ctx) {
    auto g = ctx.grad_out();
    auto xv = ctx.input(0);
    auto dx = ctx.grad(0);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > 0.0) dx[i] += g[i];
  });
}

Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.size());
  auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = xv[i];
    out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  return make_op("sigmoid", x.shape(), std::move(out), {x}, [](BackwardContext& ctx) {
    auto g = ctx.grad_out();
    auto y = ctx.output();
    auto dx = ctx.grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

Tensor log(const Tensor& x) {
  std::vector<double> out(x.size());
  auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(xv[i]);
  return make_op("log", x.shape(), std::move(out), {x}, [](BackwardContext& ctx) {
    auto g = ctx.grad_out();
    auto xv = ctx.input(0);
    auto dx = ctx.grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] / xv[i];
  });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (double& v : out) v = std::clamp(v, lo, hi);
  record_branches(x.data(), [lo, hi](double v) { return v < lo ? 0 : (v > hi ? 2 : 1); });
  return make_op("clamp", x.shape(), std::move(out), {x}, [lo, hi](BackwardContext& ctx) {
    auto g = ctx.grad_out();
    auto xv = ctx.input(0);
    auto dx = ctx.grad(0);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] >= lo && xv[i] <= hi) dx[i] += g[i];
  });
}

Tensor smooth_l1(const Tensor& x) {
  std::vector<double> out(x.size());
  auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double a = std::abs(xv[i]);
    out[i] = a < 1.0 ? 0.5 * xv[i] * xv[i] : a - 0.5;
  }
  record_branches(x.data(), [](double v) { return std::abs(v) < 1.0 ? 1 : (v > 0 ? 2 : 0); });
  return make_op("smooth_l1", x.shape(), std::move(out), {x}, [](BackwardContext& ctx) {
    auto g = ctx.grad_out();
    auto xv = ctx.input(0);
    auto dx = ctx.grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xv[i];
      const double d = std::abs(v) < 1.0 ? v : (v > 0.0 ? 1.0 : -1.0);
      dx[i] += g[i] * d;
    }
  });
}

Tensor softmax(const Tensor& x) {
  if (x.ndim() != 1 && x.ndim() != 2) throw std::invalid_argument("softmax: expected 1-d or 2-d input, got " + shape_str(x.shape()));
  const int cols = x.dim(-1);
  const int rows = static_cast<int>(x.size()) / std::max(cols, 1);
  auto xv = x.data();
  std::vector<double> out(x.size());
  for (int r = 0; r < rows; ++r) {
    const std::size_t base = static_cast<std::size_t>(r) * cols;
    double mx = -INFINITY;
    for (int c = 0; c < cols; ++c) mx = std::max(mx, xv[base + c]);
    double total = 0.0;
    for (int c = 0; c < cols; ++c) total += out[base + c] = std::exp(xv[base + c] - mx);
    for (int c = 0; c < cols; ++c) out[base + c] /= total;
  }
  return make_op("softmax", x.shape(), std::move(out), {x}, [rows, cols](BackwardContext& ctx) {
    auto g = ctx.grad_out();
    auto y = ctx.output();
    auto dx = ctx.grad(0);
    for (int r = 0; r < rows; ++r) {
      const std::size_t base = static_cast<std::size_t>(r) * cols;
      double dot = 0.0;
      for (int c = 0; c < cols; ++c) dot += g[base + c] * y[base + c];
      for (int c = 0; c < cols; ++c) dx[base + c] += y[base + c] * (g[base + c] - dot);
    }
  });
}

Tensor l2_normalize(const Tensor& x, int axis, double eps) {
  if (x.ndim() == 1 && axis == 0) {
    return reshape(l2_normalize(reshape(x, {1, x.dim(0)}), 1, eps), x.shape());
  }
  if (x.ndim() != 2 || (axis != 0 && axis != 1)) {
    throw std::invalid_argument("l2_normalize: unsupported axis " + std::to_string(axis) +
                                " for shape " + shape_str(x.shape()));
  }
  const int rows = x.dim(0), cols = x.dim(1);
  // Index helpers: `lines` vectors of length `len`, element j of line i at i*outer + j*inner.
  const int lines = axis == 1 ? rows : cols;
  const int len = axis == 1 ? cols : rows;
  const std::size_t outer = axis == 1 ? static_cast<std::size_t>(cols) : 1;
  const std::size_t inner = axis == 1 ? 1 : static_cast<std::size_t>(cols);
  auto xv = x.data();
  std::vector<double> out(x.size());
  auto norms = std::make_shared<std::vector<double>>(static_cast<std::size_t>(lines));
  for (int i = 0; i < lines; ++i) {
    double ss = 0.0;
    for (int j = 0; j < len; ++j) {
      const double v = xv[i * outer + j * inner];
      ss += v * v;
    }
    const double n = std::max(std::sqrt(ss), eps);
    (*norms)[static_cast<std::size_t>(i)] = n;
    for (int j = 0; j < len; ++j) out[i * outer + j * inner] = xv[i * outer + j * inner] / n;
  }
  return make_op("l2_normalize", x.shape(), std::move(out), {x},
                 [lines, len, outer, inner, eps, norms](BackwardContext& ctx) {
                   auto g = ctx.grad_out();
                   auto y = ctx.output();
                   auto dx = ctx.grad(0);
                   for (int i = 0; i < lines; ++i) {
                     const double n = (*norms)[static_cast<std::size_t>(i)];
                     const bool clamped = n <= eps;
                     double dot = 0.0;
                     for (int j = 0; j < len; ++j) dot += g[i * outer + j * inner] * y[i * outer + j * inner];
                     for (int j = 0; j < len; ++j) {
                       const std::size_t k = i * outer + j * inner;
                       dx[k] += clamped ? g[k] / n : (g[k] - y[k] * dot) / n;
                     }
                   }
                 });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_op("sum", {}, {s}, {x}, [](BackwardContext& ctx) {
    const double g = ctx.grad_out()[0];
    for (double& d : ctx.grad(0)) d += g;
  });
}

Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw std::invalid_argument("mean: empty tensor");
  double s = 0.0;
  for (double v : x.data()) s += v;
  const double n = static_cast<double>(x.size());
  return make_op("mean", {}, {s / n}, {x}, [n](BackwardContext& ctx) {
    const double g = ctx.grad_out()[0] / n;
    for (double& d : ctx.grad(0)) d += g;
  });
}

Tensor sum_axis(const Tensor& x, int axis) {
  require_ndim("sum_axis", x, 2);
  if (axis != 0 && axis != 1) throw std::invalid_argument("sum_axis: axis must be 0 or 1");
  const int rows = x.dim(0), cols = x.dim(1);
  auto xv = x.data();
  std::vector<double> out(static_cast<std::size_t>(axis == 1 ? rows : cols), 0.0);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) out[static_cast<std::size_t>(axis == 1 ? r : c)] += xv[static_cast<std::size_t>(r) * cols + c];
  Shape shape{axis == 1 ? rows : cols};
  return make_op("sum_axis", std::move(shape), std::move(out), {x}, [rows, cols, axis](BackwardContext& ctx) {
    auto g = ctx.grad_out();
    auto dx = ctx.grad(0);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) dx[static_cast<std::size_t>(r) * cols + c] += g[static_cast<std::size_t>(axis == 1 ? r : c)];
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  return make_op("reshape", std::move(shape), {x.data().begin(), x.data().end()}, {x},
                 [](BackwardContext& ctx) { accumulate(ctx.grad(0), ctx.grad_out(), false); });
}

Tensor gather(const Tensor& x, std::span<const std::size_t> indices) {
  auto xv = x.data();
  auto idx = std::make_shared<std::vector<std::size_t>>(indices.begin(), indices.end());
  std::vector<double> out(idx->size());
  for (std::size_t i = 0; i < idx->size(); ++i) {
    if ((*idx)[i] >= xv.size()) {
      throw std::out_of_range("gather: index " + std::to_string((*idx)[i]) + " out of range for " +
                              shape_str(x.shape()));
    }
    out[i] = xv[(*idx)[i]];
  }
  return make_op("gather", {static_cast<int>(idx->size())}, std::move(out), {x}, [idx](BackwardContext& ctx) {
    auto g = ctx.grad_out();
    auto dx = ctx.grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) dx[(*idx)[i]] += g[i];
  });
}

Tensor concat(std::span<const Tensor> parts) {
  std::vector<double> out;
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  auto offsets = std::make_shared<std::vector<std::size_t>>();
  for (const Tensor& t : parts) {
    offsets->push_back(out.size());
    out.insert(out.end(), t.data().begin(), t.data().end());
  }
  const int total = static_cast<int>(out.size());
  return make_op("concat", {total}, std::move(out), std::move(inputs), [offsets](BackwardContext& ctx) {
    auto g = ctx.grad_out();
    for (std::size_t p = 0; p < offsets->size(); ++p) {
      if (!ctx.needs_grad(p)) continue;
      auto dx = ctx.grad(p);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[(*offsets)[p] + i];
    }
  });
}

namespace {

struct BilinearTap {
  bool inside = false;
  int y0 = 0, x0 = 0, y1 = 0, x1 = 0;
  double wy0 = 0, wx0 = 0, wy1 = 0, wx1 = 0;
};

BilinearTap bilinear_tap(double y, double x, int h, int w) {
  BilinearTap t;
  if (y < -1.0 || y > h || x < -1.0 || x > w) return t;
  t.inside = true;
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  t.y0 = static_cast<int>(std::floor(y));
  t.x0 = static_cast<int>(std::floor(x));
  t.y1 = std::min(t.y0 + 1, h - 1);
  t.x1 = std::min(t.x0 + 1, w - 1);
  const double ly = y - t.y0, lx = x - t.x0;
  t.wy0 = 1.0 - ly;
  t.wy1 = ly;
  t.wx0 = 1.0 - lx;
  t.wx1 = lx;
  return t;
}

}  // namespace

Tensor bilinear_sample(const Tensor& x, std::span<const std::array<double, 2>> points) {
  require_ndim("bilinear_sample", x, 3);
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int n = static_cast<int>(points.size());
  auto taps = std::make_shared<std::vector<BilinearTap>>();
  taps->reserve(points.size());
  for (const auto& p : points) taps->push_back(bilinear_tap(p[0], p[1], h, w));
  auto xv = x.data();
  std::vector<double> out(static_cast<std::size_t>(c) * n, 0.0);
  for (int ch = 0; ch < c; ++ch) {
    const double* plane = xv.data() + static_cast<std::size_t>(ch) * h * w;
    for (int i = 0; i < n; ++i) {
      const BilinearTap& t = (*taps)[static_cast<std::size_t>(i)];
      if (!t.inside) continue;
      out[static_cast<std::size_t>(ch) * n + i] =
          t.wy0 * (t.wx0 * plane[t.y0 * w + t.x0] + t.wx1 * plane[t.y0 * w + t.x1]) +
          t.wy1 * (t.wx0 * plane[t.y1 * w + t.x0] + t.wx1 * plane[t.y1 * w + t.x1]);
    }
  }
  return make_op("bilinear_sample", {c, n}, std::move(out), {x}, [taps, c, h, w, n](BackwardContext& ctx) {
    auto g = ctx.grad_out();
    auto dx = ctx.grad(0);
    for (int ch = 0; ch < c; ++ch) {
      double* plane = dx.data() + static_cast<std::size_t>(ch) * h * w;
      for (int i = 0; i < n; ++i) {
        const BilinearTap& t = (*taps)[static_cast<std::size_t>(i)];
        if (!t.inside) continue;
        const double gi = g[static_cast<std::size_t>(ch) * n + i];
        plane[t.y0 * w + t.x0] += gi * t.wy0 * t.wx0;
        plane[t.y0 * w + t.x1] += gi * t.wy0 * t.wx1;
        plane[t.y1 * w + t.x0] += gi * t.wy1 * t.wx0;
        plane[t.y1 * w + t.x1] += gi * t.wy1 * t.wx1;
      }
    }
  });
}

Tensor roi_align(std::span<const Tensor> levels, std::span<const RoiRequest> rois, int out_size,
                 int sampling) {
  if (levels.empty()) throw std::invalid_argument("roi_align: no feature levels");
  if (out_size < 1 || sampling < 1) throw std::invalid_argument("roi_align: out_size and sampling must be >= 1");
  const int c = levels[0].dim(0);
  for (const Tensor& l : levels) {
    require_ndim("roi_align", l, 3);
    if (l.dim(0) != c) shape_error("roi_align", levels[0].shape(), l.shape());
  }
  const std::size_t bins = static_cast<std::size_t>(out_size) * out_size;
  const std::size_t per_bin = static_cast<std::size_t>(sampling) * sampling;
  const double inv = 1.0 / static_cast<double>(per_bin);

  // taps[r][bin * per_bin + s]
  auto taps = std::make_shared<std::vector<BilinearTap>>(rois.size() * bins * per_bin);
  auto roi_levels = std::make_shared<std::vector<std::size_t>>();
  for (std::size_t r = 0; r < rois.size(); ++r) {
    const RoiRequest& q = rois[r];
    if (q.level >= levels.size()) throw std::out_of_range("roi_align: level index out of range");
    roi_levels->push_back(q.level);
    const int h = levels[q.level].dim(1), w = levels[q.level].dim(2);
    const double x1 = q.x1 - 0.5, y1 = q.y1 - 0.5;
    const double bin_w = (q.x2 - q.x1) / out_size, bin_h = (q.y2 - q.y1) / out_size;
    for (int by = 0; by < out_size; ++by)
      for (int bx = 0; bx < out_size; ++bx)
        for (int sy = 0; sy < sampling; ++sy)
          for (int sx = 0; sx < sampling; ++sx) {
            const double y = y1 + by * bin_h + (sy + 0.5) * bin_h / sampling;
            const double x = x1 + bx * bin_w + (sx + 0.5) * bin_w / sampling;
            (*taps)[(r * bins + static_cast<std::size_t>(by * out_size + bx)) * per_bin +
                    static_cast<std::size_t>(sy * sampling + sx)] = bilinear_tap(y, x, h, w);
          }
  }

  std::vector<double> out(rois.size() * static_cast<std::size_t>(c) * bins, 0.0);
  for (std::size_t r = 0; r < rois.size(); ++r) {
    const Tensor& level = levels[(*roi_levels)[r]];
    const int h = level.dim(1), w = level.dim(2);
    auto lv = level.data();
    for (int ch = 0; ch < c; ++ch) {
      const double* plane = lv.data() + static_cast<std::size_t>(ch) * h * w;
      for (std::size_t b = 0; b < bins; ++b) {
        double acc = 0.0;
        for (std::size_t s = 0; s < per_bin; ++s) {
          const BilinearTap& t = (*taps)[(r * bins + b) * per_bin + s];
          if (!t.inside) continue;
          acc += t.wy0 * (t.wx0 * plane[t.y0 * w + t.x0] + t.wx1 * plane[t.y0 * w + t.x1]) +
                 t.wy1 * (t.wx0 * plane[t.y1 * w + t.x0] + t.wx1 * plane[t.y1 * w + t.x1]);
        }
        out[(r * c + static_cast<std::size_t>(ch)) * bins + b] = acc * inv;
      }
    }
  }

  std::vector<Tensor> inputs(levels.begin(), levels.end());
  std::vector<Shape> level_shapes;
  for (const Tensor& l : levels) level_shapes.push_back(l.shape());
  const std::size_t n_rois = rois.size();
  return make_op("roi_align", {static_cast<int>(rois.size()), c, out_size, out_size}, std::move(out),
                 std::move(inputs),
                 [taps, roi_levels, level_shapes, c, bins, per_bin, inv, n_rois](BackwardContext& ctx) {
                   auto g = ctx.grad_out();
                   for (std::size_t r = 0; r < n_rois; ++r) {
                     const std::size_t li = (*roi_levels)[r];
                     if (!ctx.needs_grad(li)) continue;
                     const int h = level_shapes[li][1], w = level_shapes[li][2];
                     auto dl = ctx.grad(li);
                     for (int ch = 0; ch < c; ++ch) {
                       double* plane = dl.data() + static_cast<std::size_t>(ch) * h * w;
                       for (std::size_t b = 0; b < bins; ++b) {
                         const double gb = g[(r * c + static_cast<std::size_t>(ch)) * bins + b] * inv;
                         for (std::size_t s = 0; s < per_bin; ++s) {
                           const BilinearTap& t = (*taps)[(r * bins + b) * per_bin + s];
                           if (!t.inside) continue;
                           plane[t.y0 * w + t.x0] += gb * t.wy0 * t.wx0;
                           plane[t.y0 * w + t.x1] += gb * t.wy0 * t.wx1;
                           plane[t.y1 * w + t.x0] += gb * t.wy1 * t.wx0;
                           plane[t.y1 * w + t.x1] += gb * t.wy1 * t.wx1;
                         }
                       }
                     }
                   }
                 });
}

}  // namespace selfdet::nn
