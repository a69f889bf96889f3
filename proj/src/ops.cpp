#include "mhkd/ops.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstring>
#include <string>

#include "mhkd/errors.hpp"
#include "mhkd/kernels.hpp"

namespace mhkd {
namespace {

using kernels::Trans;

#ifndef NDEBUG
template <typename T>
void assert_finite(const Tensor<T>& t, const char* op) {
  for (T v : t.data()) {
    if (!std::isfinite(v)) {
      assert(false && "non-finite value produced by op");
      (void)op;
      return;
    }
  }
}
#else
template <typename T>
void assert_finite(const Tensor<T>&, const char*) {}
#endif

template <typename T>
void require_ndim(const Tensor<T>& t, int ndim, const char* op, const char* what) {
  if (!t.defined()) throw DimensionError(std::string(op) + ": " + what + " is undefined");
  if (t.ndim() != ndim) {
    throw DimensionError(std::string(op) + ": " + what + " must be " + std::to_string(ndim) +
                         "-D, got shape " + shape_str(t.shape()));
  }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

// ---------------------------------------------------------------------------
// conv2d: batched im2col lowering onto the dispatched GEMM.

struct ConvGeometry {
  int batch, in_c, in_h, in_w;
  int out_c, k_h, k_w, stride, pad;
  int out_h, out_w;

  int patch() const { return in_c * k_h * k_w; }
  int out_plane() const { return out_h * out_w; }
  // Images per GEMM call; keeps the column buffer around 8k columns wide.
  int chunk() const { return std::clamp(8192 / std::max(1, out_plane()), 1, batch); }
};

template <typename T>
void im2col(const ConvGeometry& g, const T* x, int first, int count, T* col) {
  const int plane = g.out_plane();
  const int cols = count * plane;
  for (int img = 0; img < count; ++img) {
    const T* xi = x + static_cast<std::size_t>(first + img) * g.in_c * g.in_h * g.in_w;
    for (int c = 0; c < g.in_c; ++c) {
      const T* xc = xi + static_cast<std::size_t>(c) * g.in_h * g.in_w;
      for (int ki = 0; ki < g.k_h; ++ki) {
        for (int kj = 0; kj < g.k_w; ++kj) {
          const int row = (c * g.k_h + ki) * g.k_w + kj;
          T* dst = col + static_cast<std::size_t>(row) * cols + static_cast<std::size_t>(img) * plane;
          for (int oy = 0; oy < g.out_h; ++oy) {
            const int iy = oy * g.stride - g.pad + ki;
            T* drow = dst + oy * g.out_w;
            if (iy < 0 || iy >= g.in_h) {
              std::fill(drow, drow + g.out_w, T{0});
              continue;
            }
            const T* srow = xc + static_cast<std::size_t>(iy) * g.in_w;
            for (int ox = 0; ox < g.out_w; ++ox) {
              const int ix = ox * g.stride - g.pad + kj;
              drow[ox] = (ix >= 0 && ix < g.in_w) ? srow[ix] : T{0};
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const ConvGeometry& g, const T* col, int first, int count, T* dx) {
  const int plane = g.out_plane();
  const int cols = count * plane;
  for (int img = 0; img < count; ++img) {
    T* xi = dx + static_cast<std::size_t>(first + img) * g.in_c * g.in_h * g.in_w;
    for (int c = 0; c < g.in_c; ++c) {
      T* xc = xi + static_cast<std::size_t>(c) * g.in_h * g.in_w;
      for (int ki = 0; ki < g.k_h; ++ki) {
        for (int kj = 0; kj < g.k_w; ++kj) {
          const int row = (c * g.k_h + ki) * g.k_w + kj;
          const T* src =
              col + static_cast<std::size_t>(row) * cols + static_cast<std::size_t>(img) * plane;
          for (int oy = 0; oy < g.out_h; ++oy) {
            const int iy = oy * g.stride - g.pad + ki;
            if (iy < 0 || iy >= g.in_h) continue;
            T* xrow = xc + static_cast<std::size_t>(iy) * g.in_w;
            const T* srow = src + oy * g.out_w;
            for (int ox = 0; ox < g.out_w; ++ox) {
              const int ix = ox * g.stride - g.pad + kj;
              if (ix >= 0 && ix < g.in_w) xrow[ix] += srow[ox];
            }
          }
        }
      }
    }
  }
}

// [count, C, plane] slice of an NCHW tensor <-> [C, count*plane] matrix.
template <typename T>
void nchw_to_channel_major(const T* src, int first, int count, int channels, int plane, T* dst) {
  const int cols = count * plane;
  for (int img = 0; img < count; ++img) {
    const T* s = src + static_cast<std::size_t>(first + img) * channels * plane;
    for (int c = 0; c < channels; ++c) {
      std::memcpy(dst + static_cast<std::size_t>(c) * cols + static_cast<std::size_t>(img) * plane,
                  s + static_cast<std::size_t>(c) * plane, sizeof(T) * plane);
    }
  }
}

template <typename T>
void channel_major_to_nchw(const T* src, int first, int count, int channels, int plane,
                           const T* bias, T* dst) {
  const int cols = count * plane;
  for (int img = 0; img < count; ++img) {
    T* d = dst + static_cast<std::size_t>(first + img) * channels * plane;
    for (int c = 0; c < channels; ++c) {
      const T* s = src + static_cast<std::size_t>(c) * cols + static_cast<std::size_t>(img) * plane;
      T* dc = d + static_cast<std::size_t>(c) * plane;
      const T b = bias ? bias[c] : T{0};
      for (int i = 0; i < plane; ++i) dc[i] = s[i] + b;
    }
  }
}

template <typename T>
Tensor<T> map_unary(GradTape<T>* tape, const Tensor<T>& x, auto forward, auto derivative) {
  Tensor<T> out(x.shape());
  auto xs = x.data();
  auto os = out.data();
  for (std::size_t i = 0; i < xs.size(); ++i) os[i] = forward(xs[i]);
  if (should_record(tape, x)) {
    tape->record(out, [x, out, derivative]() mutable {
      auto g = out.grad();
      auto xs = x.data();
      auto dx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * derivative(xs[i]);
    });
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> conv2d(GradTape<T>* tape, const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias, int stride, int padding) {
  require_ndim(x, 4, "conv2d", "input");
  require_ndim(weight, 4, "conv2d", "weight");
  if (x.dim(1) != weight.dim(1)) {
    throw DimensionError("conv2d: input has C_i=" + std::to_string(x.dim(1)) +
                         " channels but weight " + shape_str(weight.shape()) + " expects " +
                         std::to_string(weight.dim(1)));
  }
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != weight.dim(0))) {
    throw DimensionError("conv2d: bias shape " + shape_str(bias.shape()) + " does not match C_o=" +
                         std::to_string(weight.dim(0)));
  }
  if (stride < 1) throw ConfigError("conv2d: stride must be >= 1, got " + std::to_string(stride));
  if (padding < 0) throw ConfigError("conv2d: padding must be >= 0, got " + std::to_string(padding));

  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2),
                 weight.dim(3), stride, padding, 0, 0};
  const int span_h = g.in_h + 2 * padding - g.k_h;
  const int span_w = g.in_w + 2 * padding - g.k_w;
  if (span_h < 0 || span_w < 0) {
    throw ConfigError("conv2d: kernel " + std::to_string(g.k_h) + "x" + std::to_string(g.k_w) +
                      " does not fit input " + std::to_string(g.in_h) + "x" +
                      std::to_string(g.in_w) + " with padding " + std::to_string(padding) +
                      " (non-positive output size)");
  }
  g.out_h = span_h / stride + 1;
  g.out_w = span_w / stride + 1;

  Tensor<T> out(Shape{g.batch, g.out_c, g.out_h, g.out_w});
  const int chunk = g.chunk();
  std::vector<T> col(static_cast<std::size_t>(g.patch()) * chunk * g.out_plane());
  std::vector<T> res(static_cast<std::size_t>(g.out_c) * chunk * g.out_plane());
  for (int first = 0; first < g.batch; first += chunk) {
    const int count = std::min(chunk, g.batch - first);
    const int cols = count * g.out_plane();
    im2col(g, x.ptr(), first, count, col.data());
    kernels::gemm<T>(Trans::kNo, Trans::kNo, g.out_c, cols, g.patch(), weight.ptr(), g.patch(),
                     col.data(), cols, res.data(), cols, false);
    channel_major_to_nchw(res.data(), first, count, g.out_c, g.out_plane(),
                          bias.defined() ? bias.ptr() : nullptr, out.ptr());
  }
  assert_finite(out, "conv2d");

  if (should_record(tape, x, weight, bias)) {
    tape->record(out, [x, weight, bias, out, g]() mutable {
      const int chunk = g.chunk();
      const int plane = g.out_plane();
      std::vector<T> col(static_cast<std::size_t>(g.patch()) * chunk * plane);
      std::vector<T> dres(static_cast<std::size_t>(g.out_c) * chunk * plane);
      std::vector<T> dcol;
      const T* dout = out.grad().data();
      const bool need_dx = x.requires_grad();
      const bool need_dw = weight.requires_grad();
      const bool need_db = bias.defined() && bias.requires_grad();
      T* dx = need_dx ? x.mutable_grad().data() : nullptr;
      T* dw = need_dw ? weight.mutable_grad().data() : nullptr;
      T* db = need_db ? bias.mutable_grad().data() : nullptr;
      if (need_dx) dcol.resize(col.size());
      for (int first = 0; first < g.batch; first += chunk) {
        const int count = std::min(chunk, g.batch - first);
        const int cols = count * plane;
        nchw_to_channel_major(dout, first, count, g.out_c, plane, dres.data());
        if (need_db) {
          for (int c = 0; c < g.out_c; ++c) {
            const T* row = dres.data() + static_cast<std::size_t>(c) * cols;
            T acc{0};
            for (int i = 0; i < cols; ++i) acc += row[i];
            db[c] += acc;
          }
        }
        if (need_dw) {
          im2col(g, x.ptr(), first, count, col.data());
          kernels::gemm<T>(Trans::kNo, Trans::kYes, g.out_c, g.patch(), cols, dres.data(), cols,
                           col.data(), cols, dw, g.patch(), true);
        }
        if (need_dx) {
          kernels::gemm<T>(Trans::kYes, Trans::kNo, g.patch(), cols, g.out_c, weight.ptr(),
                           g.patch(), dres.data(), cols, dcol.data(), cols, false);
          col2im_add(g, dcol.data(), first, count, dx);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> batchnorm2d(GradTape<T>* tape, const Tensor<T>& x, const Tensor<T>& gamma,
                      const Tensor<T>& beta, Tensor<T>& running_mean, Tensor<T>& running_var,
                      Mode mode, BatchNormOptions options) {
  require_ndim(x, 4, "batchnorm2d", "input");
  const int batch = x.dim(0), channels = x.dim(1), plane = x.dim(2) * x.dim(3);
  for (const Tensor<T>* p : {&gamma, &beta, static_cast<const Tensor<T>*>(&running_mean),
                            static_cast<const Tensor<T>*>(&running_var)}) {
    if (!p->defined() || p->numel() != static_cast<std::size_t>(channels)) {
      throw DimensionError("batchnorm2d: per-channel tensors must have " +
                           std::to_string(channels) + " entries");
    }
  }
  if (!(options.epsilon > 0.0)) throw ConfigError("batchnorm2d: epsilon must be positive");
  const std::size_t count = static_cast<std::size_t>(batch) * plane;
  if (mode == Mode::kTrain && count < 2) {
    throw DegenerateBatchError("batchnorm2d: train mode needs B*H*W >= 2 values per channel, got " +
                               std::to_string(count));
  }

  Tensor<T> out(x.shape());
  std::vector<T> inv_std(channels);
  std::vector<T> normalized(x.numel());
  const T* xp = x.ptr();
  for (int c = 0; c < channels; ++c) {
    double mu, var;
    if (mode == Mode::kTrain) {
      double s = 0.0;
      for (int b = 0; b < batch; ++b) {
        const T* row = xp + (static_cast<std::size_t>(b) * channels + c) * plane;
        for (int i = 0; i < plane; ++i) s += row[i];
      }
      mu = s / static_cast<double>(count);
      double ss = 0.0;
      for (int b = 0; b < batch; ++b) {
        const T* row = xp + (static_cast<std::size_t>(b) * channels + c) * plane;
        for (int i = 0; i < plane; ++i) {
          const double d = row[i] - mu;
          ss += d * d;
        }
      }
      var = ss / static_cast<double>(count);
      const double unbiased = ss / static_cast<double>(count - 1);
      auto rm = running_mean.data();
      auto rv = running_var.data();
      rm[c] = static_cast<T>((1.0 - options.momentum) * rm[c] + options.momentum * mu);
      rv[c] = static_cast<T>((1.0 - options.momentum) * rv[c] + options.momentum * unbiased);
    } else {
      mu = running_mean.data()[c];
      var = running_var.data()[c];
    }
    const T istd = static_cast<T>(1.0 / std::sqrt(var + options.epsilon));
    inv_std[c] = istd;
    const T g = gamma.data()[c], bt = beta.data()[c];
    const T m = static_cast<T>(mu);
    for (int b = 0; b < batch; ++b) {
      const std::size_t off = (static_cast<std::size_t>(b) * channels + c) * plane;
      for (int i = 0; i < plane; ++i) {
        const T xh = (xp[off + i] - m) * istd;
        normalized[off + i] = xh;
        out.ptr()[off + i] = xh * g + bt;
      }
    }
  }
  assert_finite(out, "batchnorm2d");

  if (should_record(tape, x, gamma, beta)) {
    tape->record(out, [x, gamma, beta, out, mode, batch, channels, plane, count,
                       inv_std = std::move(inv_std), normalized = std::move(normalized)]() mutable {
      const T* dy = out.grad().data();
      const bool need_dx = x.requires_grad();
      T* dx = need_dx ? x.mutable_grad().data() : nullptr;
      T* dgamma = gamma.requires_grad() ? gamma.mutable_grad().data() : nullptr;
      T* dbeta = beta.requires_grad() ? beta.mutable_grad().data() : nullptr;
      for (int c = 0; c < channels; ++c) {
        double sum_dy = 0.0, sum_dy_xh = 0.0;
        for (int b = 0; b < batch; ++b) {
          const std::size_t off = (static_cast<std::size_t>(b) * channels + c) * plane;
          for (int i = 0; i < plane; ++i) {
            sum_dy += dy[off + i];
            sum_dy_xh += static_cast<double>(dy[off + i]) * normalized[off + i];
          }
        }
        if (dgamma) dgamma[c] += static_cast<T>(sum_dy_xh);
        if (dbeta) dbeta[c] += static_cast<T>(sum_dy);
        if (!need_dx) continue;
        const T g = gamma.data()[c];
        if (mode == Mode::kEval) {
          const T factor = g * inv_std[c];
          for (int b = 0; b < batch; ++b) {
            const std::size_t off = (static_cast<std::size_t>(b) * channels + c) * plane;
            for (int i = 0; i < plane; ++i) dx[off + i] += dy[off + i] * factor;
          }
        } else {
          const double n = static_cast<double>(count);
          const T factor = static_cast<T>(g * inv_std[c] / n);
          const T total_dy = static_cast<T>(sum_dy);
          const T total_dy_xh = static_cast<T>(sum_dy_xh);
          for (int b = 0; b < batch; ++b) {
            const std::size_t off = (static_cast<std::size_t>(b) * channels + c) * plane;
            for (int i = 0; i < plane; ++i) {
              dx[off + i] += factor * (static_cast<T>(n) * dy[off + i] - total_dy -
                                       normalized[off + i] * total_dy_xh);
            }
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> relu(GradTape<T>* tape, const Tensor<T>& x) {
  return map_unary(
      tape, x, [](T v) { return v > T{0} ? v : T{0}; },
      [](T v) { return v > T{0} ? T{1} : T{0}; });
}

template <typename T>
Tensor<T> linear(GradTape<T>* tape, const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias) {
  require_ndim(x, 2, "linear", "input");
  require_ndim(weight, 2, "linear", "weight");
  const int batch = x.dim(0), fin = x.dim(1), fout = weight.dim(0);
  if (weight.dim(1) != fin) {
    throw DimensionError("linear: input has " + std::to_string(fin) + " features but weight " +
                         shape_str(weight.shape()) + " expects " + std::to_string(weight.dim(1)));
  }
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != fout)) {
    throw DimensionError("linear: bias shape " + shape_str(bias.shape()) +
                         " does not match F_out=" + std::to_string(fout));
  }
  Tensor<T> out(Shape{batch, fout});
  kernels::gemm<T>(Trans::kNo, Trans::kYes, batch, fout, fin, x.ptr(), fin, weight.ptr(), fin,
                   out.ptr(), fout, false);
  if (bias.defined()) {
    for (int b = 0; b < batch; ++b) {
      for (int j = 0; j < fout; ++j) out.ptr()[static_cast<std::size_t>(b) * fout + j] += bias.ptr()[j];
    }
  }
  assert_finite(out, "linear");
  if (should_record(tape, x, weight, bias)) {
    tape->record(out, [x, weight, bias, out, batch, fin, fout]() mutable {
      const T* dy = out.grad().data();
      if (x.requires_grad()) {
        kernels::gemm<T>(Trans::kNo, Trans::kNo, batch, fin, fout, dy, fout, weight.ptr(), fin,
                         x.mutable_grad().data(), fin, true);
      }
      if (weight.requires_grad()) {
        kernels::gemm<T>(Trans::kYes, Trans::kNo, fout, fin, batch, dy, fout, x.ptr(), fin,
                         weight.mutable_grad().data(), fin, true);
      }
      if (bias.defined() && bias.requires_grad()) {
        auto db = bias.mutable_grad();
        for (int b = 0; b < batch; ++b) {
          for (int j = 0; j < fout; ++j) db[j] += dy[static_cast<std::size_t>(b) * fout + j];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> global_avg_pool(GradTape<T>* tape, const Tensor<T>& x) {
  require_ndim(x, 4, "global_avg_pool", "input");
  const int batch = x.dim(0), channels = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (plane < 1) throw DimensionError("global_avg_pool: empty spatial extent");
  Tensor<T> out(Shape{batch, channels});
  const T inv = T{1} / static_cast<T>(plane);
  for (std::size_t bc = 0; bc < out.numel(); ++bc) {
    const T* row = x.ptr() + bc * plane;
    T acc{0};
    for (int i = 0; i < plane; ++i) acc += row[i];
    out.ptr()[bc] = acc * inv;
  }
  if (should_record(tape, x)) {
    tape->record(out, [x, out, plane, inv]() mutable {
      auto g = out.grad();
      T* dx = x.mutable_grad().data();
      for (std::size_t bc = 0; bc < g.size(); ++bc) {
        const T share = g[bc] * inv;
        for (int i = 0; i < plane; ++i) dx[bc * plane + i] += share;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> max_pool2d(GradTape<T>* tape, const Tensor<T>& x, int window, int stride) {
  require_ndim(x, 4, "max_pool2d", "input");
  if (window < 1 || stride < 1) throw ConfigError("max_pool2d: window and stride must be >= 1");
  const int batch = x.dim(0), channels = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (window > h || window > w) {
    throw ConfigError("max_pool2d: window " + std::to_string(window) + " larger than input " +
                      std::to_string(h) + "x" + std::to_string(w));
  }
  const int oh = (h - window) / stride + 1, ow = (w - window) / stride + 1;
  Tensor<T> out(Shape{batch, channels, oh, ow});
  std::vector<std::uint32_t> argmax(out.numel());
  for (int bc = 0; bc < batch * channels; ++bc) {
    const T* plane = x.ptr() + static_cast<std::size_t>(bc) * h * w;
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        int best = (oy * stride) * w + ox * stride;
        for (int ky = 0; ky < window; ++ky) {
          for (int kx = 0; kx < window; ++kx) {
            const int idx = (oy * stride + ky) * w + ox * stride + kx;
            if (plane[idx] > plane[best]) best = idx;  // strict: first maximum wins ties
          }
        }
        const std::size_t o = (static_cast<std::size_t>(bc) * oh + oy) * ow + ox;
        out.ptr()[o] = plane[best];
        argmax[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
  if (should_record(tape, x)) {
    tape->record(out, [x, out, argmax = std::move(argmax), h, w, oh, ow]() mutable {
      auto g = out.grad();
      T* dx = x.mutable_grad().data();
      const std::size_t out_plane = static_cast<std::size_t>(oh) * ow;
      for (std::size_t o = 0; o < g.size(); ++o) {
        const std::size_t bc = o / out_plane;
        dx[bc * h * w + argmax[o]] += g[o];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(GradTape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.ptr()[i] = a.ptr()[i] + b.ptr()[i];
  if (should_record(tape, a, b)) {
    tape->record(out, [a, b, out]() mutable {
      auto g = out.grad();
      for (const Tensor<T>* t : {&a, &b}) {
        if (!t->requires_grad()) continue;
        auto d = t->mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(GradTape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.ptr()[i] = a.ptr()[i] * b.ptr()[i];
  if (should_record(tape, a, b)) {
    tape->record(out, [a, b, out]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto d = a.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * b.ptr()[i];
      }
      if (b.requires_grad()) {
        auto d = b.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * a.ptr()[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(GradTape<T>* tape, const Tensor<T>& x, T factor) {
  return map_unary(
      tape, x, [factor](T v) { return factor * v; }, [factor](T) { return factor; });
}

template <typename T>
Tensor<T> sum(GradTape<T>* tape, const Tensor<T>& x) {
  T acc{0};
  for (T v : x.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (should_record(tape, x)) {
    tape->record(out, [x, out]() mutable {
      const T g = out.grad()[0];
      for (T& d : x.mutable_grad()) d += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(GradTape<T>* tape, const Tensor<T>& x) {
  if (x.numel() == 0) throw DimensionError("mean: empty tensor");
  const T inv = T{1} / static_cast<T>(x.numel());
  T acc{0};
  for (T v : x.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc * inv);
  if (should_record(tape, x)) {
    tape->record(out, [x, out, inv]() mutable {
      const T g = out.grad()[0] * inv;
      for (T& d : x.mutable_grad()) d += g;
    });
  }
  return out;
}

#define MHKD_INSTANTIATE_OPS(T)                                                                  \
  template Tensor<T> conv2d(GradTape<T>*, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,  \
                            int, int);                                                           \
  template Tensor<T> batchnorm2d(GradTape<T>*, const Tensor<T>&, const Tensor<T>&,               \
                                 const Tensor<T>&, Tensor<T>&, Tensor<T>&, Mode,                 \
                                 BatchNormOptions);                                              \
  template Tensor<T> relu(GradTape<T>*, const Tensor<T>&);                                       \
  template Tensor<T> linear(GradTape<T>*, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&); \
  template Tensor<T> global_avg_pool(GradTape<T>*, const Tensor<T>&);                            \
  template Tensor<T> max_pool2d(GradTape<T>*, const Tensor<T>&, int, int);                       \
  template Tensor<T> add(GradTape<T>*, const Tensor<T>&, const Tensor<T>&);                      \
  template Tensor<T> mul(GradTape<T>*, const Tensor<T>&, const Tensor<T>&);                      \
  template Tensor<T> scale(GradTape<T>*, const Tensor<T>&, T);                                   \
  template Tensor<T> sum(GradTape<T>*, const Tensor<T>&);                                        \
  template Tensor<T> mean(GradTape<T>*, const Tensor<T>&);

MHKD_INSTANTIATE_OPS(float)
MHKD_INSTANTIATE_OPS(double)

}  // namespace mhkd
