// SPDX-License-Identifier: Apache-2.0

#include "lorkd/ops.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <string>

#include <fmt/format.h>
#include <omp.h>

namespace lorkd {

void ConvGeometry::validate() const {
  if (in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 || groups == 0) {
    throw ShapeError(fmt::format("conv geometry has a zero count (C_in={}, C_out={}, k={}, stride={}, groups={})",
                                 in_channels, out_channels, kernel, stride, groups));
  }
  if (in_channels % groups != 0) {
    throw ShapeError(fmt::format("C_in={} not divisible by groups={}", in_channels, groups));
  }
  if (out_channels % groups != 0) {
    throw ShapeError(fmt::format("C_out={} not divisible by groups={}", out_channels, groups));
  }
}

std::size_t ConvGeometry::output_extent(std::size_t extent) const {
  const std::size_t padded = extent + 2 * padding;
  if (padded < kernel) {
    throw ShapeError(fmt::format("non-positive output size: extent {} + 2*padding {} < kernel {}", extent,
                                 padding, kernel));
  }
  return (padded - kernel) / stride + 1;
}

namespace {

std::atomic<std::uint64_t> g_forward_launches{0};
std::atomic<std::uint64_t> g_backward_launches{0};
std::atomic<std::uint64_t> g_forward_flops{0};

struct ConvDims {
  std::size_t batch, in_h, in_w, out_h, out_w, cin_g, cout_g;
};

template <typename T>
ConvDims check_conv(const Tensor<T>& input, const Tensor<T>& weight, const ConvGeometry& g) {
  g.validate();
  if (input.rank() != 4) {
    throw ShapeError(fmt::format("conv2d input must be [B,C_in,H,W], got {}", shape_string(input.shape())));
  }
  if (input.dim(1) != g.in_channels) {
    throw ShapeError(fmt::format("conv2d input channel dimension (axis 1) is {}, geometry expects C_in={}",
                                 input.dim(1), g.in_channels));
  }
  const Shape ws = g.weight_shape();
  if (weight.shape() != ws) {
    const char* names[] = {"C_out", "C_in/groups", "kernel rows", "kernel cols"};
    std::string which = "rank";
    if (weight.rank() == 4) {
      for (std::size_t i = 0; i < 4; ++i)
        if (weight.dim(i) != ws[i]) {
          which = names[i];
          break;
        }
    }
    throw ShapeError(fmt::format("conv2d weight shape {} does not match geometry {} (mismatch in {})",
                                 shape_string(weight.shape()), shape_string(ws), which));
  }
  ConvDims d{};
  d.batch = input.dim(0);
  d.in_h = input.dim(2);
  d.in_w = input.dim(3);
  d.out_h = g.output_extent(d.in_h);
  d.out_w = g.output_extent(d.in_w);
  d.cin_g = g.in_channels / g.groups;
  d.cout_g = g.out_channels / g.groups;
  return d;
}

/// Range of output positions o in [0, out) with 0 <= o*stride + offset - pad < in.
inline void valid_range(std::size_t out, std::size_t in, std::size_t stride, std::size_t offset,
                        std::size_t pad, std::size_t& lo, std::size_t& hi) {
  // o*stride + offset >= pad
  lo = offset >= pad ? 0 : (pad - offset + stride - 1) / stride;
  // o*stride + offset - pad <= in - 1
  const std::size_t limit = in - 1 + pad;
  if (offset > limit) {
    lo = hi = 0;
    return;
  }
  hi = std::min(out, (limit - offset) / stride + 1);
  if (lo > hi) lo = hi;
}

}  // namespace

KernelCounters kernel_counters() {
  return {g_forward_launches.load(), g_backward_launches.load(), g_forward_flops.load()};
}

void reset_kernel_counters() {
  g_forward_launches = 0;
  g_backward_launches = 0;
  g_forward_flops = 0;
}

int configure_threads_from_env() {
  int threads = 1;
  if (const char* env = std::getenv("LORKD_THREADS")) {
    const int parsed = std::atoi(env);
    if (parsed > 0) threads = parsed;
  }
  omp_set_num_threads(threads);
  return threads;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const ConvGeometry& g) {
  const ConvDims d = check_conv(input, weight, g);
  Tensor<T> out({d.batch, g.out_channels, d.out_h, d.out_w});
  const std::size_t k = g.kernel, s = g.stride, p = g.padding;
  const std::size_t in_plane = d.in_h * d.in_w, out_plane = d.out_h * d.out_w;
  const T* in = input.raw();
  const T* w = weight.raw();
  T* o = out.raw();
  const std::ptrdiff_t units = static_cast<std::ptrdiff_t>(d.batch * g.out_channels);

#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t unit = 0; unit < units; ++unit) {
    const std::size_t n = static_cast<std::size_t>(unit) / g.out_channels;
    const std::size_t oc = static_cast<std::size_t>(unit) % g.out_channels;
    const std::size_t group = oc / d.cout_g;
    T* dst = o + (n * g.out_channels + oc) * out_plane;
    for (std::size_t icg = 0; icg < d.cin_g; ++icg) {
      const std::size_t ic = group * d.cin_g + icg;
      const T* src = in + (n * g.in_channels + ic) * in_plane;
      const T* wk = w + (oc * d.cin_g + icg) * k * k;
      for (std::size_t kr = 0; kr < k; ++kr) {
        std::size_t oh_lo, oh_hi;
        valid_range(d.out_h, d.in_h, s, kr, p, oh_lo, oh_hi);
        for (std::size_t kc = 0; kc < k; ++kc) {
          const T wv = wk[kr * k + kc];
          std::size_t ow_lo, ow_hi;
          valid_range(d.out_w, d.in_w, s, kc, p, ow_lo, ow_hi);
          for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
            const T* row = src + (oh * s + kr - p) * d.in_w;
            T* drow = dst + oh * d.out_w;
            if (s == 1) {
              for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) drow[ow] += wv * row[ow + kc - p];
            } else {
              for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) drow[ow] += wv * row[ow * s + kc - p];
            }
          }
        }
      }
    }
  }

  g_forward_launches.fetch_add(1, std::memory_order_relaxed);
  g_forward_flops.fetch_add(2ull * d.batch * g.out_channels * out_plane * d.cin_g * k * k,
                            std::memory_order_relaxed);
  return out;
}

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& grad_out, const Tensor<T>& input, const Tensor<T>& weight,
                             const ConvGeometry& g) {
  const ConvDims d = check_conv(input, weight, g);
  const Shape expected{d.batch, g.out_channels, d.out_h, d.out_w};
  if (grad_out.shape() != expected) {
    throw ShapeError(fmt::format("conv2d_backward grad_out shape {} does not match output shape {}",
                                 shape_string(grad_out.shape()), shape_string(expected)));
  }
  const std::size_t k = g.kernel, s = g.stride, p = g.padding;
  const std::size_t in_plane = d.in_h * d.in_w, out_plane = d.out_h * d.out_w;
  Tensor<T> grad_in(input.shape());
  Tensor<T> grad_w(weight.shape());
  const T* in = input.raw();
  const T* w = weight.raw();
  const T* go = grad_out.raw();
  T* gi = grad_in.raw();
  T* gw = grad_w.raw();

  // Input gradient: each (sample, group) owns a disjoint slice of grad_in.
  const std::ptrdiff_t slices = static_cast<std::ptrdiff_t>(d.batch * g.groups);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t slice = 0; slice < slices; ++slice) {
    const std::size_t n = static_cast<std::size_t>(slice) / g.groups;
    const std::size_t group = static_cast<std::size_t>(slice) % g.groups;
    for (std::size_t ocg = 0; ocg < d.cout_g; ++ocg) {
      const std::size_t oc = group * d.cout_g + ocg;
      const T* gsrc = go + (n * g.out_channels + oc) * out_plane;
      for (std::size_t icg = 0; icg < d.cin_g; ++icg) {
        const std::size_t ic = group * d.cin_g + icg;
        T* gdst = gi + (n * g.in_channels + ic) * in_plane;
        const T* wk = w + (oc * d.cin_g + icg) * k * k;
        for (std::size_t kr = 0; kr < k; ++kr) {
          std::size_t oh_lo, oh_hi;
          valid_range(d.out_h, d.in_h, s, kr, p, oh_lo, oh_hi);
          for (std::size_t kc = 0; kc < k; ++kc) {
            const T wv = wk[kr * k + kc];
            std::size_t ow_lo, ow_hi;
            valid_range(d.out_w, d.in_w, s, kc, p, ow_lo, ow_hi);
            for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
              T* row = gdst + (oh * s + kr - p) * d.in_w;
              const T* grow = gsrc + oh * d.out_w;
              for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) row[ow * s + kc - p] += wv * grow[ow];
            }
          }
        }
      }
    }
  }

  // Weight gradient: each output channel owns its filter slice.
  const std::ptrdiff_t filters = static_cast<std::ptrdiff_t>(g.out_channels);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t f = 0; f < filters; ++f) {
    const std::size_t oc = static_cast<std::size_t>(f);
    const std::size_t group = oc / d.cout_g;
    for (std::size_t icg = 0; icg < d.cin_g; ++icg) {
      const std::size_t ic = group * d.cin_g + icg;
      T* gwk = gw + (oc * d.cin_g + icg) * k * k;
      for (std::size_t kr = 0; kr < k; ++kr) {
        std::size_t oh_lo, oh_hi;
        valid_range(d.out_h, d.in_h, s, kr, p, oh_lo, oh_hi);
        for (std::size_t kc = 0; kc < k; ++kc) {
          std::size_t ow_lo, ow_hi;
          valid_range(d.out_w, d.in_w, s, kc, p, ow_lo, ow_hi);
          T acc = 0;
          for (std::size_t n = 0; n < d.batch; ++n) {
            const T* src = in + (n * g.in_channels + ic) * in_plane;
            const T* gsrc = go + (n * g.out_channels + oc) * out_plane;
            for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
              const T* row = src + (oh * s + kr - p) * d.in_w;
              const T* grow = gsrc + oh * d.out_w;
              for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) acc += grow[ow] * row[ow * s + kc - p];
            }
          }
          gwk[kr * k + kc] = acc;
        }
      }
    }
  }

  g_backward_launches.fetch_add(1, std::memory_order_relaxed);
  return {std::move(grad_in), std::move(grad_w)};
}

namespace reference {

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const ConvGeometry& g) {
  const ConvDims d = check_conv(input, weight, g);
  Tensor<T> out({d.batch, g.out_channels, d.out_h, d.out_w});
  for (std::size_t n = 0; n < d.batch; ++n)
    for (std::size_t oc = 0; oc < g.out_channels; ++oc)
      for (std::size_t oh = 0; oh < d.out_h; ++oh)
        for (std::size_t ow = 0; ow < d.out_w; ++ow) {
          const std::size_t group = oc / d.cout_g;
          T acc = 0;
          for (std::size_t icg = 0; icg < d.cin_g; ++icg)
            for (std::size_t kr = 0; kr < g.kernel; ++kr)
              for (std::size_t kc = 0; kc < g.kernel; ++kc) {
                const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + kr) -
                                          static_cast<std::ptrdiff_t>(g.padding);
                const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + kc) -
                                          static_cast<std::ptrdiff_t>(g.padding);
                if (ih < 0 || iw < 0 || ih >= static_cast<std::ptrdiff_t>(d.in_h) ||
                    iw >= static_cast<std::ptrdiff_t>(d.in_w))
                  continue;
                acc += input.at({n, group * d.cin_g + icg, static_cast<std::size_t>(ih),
                                 static_cast<std::size_t>(iw)}) *
                       weight.at({oc, icg, kr, kc});
              }
          out.at({n, oc, oh, ow}) = acc;
        }
  return out;
}

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& grad_out, const Tensor<T>& input, const Tensor<T>& weight,
                             const ConvGeometry& g) {
  const ConvDims d = check_conv(input, weight, g);
  if (grad_out.shape() != Shape{d.batch, g.out_channels, d.out_h, d.out_w}) {
    throw ShapeError("reference conv2d_backward: grad_out shape mismatch");
  }
  ConvGrads<T> grads{Tensor<T>(input.shape()), Tensor<T>(weight.shape())};
  for (std::size_t n = 0; n < d.batch; ++n)
    for (std::size_t oc = 0; oc < g.out_channels; ++oc)
      for (std::size_t oh = 0; oh < d.out_h; ++oh)
        for (std::size_t ow = 0; ow < d.out_w; ++ow) {
          const std::size_t group = oc / d.cout_g;
          const T go = grad_out.at({n, oc, oh, ow});
          for (std::size_t icg = 0; icg < d.cin_g; ++icg)
            for (std::size_t kr = 0; kr < g.kernel; ++kr)
              for (std::size_t kc = 0; kc < g.kernel; ++kc) {
                const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + kr) -
                                          static_cast<std::ptrdiff_t>(g.padding);
                const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + kc) -
                                          static_cast<std::ptrdiff_t>(g.padding);
                if (ih < 0 || iw < 0 || ih >= static_cast<std::ptrdiff_t>(d.in_h) ||
                    iw >= static_cast<std::ptrdiff_t>(d.in_w))
                  continue;
                const std::size_t ic = group * d.cin_g + icg;
                const auto uh = static_cast<std::size_t>(ih), uw = static_cast<std::size_t>(iw);
                grads.input.at({n, ic, uh, uw}) += go * weight.at({oc, icg, kr, kc});
                grads.weight.at({oc, icg, kr, kc}) += go * input.at({n, ic, uh, uw});
              }
        }
  return grads;
}

}  // namespace reference

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError(fmt::format("matmul needs rank-2 operands, got {} and {}", shape_string(a.shape()),
                                 shape_string(b.shape())));
  }
  const std::size_t m = a.dim(0), n = a.dim(1), p = b.dim(1);
  if (b.dim(0) != n) {
    throw ShapeError(fmt::format("matmul inner dimension mismatch: {} vs {}", n, b.dim(0)));
  }
  Tensor<T> out({m, p});
  const T* pa = a.raw();
  const T* pb = b.raw();
  T* po = out.raw();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(m); ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    T* row = po + i * p;
    for (std::size_t j = 0; j < n; ++j) {
      const T av = pa[i * n + j];
      const T* brow = pb + j * p;
      for (std::size_t c = 0; c < p; ++c) row[c] += av * brow[c];
    }
  }
  return out;
}

template <typename T>
Tensor<T> softmax_with_temperature(const Tensor<T>& logits, T tau) {
  if (!(tau > 0)) throw ValueError(fmt::format("softmax temperature must be positive, got {}", tau));
  const std::size_t width = logits.shape().back();
  const std::size_t rows = logits.size() / width;
  Tensor<T> out(logits.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = logits.raw() + r * width;
    T* dst = out.raw() + r * width;
    T mx = src[0];
    for (std::size_t j = 1; j < width; ++j) mx = std::max(mx, src[j]);
    T total = 0;
    for (std::size_t j = 0; j < width; ++j) {
      dst[j] = std::exp((src[j] - mx) / tau);
      total += dst[j];
    }
    for (std::size_t j = 0; j < width; ++j) dst[j] /= total;
  }
  return out;
}

template <typename T>
Tensor<T> reduce(const Tensor<T>& t, ReduceOp op, std::vector<std::size_t> axes) {
  if (axes.empty()) throw ShapeError("reduce: empty axis list (nothing to reduce over)");
  std::sort(axes.begin(), axes.end());
  if (std::adjacent_find(axes.begin(), axes.end()) != axes.end()) throw ShapeError("reduce: duplicate axis");
  if (axes.back() >= t.rank()) {
    throw ShapeError(fmt::format("reduce: invalid axis {} for shape {}", axes.back(), shape_string(t.shape())));
  }
  std::vector<bool> reduced(t.rank(), false);
  for (std::size_t a : axes) reduced[a] = true;
  Shape out_shape;
  std::size_t count = 1;
  for (std::size_t a = 0; a < t.rank(); ++a) {
    if (reduced[a])
      count *= t.dim(a);
    else
      out_shape.push_back(t.dim(a));
  }
  if (out_shape.empty()) out_shape.push_back(1);
  const T init = op == ReduceOp::max ? -std::numeric_limits<T>::infinity() : T(0);
  Tensor<T> out(out_shape, init);

  // Row-major walk over the input, mapping each element to its output slot.
  std::vector<std::size_t> index(t.rank(), 0);
  for (std::size_t flat = 0; flat < t.size(); ++flat) {
    std::size_t dst = 0;
    for (std::size_t a = 0; a < t.rank(); ++a)
      if (!reduced[a]) dst = dst * t.dim(a) + index[a];
    if (op == ReduceOp::max)
      out[dst] = std::max(out[dst], t[flat]);
    else
      out[dst] += t[flat];
    for (std::size_t a = t.rank(); a-- > 0;) {
      if (++index[a] < t.dim(a)) break;
      index[a] = 0;
    }
  }
  if (op == ReduceOp::mean) out *= T(1) / static_cast<T>(count);
  return out;
}

template <typename T>
Tensor<T> finite_diff_grad(const std::function<T(const Tensor<T>&)>& f, const Tensor<T>& x, T step) {
  if (!(step > 0)) throw ValueError("finite_diff_grad: step must be positive");
  Tensor<T> grad(x.shape());
  Tensor<T> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T orig = probe[i];
    probe[i] = orig + step;
    const T up = f(probe);
    probe[i] = orig - step;
    const T down = f(probe);
    probe[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError(fmt::format("finite_diff_grad: non-finite function value at element {}", i));
    }
    grad[i] = (up - down) / (2 * step);
  }
  return grad;
}

template <typename T>
void add_channel_bias(Tensor<T>& x, const Tensor<T>& bias) {
  const std::size_t channels = x.dim(1);
  if (bias.size() != channels) {
    throw ShapeError(fmt::format("bias has {} entries for {} channels", bias.size(), channels));
  }
  const std::size_t plane = x.size() / (x.dim(0) * channels);
  for (std::size_t n = 0; n < x.dim(0); ++n)
    for (std::size_t c = 0; c < channels; ++c) {
      T* dst = x.raw() + (n * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) dst[i] += bias[c];
    }
}

template <typename T>
Tensor<T> channel_bias_grad(const Tensor<T>& grad) {
  const std::size_t channels = grad.dim(1);
  const std::size_t plane = grad.size() / (grad.dim(0) * channels);
  Tensor<T> out({channels});
  for (std::size_t n = 0; n < grad.dim(0); ++n)
    for (std::size_t c = 0; c < channels; ++c) {
      const T* src = grad.raw() + (n * channels + c) * plane;
      T acc = 0;
      for (std::size_t i = 0; i < plane; ++i) acc += src[i];
      out[c] += acc;
    }
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out = x;
  for (T& v : out.data()) v = v < T(0) ? T(0) : v;  // NaN propagates
  return out;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& grad, const Tensor<T>& output) {
  Tensor<T> out = grad;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (!(output[i] > 0)) out[i] = 0;
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> out = x;
  for (T& v : out.data()) v = v >= 0 ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
  return out;
}

template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& grad, const Tensor<T>& output) {
  Tensor<T> out = grad;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= output[i] * (T(1) - output[i]);
  return out;
}

template <typename T>
Tensor<T> upsample2x(const Tensor<T>& x) {
  const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<T> out({b, c, 2 * h, 2 * w});
  for (std::size_t plane = 0; plane < b * c; ++plane) {
    const T* src = x.raw() + plane * h * w;
    T* dst = out.raw() + plane * 4 * h * w;
    for (std::size_t i = 0; i < 2 * h; ++i)
      for (std::size_t j = 0; j < 2 * w; ++j) dst[i * 2 * w + j] = src[(i / 2) * w + j / 2];
  }
  return out;
}

template <typename T>
Tensor<T> upsample2x_backward(const Tensor<T>& grad) {
  const std::size_t b = grad.dim(0), c = grad.dim(1), h = grad.dim(2) / 2, w = grad.dim(3) / 2;
  Tensor<T> out({b, c, h, w});
  for (std::size_t plane = 0; plane < b * c; ++plane) {
    const T* src = grad.raw() + plane * 4 * h * w;
    T* dst = out.raw() + plane * h * w;
    for (std::size_t i = 0; i < 2 * h; ++i)
      for (std::size_t j = 0; j < 2 * w; ++j) dst[(i / 2) * w + j / 2] += src[i * 2 * w + j];
  }
  return out;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  const std::size_t b = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor<T> out({b, c});
  for (std::size_t i = 0; i < b * c; ++i) {
    const T* src = x.raw() + i * plane;
    T acc = 0;
    for (std::size_t j = 0; j < plane; ++j) acc += src[j];
    out[i] = acc / static_cast<T>(plane);
  }
  return out;
}

template <typename T>
Tensor<T> global_avg_pool_backward(const Tensor<T>& grad, const Shape& input_shape) {
  Tensor<T> out(input_shape);
  const std::size_t plane = input_shape[2] * input_shape[3];
  for (std::size_t i = 0; i < grad.size(); ++i) {
    const T v = grad[i] / static_cast<T>(plane);
    std::fill_n(out.raw() + i * plane, plane, v);
  }
  return out;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw ShapeError(fmt::format("concat_channels: incompatible shapes {} and {}", shape_string(a.shape()),
                                 shape_string(b.shape())));
  }
  const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), plane = a.dim(2) * a.dim(3);
  Tensor<T> out({n, ca + cb, a.dim(2), a.dim(3)});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.raw() + i * ca * plane, ca * plane, out.raw() + i * (ca + cb) * plane);
    std::copy_n(b.raw() + i * cb * plane, cb * plane, out.raw() + (i * (ca + cb) + ca) * plane);
  }
  return out;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& grad, std::size_t channels_a) {
  const std::size_t n = grad.dim(0), c = grad.dim(1), plane = grad.dim(2) * grad.dim(3);
  const std::size_t cb = c - channels_a;
  Tensor<T> a({n, channels_a, grad.dim(2), grad.dim(3)});
  Tensor<T> b({n, cb, grad.dim(2), grad.dim(3)});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(grad.raw() + i * c * plane, channels_a * plane, a.raw() + i * channels_a * plane);
    std::copy_n(grad.raw() + (i * c + channels_a) * plane, cb * plane, b.raw() + i * cb * plane);
  }
  return {std::move(a), std::move(b)};
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  const std::size_t b = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
  if (weight.dim(1) != in || bias.size() != out_dim) {
    throw ShapeError(fmt::format("linear: x {} incompatible with weight {} / bias {}", shape_string(x.shape()),
                                 shape_string(weight.shape()), shape_string(bias.shape())));
  }
  Tensor<T> out({b, out_dim});
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t o = 0; o < out_dim; ++o) {
      T acc = bias[o];
      const T* xr = x.raw() + i * in;
      const T* wr = weight.raw() + o * in;
      for (std::size_t j = 0; j < in; ++j) acc += xr[j] * wr[j];
      out[i * out_dim + o] = acc;
    }
  return out;
}

template <typename T>
LinearGrads<T> linear_backward(const Tensor<T>& grad_out, const Tensor<T>& x, const Tensor<T>& weight) {
  const std::size_t b = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
  LinearGrads<T> g{Tensor<T>(x.shape()), Tensor<T>(weight.shape()), Tensor<T>({out_dim})};
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t o = 0; o < out_dim; ++o) {
      const T go = grad_out[i * out_dim + o];
      if (go == T(0)) continue;
      g.bias[o] += go;
      for (std::size_t j = 0; j < in; ++j) {
        g.input[i * in + j] += go * weight[o * in + j];
        g.weight[o * in + j] += go * x[i * in + j];
      }
    }
  return g;
}

template <typename T>
Tensor<T> slice_batch(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  if (begin >= end || end > x.dim(0)) throw ShapeError("slice_batch: invalid range");
  Shape s = x.shape();
  const std::size_t row = x.size() / s[0];
  s[0] = end - begin;
  std::vector<T> data(x.raw() + begin * row, x.raw() + end * row);
  return Tensor<T>(std::move(s), std::move(data));
}

template <typename T>
Tensor<T> gather_batch(const Tensor<T>& x, const std::vector<std::size_t>& rows) {
  if (rows.empty()) throw ShapeError("gather_batch: no rows");
  Shape s = x.shape();
  const std::size_t row = x.size() / s[0];
  s[0] = rows.size();
  Tensor<T> out(s);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.dim(0)) throw ShapeError("gather_batch: row out of range");
    std::copy_n(x.raw() + rows[i] * row, row, out.raw() + i * row);
  }
  return out;
}

template <typename T>
void scatter_batch(Tensor<T>& dst, const Tensor<T>& src, const std::vector<std::size_t>& rows) {
  const std::size_t row = dst.size() / dst.dim(0);
  if (src.size() != rows.size() * row) throw ShapeError("scatter_batch: size mismatch");
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(src.raw() + i * row, row, dst.raw() + rows[i] * row);
}

#define LORKD_INSTANTIATE(T)                                                                                   \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const ConvGeometry&);                     \
  template ConvGrads<T> conv2d_backward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,             \
                                           const ConvGeometry&);                                             \
  template Tensor<T> reference::conv2d<T>(const Tensor<T>&, const Tensor<T>&, const ConvGeometry&);          \
  template ConvGrads<T> reference::conv2d_backward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,  \
                                                      const ConvGeometry&);                                  \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> softmax_with_temperature<T>(const Tensor<T>&, T);                                       \
  template Tensor<T> reduce<T>(const Tensor<T>&, ReduceOp, std::vector<std::size_t>);                        \
  template Tensor<T> finite_diff_grad<T>(const std::function<T(const Tensor<T>&)>&, const Tensor<T>&, T);    \
  template void add_channel_bias<T>(Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> channel_bias_grad<T>(const Tensor<T>&);                                                 \
  template Tensor<T> relu<T>(const Tensor<T>&);                                                              \
  template Tensor<T> relu_backward<T>(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> sigmoid<T>(const Tensor<T>&);                                                           \
  template Tensor<T> sigmoid_backward<T>(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> upsample2x<T>(const Tensor<T>&);                                                        \
  template Tensor<T> upsample2x_backward<T>(const Tensor<T>&);                                               \
  template Tensor<T> global_avg_pool<T>(const Tensor<T>&);                                                   \
  template Tensor<T> global_avg_pool_backward<T>(const Tensor<T>&, const Shape&);                            \
  template Tensor<T> concat_channels<T>(const Tensor<T>&, const Tensor<T>&);                                 \
  template std::pair<Tensor<T>, Tensor<T>> split_channels<T>(const Tensor<T>&, std::size_t);                 \
  template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                        \
  template LinearGrads<T> linear_backward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);          \
  template Tensor<T> slice_batch<T>(const Tensor<T>&, std::size_t, std::size_t);                             \
  template Tensor<T> gather_batch<T>(const Tensor<T>&, const std::vector<std::size_t>&);                     \
  template void scatter_batch<T>(Tensor<T>&, const Tensor<T>&, const std::vector<std::size_t>&);

LORKD_INSTANTIATE(float)
LORKD_INSTANTIATE(double)
#undef LORKD_INSTANTIATE

}  // namespace lorkd
