// SPDX-License-Identifier: Apache-2.0

// Test-side oracles and generators, written independently of the library
// kernels they check.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "lorkd/eks_conv.hpp"
#include "lorkd/tensor.hpp"

namespace lorkd::test {

template <typename T>
Tensor<T> random_tensor(const Shape& shape, std::mt19937_64& gen, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(shape);
  std::uniform_real_distribution<double> u(lo, hi);
  for (T& v : t.data()) v = static_cast<T>(u(gen));
  return t;
}

inline std::size_t pick(std::mt19937_64& gen, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(gen);
}

/// Direct transcription of the sliding-window sum with stride, zero padding and groups.
template <typename T>
Tensor<T> direct_conv(const Tensor<T>& x, const Tensor<T>& w, const ConvGeometry& g) {
  const std::size_t B = x.dim(0), H = x.dim(2), W = x.dim(3), k = g.kernel;
  const std::size_t Ho = (H + 2 * g.padding - k) / g.stride + 1, Wo = (W + 2 * g.padding - k) / g.stride + 1;
  const std::size_t cin_g = g.in_channels / g.groups, cout_g = g.out_channels / g.groups;
  Tensor<T> y({B, g.out_channels, Ho, Wo});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t oc = 0; oc < g.out_channels; ++oc) {
      const std::size_t grp = oc / cout_g;
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          T acc = 0;
          for (std::size_t c = 0; c < cin_g; ++c)
            for (std::size_t u = 0; u < k; ++u)
              for (std::size_t v = 0; v < k; ++v) {
                const long r = static_cast<long>(i * g.stride + u) - static_cast<long>(g.padding);
                const long s = static_cast<long>(j * g.stride + v) - static_cast<long>(g.padding);
                if (r < 0 || s < 0 || r >= static_cast<long>(H) || s >= static_cast<long>(W)) continue;
                acc += x.at({b, grp * cin_g + c, static_cast<std::size_t>(r), static_cast<std::size_t>(s)}) *
                       w.at({oc, c, u, v});
              }
          y.at({b, oc, i, j}) = acc;
        }
    }
  return y;
}

template <typename T>
double norm(const Tensor<T>& t) {
  double s = 0;
  for (T v : t.data()) s += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(s);
}

/// ‖a − n‖ / max(‖a‖, ‖n‖), 0 when both vanish.
template <typename T>
double rel_error(const Tensor<T>& analytic, const Tensor<T>& numeric) {
  const double d = norm(analytic - numeric);
  const double s = std::max(norm(analytic), norm(numeric));
  return s == 0 ? d : d / s;
}

/// Central differences of f on a subset of coordinates of x (all when max_coords == 0).
/// Returns (analytic entries, numeric entries) over the chosen coordinates.
inline std::pair<Tensor<double>, Tensor<double>> sampled_fd(const std::function<double()>& f, Tensor<double>& x,
                                                            const Tensor<double>& analytic, std::size_t max_coords,
                                                            std::mt19937_64& gen, double step = 1e-5) {
  std::vector<std::size_t> idx(x.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  if (max_coords > 0 && max_coords < idx.size()) {
    std::shuffle(idx.begin(), idx.end(), gen);
    idx.resize(max_coords);
  }
  Tensor<double> a({idx.size()}), n({idx.size()});
  for (std::size_t j = 0; j < idx.size(); ++j) {
    const std::size_t i = idx[j];
    const double keep = x[i];
    x[i] = keep + step;
    const double up = f();
    x[i] = keep - step;
    const double down = f();
    x[i] = keep;
    n[j] = (up - down) / (2 * step);
    a[j] = analytic[i];
  }
  return {a, n};
}

/// A random EKS layer with random (non-inert) experts and a random task assignment.
template <typename T>
struct EksCase {
  EksConvLayer<T> layer;
  Tensor<T> input;
  TaskIndexMatrix tasks;
};

template <typename T>
EksCase<T> random_eks_case(std::mt19937_64& gen, std::size_t max_tasks = 8, std::size_t max_batch = 16,
                           std::size_t max_channels = 8, std::size_t max_spatial = 8) {
  const std::size_t T_ = pick(gen, 1, max_tasks), B = pick(gen, 1, max_batch);
  const std::size_t k = pick(gen, 0, 1) ? 3 : 1;
  const std::size_t cin = pick(gen, 1, max_channels), cout = pick(gen, 1, max_channels);
  const std::size_t stride = pick(gen, 1, 2), padding = k == 3 ? pick(gen, 0, 1) : 0;
  const std::size_t lo = k + (stride > 1 ? 1 : 0);
  const std::size_t H = pick(gen, std::max<std::size_t>(lo, 2), max_spatial);
  const std::size_t W = pick(gen, std::max<std::size_t>(lo, 2), max_spatial);
  ConvGeometry g{cin, cout, k, stride, padding, 1};
  EksCase<T> c;
  c.layer.geometry = g;
  c.layer.w0 = random_tensor<T>(g.weight_shape(), gen);
  if (pick(gen, 0, 1)) c.layer.bias = random_tensor<T>({cout}, gen);
  for (std::size_t t = 0; t < T_; ++t) {
    const std::size_t r = 2 * pick(gen, 1, 3);
    LowRankPair<T> p = init_lowrank<T>(g, r, gen());
    p.b_factor = random_tensor<T>(p.b_factor.shape(), gen, -0.5, 0.5);
    p.a_factor = random_tensor<T>(p.a_factor.shape(), gen, -0.5, 0.5);
    c.layer.experts.push_back(std::move(p));
  }
  c.input = random_tensor<T>({B, cin, H, W}, gen);
  std::vector<std::size_t> assign(B);
  for (auto& a : assign) a = pick(gen, 0, T_ - 1);
  c.tasks = TaskIndexMatrix(assign, T_);
  return c;
}

}  // namespace lorkd::test
