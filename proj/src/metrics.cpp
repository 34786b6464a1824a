// SPDX-License-Identifier: Apache-2.0

#include "lorkd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "lorkd/error.hpp"

namespace lorkd {

template <typename T>
std::vector<double> evaluate_dsc(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape() || pred.rank() != 4) {
    throw ShapeError(fmt::format("evaluate_dsc: prediction {} vs target {} (expected equal [n,K,H,W])",
                                 shape_string(pred.shape()), shape_string(target.shape())));
  }
  const std::size_t n = pred.dim(0), K = pred.dim(1), hw = pred.dim(2) * pred.dim(3);
  std::vector<double> out(K, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < K; ++k) {
      const std::size_t base = (i * K + k) * hw;
      std::size_t inter = 0, p = 0, s = 0;
      for (std::size_t j = 0; j < hw; ++j) {
        const bool pv = pred[base + j] >= T(kBinarizeThreshold);
        const bool sv = target[base + j] >= T(kBinarizeThreshold);
        inter += pv && sv;
        p += pv;
        s += sv;
      }
      out[k] += p + s == 0 ? 1.0 : 2.0 * static_cast<double>(inter) / static_cast<double>(p + s);
    }
  for (double& v : out) v /= static_cast<double>(n);
  return out;
}

template <typename T>
double evaluate_accuracy(const std::vector<Tensor<T>>& logits, const std::vector<std::size_t>& labels) {
  if (logits.size() != labels.size() || labels.empty()) {
    throw ShapeError(fmt::format("evaluate_accuracy: {} logit rows for {} labels", logits.size(), labels.size()));
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto d = logits[i].data();
    hits += static_cast<std::size_t>(std::max_element(d.begin(), d.end()) - d.begin()) == labels[i];
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

double macro_average(const std::vector<double>& values) {
  if (values.empty()) throw ValueError("macro average of no values");
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

namespace {

/// Centered Gram matrix H X Xᵀ H of a row-sample matrix.
template <typename T>
std::vector<double> centered_gram(const Tensor<T>& x) {
  const std::size_t n = x.dim(0), d = x.size() / n;
  std::vector<double> mean(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mean[j] += x[i * d + j];
  for (double& m : mean) m /= static_cast<double>(n);
  std::vector<double> xc(n * d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) xc[i * d + j] = x[i * d + j] - mean[j];
  std::vector<double> g(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = i; k < n; ++k) {
      double acc = 0;
      for (std::size_t j = 0; j < d; ++j) acc += xc[i * d + j] * xc[k * d + j];
      g[i * n + k] = g[k * n + i] = acc;
    }
  return g;
}

}  // namespace

template <typename T>
double cka_similarity(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2 || a.dim(0) != b.dim(0)) {
    throw ShapeError(fmt::format("cka_similarity: feature matrices {} and {} need the same sample count",
                                 shape_string(a.shape()), shape_string(b.shape())));
  }
  if (a.dim(0) < 2) throw ValueError("cka_similarity needs at least 2 samples");
  // ‖XᵀY‖²_F = <XXᵀ, YYᵀ>_F, so the Gram form works for any feature width.
  const auto ka = centered_gram(a), kb = centered_gram(b);
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < ka.size(); ++i) {
    ab += ka[i] * kb[i];
    aa += ka[i] * ka[i];
    bb += kb[i] * kb[i];
  }
  if (aa == 0 || bb == 0) throw ValueError("cka_similarity: features have zero variance");
  return ab / (std::sqrt(aa) * std::sqrt(bb));
}

#define LORKD_INSTANTIATE(T)                                                                       \
  template std::vector<double> evaluate_dsc<T>(const Tensor<T>&, const Tensor<T>&);               \
  template double evaluate_accuracy<T>(const std::vector<Tensor<T>>&, const std::vector<std::size_t>&); \
  template double cka_similarity<T>(const Tensor<T>&, const Tensor<T>&);

LORKD_INSTANTIATE(float)
LORKD_INSTANTIATE(double)
#undef LORKD_INSTANTIATE

}  // namespace lorkd
