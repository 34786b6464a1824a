// SPDX-License-Identifier: Apache-2.0

#include "lorkd/lowrank.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include <fmt/format.h>

namespace lorkd {

Shape lowrank_b_shape(const ConvGeometry& g, std::size_t rank) {
  return {g.out_channels * g.kernel, rank * g.kernel};
}

Shape lowrank_a_shape(const ConvGeometry& g, std::size_t rank) {
  return {rank * g.kernel, g.in_channels * g.kernel};
}

template <typename T>
void LowRankPair<T>::validate() const {
  geometry.validate();
  if (geometry.groups != 1) throw ShapeError("low-rank experts require an ungrouped convolution");
  if (rank == 0) throw ShapeError("low-rank pair has rank 0");
  if (b_factor.shape() != lowrank_b_shape(geometry, rank)) {
    throw ShapeError(fmt::format("B factor shape {} expected {}", shape_string(b_factor.shape()),
                                 shape_string(lowrank_b_shape(geometry, rank))));
  }
  if (a_factor.shape() != lowrank_a_shape(geometry, rank)) {
    throw ShapeError(fmt::format("A factor shape {} expected {}", shape_string(a_factor.shape()),
                                 shape_string(lowrank_a_shape(geometry, rank))));
  }
}

template <typename T>
LowRankPair<T> init_lowrank(const ConvGeometry& geometry, std::size_t rank, std::uint64_t seed) {
  if (rank < kMinRank) throw ValueError(fmt::format("expert rank must be >= {}, got {}", kMinRank, rank));
  geometry.validate();
  if (geometry.groups != 1) throw ShapeError("low-rank experts require an ungrouped convolution");
  LowRankPair<T> pair{Tensor<T>(lowrank_b_shape(geometry, rank)), Tensor<T>(lowrank_a_shape(geometry, rank)),
                      rank, geometry};
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  for (T& v : pair.a_factor.data()) v = static_cast<T>(normal(gen));
  return pair;
}

template <typename T>
Tensor<T> expert_delta(const LowRankPair<T>& pair) {
  pair.validate();
  const ConvGeometry& g = pair.geometry;
  const std::size_t k = g.kernel;
  const Tensor<T> product = matmul(pair.b_factor, pair.a_factor);  // [C_out*k, C_in*k]
  Tensor<T> delta(g.weight_shape());
  const std::size_t cols = g.in_channels * k;
  for (std::size_t co = 0; co < g.out_channels; ++co)
    for (std::size_t ci = 0; ci < g.in_channels; ++ci)
      for (std::size_t kr = 0; kr < k; ++kr)
        for (std::size_t kc = 0; kc < k; ++kc)
          delta[((co * g.in_channels + ci) * k + kr) * k + kc] = product[(co * k + kr) * cols + ci * k + kc];
  return delta;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> expert_factor_grads(const LowRankPair<T>& pair, const Tensor<T>& grad_delta) {
  const ConvGeometry& g = pair.geometry;
  if (grad_delta.shape() != g.weight_shape()) {
    throw ShapeError(fmt::format("expert gradient shape {} expected {}", shape_string(grad_delta.shape()),
                                 shape_string(g.weight_shape())));
  }
  const std::size_t k = g.kernel;
  const std::size_t cols = g.in_channels * k;
  Tensor<T> grad_product({g.out_channels * k, cols});
  for (std::size_t co = 0; co < g.out_channels; ++co)
    for (std::size_t ci = 0; ci < g.in_channels; ++ci)
      for (std::size_t kr = 0; kr < k; ++kr)
        for (std::size_t kc = 0; kc < k; ++kc)
          grad_product[(co * k + kr) * cols + ci * k + kc] = grad_delta[((co * g.in_channels + ci) * k + kr) * k + kc];
  Tensor<T> grad_b = matmul(grad_product, transpose(pair.a_factor));
  Tensor<T> grad_a = matmul(transpose(pair.b_factor), grad_product);
  return {std::move(grad_b), std::move(grad_a)};
}

template <typename T>
Tensor<T> fuse_weights(const Tensor<T>& w0, const LowRankPair<T>& pair) {
  if (w0.shape() != pair.geometry.weight_shape()) {
    throw ShapeError(fmt::format("fuse_weights: backbone weight {} does not match expert geometry {}",
                                 shape_string(w0.shape()), shape_string(pair.geometry.weight_shape())));
  }
  return w0 + expert_delta(pair);
}

std::size_t expert_param_count(const ConvGeometry& g, std::size_t rank, int spatial_dims) {
  if (spatial_dims < 1) throw ValueError("spatial_dims must be positive");
  std::size_t in_extent = g.in_channels;
  for (int i = 1; i < spatial_dims; ++i) in_extent *= g.kernel;
  return rank * g.kernel * (g.out_channels * g.kernel + in_extent);
}

std::size_t round_to_even(double x) {
  if (!(x > 0)) return 0;
  return 2 * static_cast<std::size_t>(std::floor(x / 2.0 + 0.5));
}

RankPlan plan_ranks(const std::vector<double>& loss_reductions, std::size_t base_rank) {
  if (loss_reductions.empty()) throw ValueError("plan_ranks needs at least one task");
  if (base_rank < kMinRank) throw ValueError(fmt::format("base rank must be >= {}, got {}", kMinRank, base_rank));
  RankPlan plan;
  plan.base_rank = base_rank;
  plan.loss_reductions = loss_reductions;
  std::vector<double> clamped;
  clamped.reserve(loss_reductions.size());
  double total = 0;
  for (double v : loss_reductions) {
    if (!std::isfinite(v)) throw ValueError("plan_ranks: non-finite loss reduction");
    clamped.push_back(std::max(0.0, v));
    total += clamped.back();
  }
  const double count = static_cast<double>(clamped.size());
  if (total == 0) {
    plan.ranks.assign(clamped.size(), base_rank);
    plan.degenerate = true;
    return plan;
  }
  for (double v : clamped) {
    const double ratio = v * count / total;
    const double raw = static_cast<double>(base_rank) * ratio * ratio;
    plan.ranks.push_back(std::max(kMinRank, round_to_even(raw)));
  }
  return plan;
}

RankPlan balanced_plan(std::size_t task_count, std::size_t base_rank) {
  RankPlan plan;
  plan.base_rank = base_rank;
  plan.loss_reductions.assign(task_count, 0.0);
  plan.ranks.assign(task_count, base_rank);
  return plan;
}

std::vector<double> measure_loss_reduction(const WarmupLog& log, std::size_t task_count, std::size_t window) {
  if (window == 0) throw ValueError("loss-reduction window must be positive");
  std::vector<std::vector<double>> per_task(task_count);
  for (const LossRecord& r : log) {
    if (r.task >= task_count) throw ValueError(fmt::format("warmup log names task {} of {}", r.task, task_count));
    per_task[r.task].push_back(r.loss);
  }
  std::vector<double> out;
  for (std::size_t t = 0; t < task_count; ++t) {
    const auto& losses = per_task[t];
    if (losses.size() < 2 * window) {
      throw ValueError(fmt::format("task {} has {} warmup records, needs at least {}", t, losses.size(), 2 * window));
    }
    double first = 0, last = 0;
    for (std::size_t i = 0; i < window; ++i) {
      first += losses[i];
      last += losses[losses.size() - window + i];
    }
    out.push_back((first - last) / static_cast<double>(window));
  }
  return out;
}

std::size_t default_reduction_window(const WarmupLog& log, std::size_t task_count) {
  std::vector<std::size_t> counts(task_count, 0);
  for (const LossRecord& r : log)
    if (r.task < task_count) ++counts[r.task];
  const std::size_t fewest = counts.empty() ? 0 : *std::min_element(counts.begin(), counts.end());
  return std::max<std::size_t>(1, std::min<std::size_t>(50, fewest / 10));
}

template struct LowRankPair<float>;
template struct LowRankPair<double>;

#define LORKD_INSTANTIATE(T)                                                                                \
  template LowRankPair<T> init_lowrank<T>(const ConvGeometry&, std::size_t, std::uint64_t);                \
  template Tensor<T> expert_delta<T>(const LowRankPair<T>&);                                               \
  template std::pair<Tensor<T>, Tensor<T>> expert_factor_grads<T>(const LowRankPair<T>&, const Tensor<T>&); \
  template Tensor<T> fuse_weights<T>(const Tensor<T>&, const LowRankPair<T>&);

LORKD_INSTANTIATE(float)
LORKD_INSTANTIATE(double)
#undef LORKD_INSTANTIATE

}  // namespace lorkd
