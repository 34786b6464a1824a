// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

#include "lorkd/ops.hpp"
#include "lorkd/tensor.hpp"

namespace lorkd {

/// Per-task low-rank factors of a k x k convolution: the expert delta is the
/// product b_factor [C_out*k, r*k] x a_factor [r*k, C_in*k], read as a
/// [C_out, C_in, k, k] weight.
template <typename T>
struct LowRankPair {
  Tensor<T> b_factor;
  Tensor<T> a_factor;
  std::size_t rank = 0;
  ConvGeometry geometry;

  /// Throws ShapeError if the factor shapes do not match rank and geometry.
  void validate() const;
};

Shape lowrank_b_shape(const ConvGeometry& geometry, std::size_t rank);
Shape lowrank_a_shape(const ConvGeometry& geometry, std::size_t rank);

/// A ~ N(0, 0.02^2) from a seeded generator, B = 0, so the delta starts at exactly zero.
template <typename T>
LowRankPair<T> init_lowrank(const ConvGeometry& geometry, std::size_t rank, std::uint64_t seed);

template <typename T>
Tensor<T> expert_delta(const LowRankPair<T>& pair);

/// Inverse of the delta layout: maps a [C_out, C_in, k, k] weight gradient to
/// the gradients of the two factors.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> expert_factor_grads(const LowRankPair<T>& pair, const Tensor<T>& grad_delta);

template <typename T>
Tensor<T> fuse_weights(const Tensor<T>& w0, const LowRankPair<T>& pair);

/// size(B) + size(A) = r*k*(C_out*k + C_in*k^(spatial_dims-1)). The 2D engine
/// uses spatial_dims = 2; spatial_dims = 3 gives the volumetric factor sizes.
std::size_t expert_param_count(const ConvGeometry& geometry, std::size_t rank, int spatial_dims = 2);

struct RankPlan {
  std::size_t base_rank = 0;
  std::vector<double> loss_reductions;
  std::vector<std::size_t> ranks;
  /// Set when every loss reduction was zero and all ranks fell back to base_rank.
  bool degenerate = false;
};

inline constexpr std::size_t kMinRank = 2;

/// Nearest even integer, exact odd midpoints rounded up.
std::size_t round_to_even(double x);

/// rank_i = nearest_even(base * (dL_i / mean dL)^2), negative dL clamped to 0,
/// ranks clamped to >= kMinRank.
RankPlan plan_ranks(const std::vector<double>& loss_reductions, std::size_t base_rank);

/// All tasks at base_rank.
RankPlan balanced_plan(std::size_t task_count, std::size_t base_rank);

struct LossRecord {
  std::size_t step = 0;
  std::size_t task = 0;
  double loss = 0;

  bool operator==(const LossRecord&) const = default;
};

using WarmupLog = std::vector<LossRecord>;

/// Per task: mean of its first `window` losses minus mean of its last `window`.
std::vector<double> measure_loss_reduction(const WarmupLog& log, std::size_t task_count, std::size_t window);

/// min(50, floor(steps_per_task / 10)), at least 1, using the task with the fewest records.
std::size_t default_reduction_window(const WarmupLog& log, std::size_t task_count);

extern template struct LowRankPair<float>;
extern template struct LowRankPair<double>;

}  // namespace lorkd
