// SPDX-License-Identifier: Apache-2.0

// Efficient Knowledge Separation convolution.
//
// Every sample b of a mixed-task batch is convolved with its own aggregated
// weight W'_b = W0 + delta(task(b)). The B weights are stacked into a
// [B*C_out, C_in, k, k] filter bank and the batch is folded into the channel
// axis, so the whole batch runs as one grouped convolution with groups = B.
// naive_forward is the per-task loop the grouped form replaces and serves as
// its oracle.

#pragma once

#include <cstdint>
#include <vector>

#include "lorkd/lowrank.hpp"
#include "lorkd/ops.hpp"
#include "lorkd/tensor.hpp"

namespace lorkd {

/// One-hot batch-to-task assignment, stored by task index per sample.
class TaskIndexMatrix {
 public:
  TaskIndexMatrix() = default;
  TaskIndexMatrix(std::vector<std::size_t> task_of_sample, std::size_t task_count);

  /// Validates a {0,1} [B, T] matrix with exactly one 1 per row.
  template <typename T>
  static TaskIndexMatrix from_one_hot(const Tensor<T>& assignments);

  template <typename T>
  Tensor<T> one_hot() const;

  std::size_t batch() const noexcept { return tasks_.size(); }
  std::size_t task_count() const noexcept { return task_count_; }
  std::size_t task_of(std::size_t sample) const { return tasks_.at(sample); }
  const std::vector<std::size_t>& tasks() const noexcept { return tasks_; }
  /// Sample positions assigned to `task`, ascending.
  std::vector<std::size_t> samples_of(std::size_t task) const;

  bool operator==(const TaskIndexMatrix&) const = default;

 private:
  std::vector<std::size_t> tasks_;
  std::size_t task_count_ = 0;
};

/// Shared backbone convolution plus T per-task low-rank experts. A layer with
/// no experts is a plain convolution.
template <typename T>
struct EksConvLayer {
  ConvGeometry geometry;
  Tensor<T> w0;
  Tensor<T> bias;  // empty when the layer has no bias
  std::vector<LowRankPair<T>> experts;

  std::size_t task_count() const noexcept { return experts.size(); }
  bool has_bias() const noexcept { return !bias.empty(); }
  void validate() const;
};

/// [B, C_out, C_in, k, k] with W'_b = w0 + expert_delta(experts[task(b)]).
template <typename T>
Tensor<T> aggregate_weights(const EksConvLayer<T>& layer, const TaskIndexMatrix& m);

/// Single grouped-convolution forward.
template <typename T>
Tensor<T> eks_forward(const EksConvLayer<T>& layer, const Tensor<T>& h, const TaskIndexMatrix& m);

/// One plain convolution per task present in the batch, scattered back in place.
template <typename T>
Tensor<T> naive_forward(const EksConvLayer<T>& layer, const Tensor<T>& h, const TaskIndexMatrix& m);

template <typename T>
struct ExpertGrads {
  Tensor<T> b_factor;
  Tensor<T> a_factor;
};

template <typename T>
struct EksGrads {
  Tensor<T> input;
  Tensor<T> w0;
  Tensor<T> bias;  // empty when the layer has no bias
  /// One entry per expert; tasks absent from the batch get exact zeros.
  std::vector<ExpertGrads<T>> experts;
};

template <typename T>
EksGrads<T> eks_backward(const EksConvLayer<T>& layer, const Tensor<T>& h, const TaskIndexMatrix& m,
                         const Tensor<T>& grad_out);

/// Analytic cost of EKS parameter fusion versus per-example adapters (FLoRA),
/// with a conv abstracted as a d x d matmul over sequence length l and c2 = 2.
struct CostEstimate {
  std::uint64_t eks_flops = 0;
  std::uint64_t flora_flops = 0;
  /// T*r/(b*l) + 1 <= r, evaluated exactly in integers.
  bool eks_cheaper = false;
};

CostEstimate cost_estimate(std::uint64_t tasks, std::uint64_t batch, std::uint64_t seq_len, std::uint64_t dim,
                           std::uint64_t rank);

extern template struct EksConvLayer<float>;
extern template struct EksConvLayer<double>;

}  // namespace lorkd
