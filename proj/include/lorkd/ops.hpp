// SPDX-License-Identifier: Apache-2.0

// Forward/backward kernels for every tensor operation the decomposition engine
// uses. Kernels are OpenMP-parallel over independent output elements, and each
// output element is accumulated in a fixed loop order, so results are
// bit-identical regardless of the thread count.

#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "lorkd/tensor.hpp"

namespace lorkd {

/// Square-kernel 2D convolution geometry with zero padding.
struct ConvGeometry {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;

  /// Throws ShapeError unless channel counts divide into groups and all counts are positive.
  void validate() const;
  /// floor((extent + 2*padding - kernel) / stride) + 1; throws if that would be < 1.
  std::size_t output_extent(std::size_t extent) const;
  std::size_t weight_size() const { return out_channels * (in_channels / groups) * kernel * kernel; }
  Shape weight_shape() const { return {out_channels, in_channels / groups, kernel, kernel}; }

  bool operator==(const ConvGeometry&) const = default;
};

/// Process-wide kernel instrumentation, read by `bench` and the single-pass tests.
struct KernelCounters {
  std::uint64_t conv_forward_launches = 0;
  std::uint64_t conv_backward_launches = 0;
  std::uint64_t conv_forward_flops = 0;
};

KernelCounters kernel_counters();
void reset_kernel_counters();

/// Sets the OpenMP thread count from LORKD_THREADS (default 1). Returns the count used.
int configure_threads_from_env();

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const ConvGeometry& geometry);

template <typename T>
struct ConvGrads {
  Tensor<T> input;
  Tensor<T> weight;
};

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& grad_out, const Tensor<T>& input, const Tensor<T>& weight,
                             const ConvGeometry& geometry);

namespace reference {

/// Serial six-loop convolution used as the oracle for the parallel kernel.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const ConvGeometry& geometry);

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& grad_out, const Tensor<T>& input, const Tensor<T>& weight,
                             const ConvGeometry& geometry);

}  // namespace reference

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// Softmax over the last axis of logits / tau, max-subtracted.
template <typename T>
Tensor<T> softmax_with_temperature(const Tensor<T>& logits, T tau);

enum class ReduceOp { sum, mean, max };

/// Reduces over `axes` and drops them. Reducing every axis yields shape [1].
template <typename T>
Tensor<T> reduce(const Tensor<T>& t, ReduceOp op, std::vector<std::size_t> axes);

/// Central-difference gradient of a scalar function.
template <typename T>
Tensor<T> finite_diff_grad(const std::function<T(const Tensor<T>&)>& f, const Tensor<T>& x, T step);

// Small layer kernels used by the network interpreter.

/// Adds bias[c] to every element of channel c of a [B, C, ...] tensor.
template <typename T>
void add_channel_bias(Tensor<T>& x, const Tensor<T>& bias);
/// Sum of grad over every axis except the channel axis.
template <typename T>
Tensor<T> channel_bias_grad(const Tensor<T>& grad);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
/// Gradient of relu given its output.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& grad, const Tensor<T>& output);

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& grad, const Tensor<T>& output);

/// Nearest-neighbour x2 upsampling of [B, C, H, W].
template <typename T>
Tensor<T> upsample2x(const Tensor<T>& x);
template <typename T>
Tensor<T> upsample2x_backward(const Tensor<T>& grad);

/// [B, C, H, W] -> [B, C].
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x);
template <typename T>
Tensor<T> global_avg_pool_backward(const Tensor<T>& grad, const Shape& input_shape);

/// Channel concatenation of two [B, C_i, H, W] tensors.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);
/// Splits a channel-concatenated gradient back into the two inputs (first has `channels_a`).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& grad, std::size_t channels_a);

/// Linear layer y = x W^T + b, x: [B, in], W: [out, in], b: [out].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

template <typename T>
struct LinearGrads {
  Tensor<T> input;
  Tensor<T> weight;
  Tensor<T> bias;
};

template <typename T>
LinearGrads<T> linear_backward(const Tensor<T>& grad_out, const Tensor<T>& x, const Tensor<T>& weight);

/// Rows [begin, end) of the leading axis.
template <typename T>
Tensor<T> slice_batch(const Tensor<T>& x, std::size_t begin, std::size_t end);
/// Gathers the listed rows of the leading axis.
template <typename T>
Tensor<T> gather_batch(const Tensor<T>& x, const std::vector<std::size_t>& rows);
/// Writes src rows into dst at the listed positions of the leading axis.
template <typename T>
void scatter_batch(Tensor<T>& dst, const Tensor<T>& src, const std::vector<std::size_t>& rows);

}  // namespace lorkd
