// SPDX-License-Identifier: Apache-2.0

#include "lorkd/eks_conv.hpp"

#include <algorithm>

#include <fmt/format.h>

namespace lorkd {

TaskIndexMatrix::TaskIndexMatrix(std::vector<std::size_t> task_of_sample, std::size_t task_count)
    : tasks_(std::move(task_of_sample)), task_count_(task_count) {
  if (task_count_ == 0) throw ValueError("task index matrix needs T >= 1");
  if (tasks_.empty()) throw ValueError("task index matrix needs B >= 1");
  for (std::size_t b = 0; b < tasks_.size(); ++b) {
    if (tasks_[b] >= task_count_) {
      throw ValueError(fmt::format("sample {} assigned to task {} of {}", b, tasks_[b], task_count_));
    }
  }
}

template <typename T>
TaskIndexMatrix TaskIndexMatrix::from_one_hot(const Tensor<T>& assignments) {
  if (assignments.rank() != 2) throw ShapeError("task index matrix must be [B, T]");
  const std::size_t batch = assignments.dim(0), tasks = assignments.dim(1);
  std::vector<std::size_t> owner(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    std::size_t ones = 0;
    for (std::size_t t = 0; t < tasks; ++t) {
      const T v = assignments[b * tasks + t];
      if (v == T(1)) {
        ++ones;
        owner[b] = t;
      } else if (v != T(0)) {
        throw ValueError(fmt::format("task index matrix row {} has non-binary entry {}", b, v));
      }
    }
    if (ones != 1) throw ValueError(fmt::format("task index matrix row {} is not one-hot ({} ones)", b, ones));
  }
  return TaskIndexMatrix(std::move(owner), tasks);
}

template <typename T>
Tensor<T> TaskIndexMatrix::one_hot() const {
  Tensor<T> out({batch(), task_count_});
  for (std::size_t b = 0; b < batch(); ++b) out[b * task_count_ + tasks_[b]] = T(1);
  return out;
}

std::vector<std::size_t> TaskIndexMatrix::samples_of(std::size_t task) const {
  std::vector<std::size_t> rows;
  for (std::size_t b = 0; b < tasks_.size(); ++b)
    if (tasks_[b] == task) rows.push_back(b);
  return rows;
}

template <typename T>
void EksConvLayer<T>::validate() const {
  geometry.validate();
  if (w0.shape() != geometry.weight_shape()) {
    throw ShapeError(fmt::format("backbone weight {} does not match geometry {}", shape_string(w0.shape()),
                                 shape_string(geometry.weight_shape())));
  }
  if (has_bias() && bias.shape() != Shape{geometry.out_channels}) {
    throw ShapeError(fmt::format("bias shape {} expected [{}]", shape_string(bias.shape()), geometry.out_channels));
  }
  for (const auto& e : experts) {
    if (!(e.geometry == geometry)) throw ShapeError("expert geometry differs from the backbone geometry");
    e.validate();
  }
}

namespace {

template <typename T>
void check_routing(const EksConvLayer<T>& layer, const Tensor<T>& h, const TaskIndexMatrix& m) {
  if (h.rank() != 4) throw ShapeError(fmt::format("EKS input must be [B,C_in,H,W], got {}", shape_string(h.shape())));
  if (layer.task_count() == 0) return;
  if (m.task_count() != layer.task_count()) {
    throw ShapeError(fmt::format("task matrix has T={} but layer has {} experts", m.task_count(), layer.task_count()));
  }
  if (m.batch() != h.dim(0)) {
    throw ShapeError(fmt::format("task matrix has B={} but input batch is {}", m.batch(), h.dim(0)));
  }
}

template <typename T>
std::vector<Tensor<T>> present_deltas(const EksConvLayer<T>& layer, const TaskIndexMatrix& m) {
  std::vector<bool> present(layer.task_count(), false);
  for (std::size_t t : m.tasks()) present[t] = true;
  std::vector<Tensor<T>> deltas(layer.task_count());
  for (std::size_t t = 0; t < layer.task_count(); ++t)
    if (present[t]) deltas[t] = expert_delta(layer.experts[t]);
  return deltas;
}

/// The aggregated weights stacked as a [B*C_out, C_in, k, k] grouped filter bank.
template <typename T>
Tensor<T> grouped_filter_bank(const EksConvLayer<T>& layer, const TaskIndexMatrix& m) {
  const ConvGeometry& g = layer.geometry;
  const std::size_t per_sample = g.weight_size();
  const std::size_t batch = m.batch();
  Tensor<T> bank({batch * g.out_channels, g.in_channels / g.groups, g.kernel, g.kernel});
  const auto deltas = present_deltas(layer, m);
  for (std::size_t b = 0; b < batch; ++b) {
    const Tensor<T>& delta = deltas[m.task_of(b)];
    T* dst = bank.raw() + b * per_sample;
    for (std::size_t i = 0; i < per_sample; ++i) dst[i] = layer.w0[i] + delta[i];
  }
  return bank;
}

ConvGeometry grouped_geometry(const ConvGeometry& g, std::size_t batch) {
  ConvGeometry grouped = g;
  grouped.in_channels = g.in_channels * batch;
  grouped.out_channels = g.out_channels * batch;
  grouped.groups = batch;
  return grouped;
}

}  // namespace

template <typename T>
Tensor<T> aggregate_weights(const EksConvLayer<T>& layer, const TaskIndexMatrix& m) {
  layer.validate();
  if (m.task_count() != layer.task_count()) {
    throw ShapeError(fmt::format("task matrix has T={} but layer has {} experts", m.task_count(), layer.task_count()));
  }
  const ConvGeometry& g = layer.geometry;
  return grouped_filter_bank(layer, m).reshaped({m.batch(), g.out_channels, g.in_channels, g.kernel, g.kernel});
}

template <typename T>
Tensor<T> eks_forward(const EksConvLayer<T>& layer, const Tensor<T>& h, const TaskIndexMatrix& m) {
  check_routing(layer, h, m);
  const ConvGeometry& g = layer.geometry;
  Tensor<T> out;
  if (layer.task_count() == 0) {
    out = conv2d(h, layer.w0, g);
  } else {
    if (g.groups != 1) throw ShapeError("EKS layers with experts must be ungrouped");
    layer.validate();
    const std::size_t batch = h.dim(0);
    const Tensor<T> bank = grouped_filter_bank(layer, m);
    const Tensor<T> folded = h.reshaped({1, batch * g.in_channels, h.dim(2), h.dim(3)});
    Tensor<T> y = conv2d(folded, bank, grouped_geometry(g, batch));
    out = std::move(y).reshaped({batch, g.out_channels, y.dim(2), y.dim(3)});
  }
  if (layer.has_bias()) add_channel_bias(out, layer.bias);
  return out;
}

template <typename T>
Tensor<T> naive_forward(const EksConvLayer<T>& layer, const Tensor<T>& h, const TaskIndexMatrix& m) {
  check_routing(layer, h, m);
  const ConvGeometry& g = layer.geometry;
  if (layer.task_count() == 0) return eks_forward(layer, h, m);
  layer.validate();
  Tensor<T> out({h.dim(0), g.out_channels, g.output_extent(h.dim(2)), g.output_extent(h.dim(3))});
  for (std::size_t t = 0; t < layer.task_count(); ++t) {
    const auto rows = m.samples_of(t);
    if (rows.empty()) continue;
    const Tensor<T> fused = fuse_weights(layer.w0, layer.experts[t]);
    Tensor<T> part = conv2d(gather_batch(h, rows), fused, g);
    scatter_batch(out, part, rows);
  }
  if (layer.has_bias()) add_channel_bias(out, layer.bias);
  return out;
}

template <typename T>
EksGrads<T> eks_backward(const EksConvLayer<T>& layer, const Tensor<T>& h, const TaskIndexMatrix& m,
                         const Tensor<T>& grad_out) {
  check_routing(layer, h, m);
  const ConvGeometry& g = layer.geometry;
  const std::size_t batch = h.dim(0);
  const Shape out_shape{batch, g.out_channels, g.output_extent(h.dim(2)), g.output_extent(h.dim(3))};
  if (grad_out.shape() != out_shape) {
    throw ShapeError(fmt::format("eks_backward grad_out shape {} expected {}", shape_string(grad_out.shape()),
                                 shape_string(out_shape)));
  }
  EksGrads<T> grads;
  if (layer.has_bias()) grads.bias = channel_bias_grad(grad_out);

  if (layer.task_count() == 0) {
    auto cg = conv2d_backward(grad_out, h, layer.w0, g);
    grads.input = std::move(cg.input);
    grads.w0 = std::move(cg.weight);
    return grads;
  }

  layer.validate();
  const Tensor<T> bank = grouped_filter_bank(layer, m);
  const ConvGeometry gg = grouped_geometry(g, batch);
  const Tensor<T> folded = h.reshaped({1, batch * g.in_channels, h.dim(2), h.dim(3)});
  const Tensor<T> folded_grad = grad_out.reshaped({1, batch * g.out_channels, out_shape[2], out_shape[3]});
  auto cg = conv2d_backward(folded_grad, folded, bank, gg);
  grads.input = std::move(cg.input).reshaped(h.shape());

  // cg.weight holds one weight gradient per sample; the backbone takes all of
  // them, each expert only those of its own samples.
  const std::size_t per_sample = g.weight_size();
  grads.w0 = Tensor<T>(g.weight_shape());
  std::vector<Tensor<T>> per_task(layer.task_count());
  for (std::size_t b = 0; b < batch; ++b) {
    const T* src = cg.weight.raw() + b * per_sample;
    for (std::size_t i = 0; i < per_sample; ++i) grads.w0[i] += src[i];
    Tensor<T>& acc = per_task[m.task_of(b)];
    if (acc.empty()) acc = Tensor<T>(g.weight_shape());
    for (std::size_t i = 0; i < per_sample; ++i) acc[i] += src[i];
  }
  grads.experts.reserve(layer.task_count());
  for (std::size_t t = 0; t < layer.task_count(); ++t) {
    const auto& pair = layer.experts[t];
    if (per_task[t].empty()) {
      grads.experts.push_back({Tensor<T>(pair.b_factor.shape()), Tensor<T>(pair.a_factor.shape())});
    } else {
      auto [gb, ga] = expert_factor_grads(pair, per_task[t]);
      grads.experts.push_back({std::move(gb), std::move(ga)});
    }
  }
  return grads;
}

CostEstimate cost_estimate(std::uint64_t tasks, std::uint64_t batch, std::uint64_t seq_len, std::uint64_t dim,
                           std::uint64_t rank) {
  if (batch == 0 || seq_len == 0 || dim == 0 || rank == 0) throw ValueError("cost_estimate inputs must be positive");
  constexpr std::uint64_t c2 = 2;
  const std::uint64_t d2 = dim * dim;
  CostEstimate est;
  est.eks_flops = tasks * c2 * rank * d2 + c2 * batch * seq_len * d2;
  est.flora_flops = c2 * rank * batch * seq_len * d2;
  // T*r/(b*l) + 1 <= r  <=>  T*r + b*l <= r*b*l
  est.eks_cheaper = tasks * rank + batch * seq_len <= rank * batch * seq_len;
  return est;
}

template struct EksConvLayer<float>;
template struct EksConvLayer<double>;

#define LORKD_INSTANTIATE(T)                                                                              \
  template TaskIndexMatrix TaskIndexMatrix::from_one_hot<T>(const Tensor<T>&);                           \
  template Tensor<T> TaskIndexMatrix::one_hot<T>() const;                                                \
  template Tensor<T> aggregate_weights<T>(const EksConvLayer<T>&, const TaskIndexMatrix&);               \
  template Tensor<T> eks_forward<T>(const EksConvLayer<T>&, const Tensor<T>&, const TaskIndexMatrix&);   \
  template Tensor<T> naive_forward<T>(const EksConvLayer<T>&, const Tensor<T>&, const TaskIndexMatrix&); \
  template EksGrads<T> eks_backward<T>(const EksConvLayer<T>&, const Tensor<T>&, const TaskIndexMatrix&, \
                                       const Tensor<T>&);

LORKD_INSTANTIATE(float)
LORKD_INSTANTIATE(double)
#undef LORKD_INSTANTIATE

}  // namespace lorkd
