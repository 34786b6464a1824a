// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "lorkd/network.hpp"
#include "lorkd/tensor.hpp"

namespace lorkd {

enum class OptimizerKind { sgd_momentum, adamw };
enum class Schedule { constant, cosine };

std::string to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(const std::string& s);
std::string to_string(Schedule s);
Schedule parse_schedule(const std::string& s);

struct SgdSettings {
  double momentum = 0.9;
  double weight_decay = 0.0;
};

struct AdamWSettings {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

template <typename T>
struct SgdState {
  std::vector<Tensor<T>> velocity;
};

template <typename T>
struct AdamWState {
  std::vector<Tensor<T>> first;
  std::vector<Tensor<T>> second;
  std::size_t step = 0;
};

/// v = momentum * v + g (+ wd * w); w -= lr * v. The first step uses v = g.
template <typename T>
void sgd_momentum_step(const std::vector<Tensor<T>*>& params, const std::vector<const Tensor<T>*>& grads,
                       SgdState<T>& state, double lr, const SgdSettings& settings = {});

/// Bias-corrected Adam with decoupled weight decay (w -= lr * wd * w before the Adam update).
template <typename T>
void adamw_step(const std::vector<Tensor<T>*>& params, const std::vector<const Tensor<T>*>& grads,
                AdamWState<T>& state, double lr, const AdamWSettings& settings = {});

double scheduled_lr(double base_lr, Schedule schedule, std::size_t step, std::size_t total_steps);

/// Optimizer over the trainable parameters of a network. Which parameter kinds
/// are trainable is fixed at construction; frozen tensors are never touched.
template <typename T>
class NetworkOptimizer {
 public:
  NetworkOptimizer(OptimizerKind kind, std::function<bool(ParamKind)> trainable);

  void step(Network<T>& net, const Network<T>& grads, double lr);

 private:
  OptimizerKind kind_;
  std::function<bool(ParamKind)> trainable_;
  SgdState<T> sgd_;
  AdamWState<T> adam_;
};

}  // namespace lorkd
