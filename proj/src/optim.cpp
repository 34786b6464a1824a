// SPDX-License-Identifier: Apache-2.0

#include "lorkd/optim.hpp"

#include <cmath>
#include <numbers>

#include <fmt/format.h>

namespace lorkd {

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::sgd_momentum ? "sgd_momentum" : "adamw"; }

OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd_momentum") return OptimizerKind::sgd_momentum;
  if (s == "adamw") return OptimizerKind::adamw;
  throw ValueError(fmt::format("unknown optimizer '{}' (expected sgd_momentum or adamw)", s));
}

std::string to_string(Schedule s) { return s == Schedule::constant ? "constant" : "cosine"; }

Schedule parse_schedule(const std::string& s) {
  if (s == "constant") return Schedule::constant;
  if (s == "cosine") return Schedule::cosine;
  throw ValueError(fmt::format("unknown schedule '{}' (expected constant or cosine)", s));
}

namespace {

template <typename T>
void check_pairs(const std::vector<Tensor<T>*>& params, const std::vector<const Tensor<T>*>& grads) {
  if (params.size() != grads.size()) throw ShapeError("optimizer: parameter / gradient count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i]->shape() != grads[i]->shape()) {
      throw ShapeError(fmt::format("optimizer: parameter {} shape {} vs gradient {}", i,
                                   shape_string(params[i]->shape()), shape_string(grads[i]->shape())));
    }
}

template <typename T>
void ensure_state(std::vector<Tensor<T>>& slots, const std::vector<Tensor<T>*>& params) {
  if (slots.size() == params.size()) return;
  slots.clear();
  for (const Tensor<T>* p : params) slots.emplace_back(p->shape());
}

}  // namespace

template <typename T>
void sgd_momentum_step(const std::vector<Tensor<T>*>& params, const std::vector<const Tensor<T>*>& grads,
                       SgdState<T>& state, double lr, const SgdSettings& s) {
  check_pairs(params, grads);
  const bool first = state.velocity.size() != params.size();
  ensure_state(state.velocity, params);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& w = *params[i];
    const Tensor<T>& g = *grads[i];
    Tensor<T>& v = state.velocity[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const T d = g[j] + static_cast<T>(s.weight_decay) * w[j];
      v[j] = first ? d : static_cast<T>(s.momentum) * v[j] + d;
      w[j] -= static_cast<T>(lr) * v[j];
    }
  }
}

template <typename T>
void adamw_step(const std::vector<Tensor<T>*>& params, const std::vector<const Tensor<T>*>& grads,
                AdamWState<T>& state, double lr, const AdamWSettings& s) {
  check_pairs(params, grads);
  ensure_state(state.first, params);
  ensure_state(state.second, params);
  ++state.step;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(s.beta1), b2 = static_cast<T>(s.beta2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& w = *params[i];
    const Tensor<T>& g = *grads[i];
    Tensor<T>& m = state.first[i];
    Tensor<T>& v = state.second[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = b1 * m[j] + (1 - b1) * g[j];
      v[j] = b2 * v[j] + (1 - b2) * g[j] * g[j];
      w[j] -= static_cast<T>(lr * s.weight_decay) * w[j];
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      w[j] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + s.eps));
    }
  }
}

double scheduled_lr(double base_lr, Schedule schedule, std::size_t step, std::size_t total_steps) {
  if (schedule == Schedule::constant || total_steps == 0) return base_lr;
  const double progress = static_cast<double>(std::min(step, total_steps)) / static_cast<double>(total_steps);
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename T>
NetworkOptimizer<T>::NetworkOptimizer(OptimizerKind kind, std::function<bool(ParamKind)> trainable)
    : kind_(kind), trainable_(std::move(trainable)) {}

template <typename T>
void NetworkOptimizer<T>::step(Network<T>& net, const Network<T>& grads, double lr) {
  std::vector<Tensor<T>*> params;
  std::vector<const Tensor<T>*> gs;
  net.for_each_param([&](const std::string&, Tensor<T>& t, ParamKind k) {
    if (trainable_(k)) params.push_back(&t);
  });
  grads.for_each_param([&](const std::string&, const Tensor<T>& t, ParamKind k) {
    if (trainable_(k)) gs.push_back(&t);
  });
  if (kind_ == OptimizerKind::sgd_momentum)
    sgd_momentum_step(params, gs, sgd_, lr);
  else
    adamw_step(params, gs, adam_, lr);
}

template class NetworkOptimizer<float>;
template class NetworkOptimizer<double>;

#define LORKD_INSTANTIATE(T)                                                                                      \
  template void sgd_momentum_step<T>(const std::vector<Tensor<T>*>&, const std::vector<const Tensor<T>*>&,       \
                                     SgdState<T>&, double, const SgdSettings&);                                  \
  template void adamw_step<T>(const std::vector<Tensor<T>*>&, const std::vector<const Tensor<T>*>&, AdamWState<T>&, \
                              double, const AdamWSettings&);

LORKD_INSTANTIATE(float)
LORKD_INSTANTIATE(double)
#undef LORKD_INSTANTIATE

}  // namespace lorkd
