// SPDX-License-Identifier: Apache-2.0

#include "lorkd/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/format.h>

#include "lorkd/ops.hpp"

namespace lorkd {

namespace {

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(fmt::format("{}: shape {} vs {}", what, shape_string(a.shape()), shape_string(b.shape())));
  }
}

template <typename T>
T clip_prob(T p) {
  return std::clamp(p, T(kProbClip), T(1) - T(kProbClip));
}

}  // namespace

template <typename T>
SegTarget<T>::SegTarget(Tensor<T> m) : masks(std::move(m)) {
  for (T v : masks.data())
    if (v != T(0) && v != T(1)) throw ValueError(fmt::format("segmentation target has non-binary value {}", v));
}

template <typename T>
LossResult<T> dice_loss(const Tensor<T>& pred, const SegTarget<T>& target) {
  require_same_shape(pred, target.masks, "dice_loss");
  const T eps = T(kDiceSmooth);
  T inter = 0, p2 = 0, s2 = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const T p = pred[i], s = target.masks[i];
    inter += p * s;
    p2 += p * p;
    s2 += s * s;
  }
  const T num = 2 * inter + eps;
  const T den = p2 + s2 + eps;
  LossResult<T> r{T(1) - num / den, Tensor<T>(pred.shape())};
  for (std::size_t i = 0; i < pred.size(); ++i) {
    r.grad[i] = -(2 * target.masks[i] * den - num * 2 * pred[i]) / (den * den);
  }
  return r;
}

template <typename T>
LossResult<T> bce_loss(const Tensor<T>& pred, const SegTarget<T>& target) {
  require_same_shape(pred, target.masks, "bce_loss");
  const T n = static_cast<T>(pred.size());
  LossResult<T> r{0, Tensor<T>(pred.shape())};
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const T p = clip_prob(pred[i]);
    const T s = target.masks[i];
    r.value -= s * std::log(p) + (1 - s) * std::log(1 - p);
    const bool clipped = p != pred[i];
    r.grad[i] = clipped ? T(0) : -(s / p - (1 - s) / (1 - p)) / n;
  }
  r.value /= n;
  return r;
}

template <typename T>
LossResult<T> kl_divergence(const Tensor<T>& p_teacher, const Tensor<T>& p_student) {
  require_same_shape(p_teacher, p_student, "kl_divergence");
  const std::size_t width = p_teacher.shape().back();
  const std::size_t rows = p_teacher.size() / width;
  LossResult<T> r{0, Tensor<T>(p_student.shape())};
  for (std::size_t row = 0; row < rows; ++row) {
    T st = 0, ss = 0;
    for (std::size_t j = 0; j < width; ++j) {
      st += p_teacher[row * width + j];
      ss += p_student[row * width + j];
    }
    if (std::abs(st - 1) > T(1e-5) || std::abs(ss - 1) > T(1e-5)) {
      throw ValueError(fmt::format("kl_divergence: row {} is not normalized (teacher {}, student {})", row, st, ss));
    }
    for (std::size_t j = 0; j < width; ++j) {
      const std::size_t i = row * width + j;
      const T q = std::max(p_student[i], T(kProbClip));
      const T p = p_teacher[i];
      if (p > 0) r.value += p * std::log(p / q);
      r.grad[i] = p_student[i] < T(kProbClip) ? T(0) : -p / q;
    }
  }
  return r;
}

template <typename T>
LossResult<T> mask_kl(const Tensor<T>& teacher_pred, const Tensor<T>& pred) {
  require_same_shape(teacher_pred, pred, "mask_kl");
  LossResult<T> r{0, Tensor<T>(pred.shape())};
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const T t = teacher_pred[i];
    if (t < 0 || t > 1) throw ValueError(fmt::format("mask_kl: teacher probability {} outside [0,1]", t));
    const T p = clip_prob(pred[i]);
    if (t > 0) r.value += t * std::log(t / p);
    if (t < 1) r.value += (1 - t) * std::log((1 - t) / (1 - p));
    r.grad[i] = p != pred[i] ? T(0) : -t / p + (1 - t) / (1 - p);
  }
  return r;
}

template <typename T>
SegLoss<T> total_seg_loss(const Tensor<T>& pred, const SegTarget<T>& target, const Tensor<T>& teacher_pred, T beta) {
  if (beta < 0) throw ValueError("beta must be non-negative");
  auto bce = bce_loss(pred, target);
  auto dice = dice_loss(pred, target);
  SegLoss<T> out;
  out.bce = bce.value;
  out.dice = dice.value;
  out.grad = std::move(bce.grad);
  out.grad += dice.grad;
  if (!teacher_pred.empty() && beta > 0) {
    auto kl = mask_kl(teacher_pred, pred);
    out.transfer = kl.value;
    kl.grad *= beta;
    out.grad += kl.grad;
  }
  out.total = out.bce + out.dice + beta * out.transfer;
  return out;
}

template <typename T>
ClsLoss<T> total_cls_loss(const Tensor<T>& student_features, const Tensor<T>& teacher_features,
                          const std::vector<Tensor<T>>& logits, const std::vector<ClsTarget>& targets,
                          const std::vector<std::size_t>& class_counts, T beta, T tau) {
  if (!(tau > 0)) throw ValueError("tau must be positive");
  if (beta < 0) throw ValueError("beta must be non-negative");
  if (logits.size() != targets.size() || targets.empty()) {
    throw ShapeError(fmt::format("total_cls_loss: {} logit rows for {} targets", logits.size(), targets.size()));
  }
  const std::size_t batch = targets.size();
  const T inv_b = T(1) / static_cast<T>(batch);
  ClsLoss<T> out;
  out.grad_logits.reserve(batch);
  for (std::size_t i = 0; i < batch; ++i) {
    const ClsTarget& tgt = targets[i];
    if (tgt.task >= class_counts.size()) {
      throw ValueError(fmt::format("sample {}: task {} out of range (T={})", i, tgt.task, class_counts.size()));
    }
    if (logits[i].size() != class_counts[tgt.task]) {
      throw ShapeError(fmt::format("sample {}: {} logits for task {} with {} classes", i, logits[i].size(), tgt.task,
                                   class_counts[tgt.task]));
    }
    if (tgt.label >= class_counts[tgt.task]) {
      throw ValueError(fmt::format("sample {}: label {} out of range for task {}", i, tgt.label, tgt.task));
    }
    Tensor<T> p = softmax_with_temperature(logits[i], tau);
    out.ce -= std::log(std::max(p[tgt.label], std::numeric_limits<T>::min())) * inv_b;
    p[tgt.label] -= 1;
    p *= inv_b / tau;
    out.grad_logits.push_back(std::move(p));
  }

  const bool transfer = beta > 0 && !teacher_features.empty() && !student_features.empty();
  if (transfer) {
    require_same_shape(student_features, teacher_features, "feature transfer");
    if (student_features.dim(0) != batch) throw ShapeError("feature batch does not match targets");
    const Tensor<T> pt = softmax_with_temperature(teacher_features, tau);
    const Tensor<T> ps = softmax_with_temperature(student_features, tau);
    const std::size_t width = student_features.dim(1);
    out.grad_student_features = Tensor<T>(student_features.shape());
    for (std::size_t i = 0; i < batch; ++i) {
      // log-softmax of the student row, for an exact KL without clipping
      const T* fs = student_features.raw() + i * width;
      T mx = fs[0];
      for (std::size_t j = 1; j < width; ++j) mx = std::max(mx, fs[j]);
      T z = 0;
      for (std::size_t j = 0; j < width; ++j) z += std::exp((fs[j] - mx) / tau);
      const T log_z = std::log(z);
      for (std::size_t j = 0; j < width; ++j) {
        const std::size_t k = i * width + j;
        const T log_ps = (fs[j] - mx) / tau - log_z;
        if (pt[k] > 0) out.transfer += pt[k] * (std::log(pt[k]) - log_ps) * inv_b;
        out.grad_student_features[k] = beta * (ps[k] - pt[k]) * inv_b / tau;
      }
    }
  }
  out.total = out.ce + beta * out.transfer;
  return out;
}

template struct SegTarget<float>;
template struct SegTarget<double>;

#define LORKD_INSTANTIATE(T)                                                                                 \
  template LossResult<T> dice_loss<T>(const Tensor<T>&, const SegTarget<T>&);                               \
  template LossResult<T> bce_loss<T>(const Tensor<T>&, const SegTarget<T>&);                                \
  template LossResult<T> kl_divergence<T>(const Tensor<T>&, const Tensor<T>&);                              \
  template LossResult<T> mask_kl<T>(const Tensor<T>&, const Tensor<T>&);                                    \
  template SegLoss<T> total_seg_loss<T>(const Tensor<T>&, const SegTarget<T>&, const Tensor<T>&, T);        \
  template ClsLoss<T> total_cls_loss<T>(const Tensor<T>&, const Tensor<T>&, const std::vector<Tensor<T>>&, \
                                        const std::vector<ClsTarget>&, const std::vector<std::size_t>&, T, T);

LORKD_INSTANTIATE(float)
LORKD_INSTANTIATE(double)
#undef LORKD_INSTANTIATE

}  // namespace lorkd
