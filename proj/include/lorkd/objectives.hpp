// SPDX-License-Identifier: Apache-2.0

// Training losses. Every loss returns its value together with the analytic
// gradient with respect to the student-side input. All logs are natural.

#pragma once

#include <vector>

#include "lorkd/tensor.hpp"

namespace lorkd {

inline constexpr double kDiceSmooth = 1e-6;
inline constexpr double kProbClip = 1e-7;
inline constexpr double kSegBetaDefault = 0.1;
inline constexpr double kClsBetaDefault = 1.0;

template <typename T>
struct LossResult {
  T value = 0;
  Tensor<T> grad;
};

/// Binary masks [K, H, W].
template <typename T>
struct SegTarget {
  Tensor<T> masks;

  explicit SegTarget(Tensor<T> m);
};

struct ClsTarget {
  std::size_t task = 0;
  std::size_t label = 0;
};

/// 1 - (2*sum(p*s) + eps) / (sum(p^2) + sum(s^2) + eps).
template <typename T>
LossResult<T> dice_loss(const Tensor<T>& pred, const SegTarget<T>& target);

/// Two-term binary cross-entropy averaged over K*H*W, predictions clipped.
template <typename T>
LossResult<T> bce_loss(const Tensor<T>& pred, const SegTarget<T>& target);

/// sum over rows of KL(teacher || student) along the last axis; the gradient is
/// with respect to the student probabilities.
template <typename T>
LossResult<T> kl_divergence(const Tensor<T>& p_teacher, const Tensor<T>& p_student);

/// Mask-level KL: every pixel is the Bernoulli pair (p, 1-p), summed over K*H*W.
template <typename T>
LossResult<T> mask_kl(const Tensor<T>& teacher_pred, const Tensor<T>& pred);

template <typename T>
struct SegLoss {
  T total = 0;
  T bce = 0;
  T dice = 0;
  T transfer = 0;
  Tensor<T> grad;  // d total / d pred
};

/// bce + dice + beta * mask_kl. An empty teacher_pred skips the transfer term.
template <typename T>
SegLoss<T> total_seg_loss(const Tensor<T>& pred, const SegTarget<T>& target, const Tensor<T>& teacher_pred, T beta);

template <typename T>
struct ClsLoss {
  T total = 0;
  T ce = 0;
  T transfer = 0;
  std::vector<Tensor<T>> grad_logits;  // per sample
  Tensor<T> grad_student_features;     // [B, F]; empty when no transfer term
};

/// Batch mean of CE(y, softmax(logits/tau)) + beta * KL(softmax(f_t/tau) || softmax(f_s/tau)).
/// `logits[i]` comes from the head of targets[i].task; `class_counts` bounds the labels.
/// Empty feature tensors skip the transfer term.
template <typename T>
ClsLoss<T> total_cls_loss(const Tensor<T>& student_features, const Tensor<T>& teacher_features,
                          const std::vector<Tensor<T>>& logits, const std::vector<ClsTarget>& targets,
                          const std::vector<std::size_t>& class_counts, T beta, T tau);

}  // namespace lorkd
