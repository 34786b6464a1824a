// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <vector>

#include "lorkd/tensor.hpp"

namespace lorkd {

inline constexpr double kBinarizeThreshold = 0.5;

/// Per-channel DSC of [n, K, H, W] predictions (binarized at 0.5) against
/// binary targets, averaged over samples. Empty prediction on an empty target
/// scores 1.
template <typename T>
std::vector<double> evaluate_dsc(const Tensor<T>& pred, const Tensor<T>& target);

/// Fraction of samples whose argmax logit equals the label.
template <typename T>
double evaluate_accuracy(const std::vector<Tensor<T>>& logits, const std::vector<std::size_t>& labels);

double macro_average(const std::vector<double>& values);

/// Linear CKA between [n, d1] and [n, d2] feature matrices (rows are samples).
template <typename T>
double cka_similarity(const Tensor<T>& a, const Tensor<T>& b);

}  // namespace lorkd
