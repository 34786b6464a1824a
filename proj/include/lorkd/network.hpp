// SPDX-License-Identifier: Apache-2.0

// Small sequential networks with channel-concat skips, interpreted layer by
// layer with hand-written backward passes.
//
// One Network type covers the three roles:
//  - student: every conv is an EKS conv carrying T low-rank experts (or none,
//    for the expert-free multi-task baseline); T task heads for classification.
//  - teacher: plain convs, one unified head / output over all classes or masks.
//  - extracted: a student with one task's experts fused in and the rest dropped.

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "lorkd/eks_conv.hpp"
#include "lorkd/tensor.hpp"

namespace lorkd {

enum class NetMode { cls, seg };
enum class NetRole { student, teacher, extracted };

std::string to_string(NetMode mode);
std::string to_string(NetRole role);
NetMode parse_net_mode(const std::string& s);
NetRole parse_net_role(const std::string& s);

/// Down-sampling is an eks_conv / plain_conv with stride 2.
enum class LayerKind { eks_conv, plain_conv, relu, upsample, concat, global_avg_pool, sigmoid };

std::string to_string(LayerKind kind);
LayerKind parse_layer_kind(const std::string& s);

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t conv = 0;       // conv slot, for eks_conv / plain_conv
  std::size_t skip_from = 0;  // concat: index of the layer whose output is appended

  bool operator==(const LayerSpec&) const = default;
};

template <typename T>
struct LinearHead {
  Tensor<T> weight;  // [out, in]
  Tensor<T> bias;    // [out]
  bool empty() const noexcept { return weight.empty(); }
};

enum class ParamKind { backbone, expert, head, projection };

template <typename T>
struct Network {
  NetMode mode = NetMode::cls;
  NetRole role = NetRole::student;
  std::size_t input_channels = 1;
  /// Classes per task (cls) or mask channels per task (seg).
  std::vector<std::size_t> class_counts;
  /// Task index an extracted network was fused for.
  std::size_t extracted_task = 0;
  std::vector<LayerSpec> layers;
  std::vector<EksConvLayer<T>> convs;
  std::vector<LinearHead<T>> heads;
  /// Student feature -> teacher feature width, used only by the feature transfer loss.
  LinearHead<T> projection;

  std::size_t task_count() const noexcept { return class_counts.size(); }
  /// Rank of task t's experts, or 0 when the network carries no experts.
  std::size_t expert_rank(std::size_t task) const;
  bool has_experts() const;
  /// Channel width of the penultimate (pooled) features of a cls network.
  std::size_t feature_width() const;
  /// Offset of task t's block in a unified teacher output.
  std::size_t class_offset(std::size_t task) const;

  /// Visits every parameter tensor in a fixed order with a stable name.
  void for_each_param(const std::function<void(const std::string&, Tensor<T>&, ParamKind)>& fn);
  void for_each_param(const std::function<void(const std::string&, const Tensor<T>&, ParamKind)>& fn) const;

  std::size_t param_count() const;
  /// Conv weights and biases only.
  std::size_t backbone_param_count() const;
  std::size_t head_param_count() const;
  std::size_t expert_param_count() const;

  template <typename U>
  Network<U> cast() const;

  void validate() const;
};

/// Same structure, every tensor zeroed; used as the gradient container.
template <typename T>
Network<T> zeros_like(const Network<T>& net);

struct StudentOptions {
  std::vector<std::size_t> class_counts;  // per task; size is T
  std::size_t width = 8;
  std::uint64_t seed = 0;
  /// Per-task expert ranks; empty builds the expert-free shared baseline.
  std::vector<std::size_t> ranks;
  /// Teacher feature width for the cls transfer projection; 0 means none.
  std::size_t projection_width = 0;
  std::size_t input_channels = 1;
};

/// Four 3x3 convs (widths w, 2w, 4w, 4w; stride 2 on the 2nd and 4th), ReLU,
/// global average pool, T linear heads.
template <typename T>
Network<T> build_student_cls(const StudentOptions& options);

/// Encoder-decoder: two stride-2 downs, two nearest x2 ups with skip concats,
/// a final 1x1 conv to max(K_t) channels and a sigmoid.
template <typename T>
Network<T> build_student_seg(const StudentOptions& options);

struct TeacherOptions {
  NetMode mode = NetMode::cls;
  std::vector<std::size_t> class_counts;
  std::size_t width = 16;
  std::uint64_t seed = 0;
  std::size_t input_channels = 1;
};

/// Plain-conv version of the student architecture with a unified head (all
/// classes) or unified output (all masks).
template <typename T>
Network<T> build_teacher(const TeacherOptions& options);

/// Replaces every expert set with freshly initialised (inert, B = 0) experts of
/// the given per-task ranks, and checks the low-rank budget.
template <typename T>
void attach_experts(Network<T>& net, const std::vector<std::size_t>& ranks, std::uint64_t seed);

/// Throws ValueError when a task's total expert size is not strictly below the
/// dense conv weight count.
template <typename T>
void check_expert_budget(const Network<T>& net);

template <typename T>
struct ForwardPass {
  Tensor<T> input;
  TaskIndexMatrix tasks;
  /// Output of every layer.
  std::vector<Tensor<T>> outputs;
  /// cls: pooled features [B, F]; seg: sigmoid masks [B, K, H, W].
  Tensor<T> output;
  /// cls: per-sample logits from the sample's head.
  std::vector<Tensor<T>> logits;
  /// cls with projection: projected features [B, F_teacher].
  Tensor<T> projected;
};

template <typename T>
ForwardPass<T> forward_decomposed(const Network<T>& net, const Tensor<T>& input, const TaskIndexMatrix& tasks);

template <typename T>
struct OutputGrads {
  Tensor<T> output;                // seg: d/d masks; cls: d/d features (may be empty)
  std::vector<Tensor<T>> logits;   // cls
  Tensor<T> projected;             // cls, may be empty
};

/// Gradients of every parameter, in a network-shaped container.
template <typename T>
Network<T> backward_decomposed(const Network<T>& net, const ForwardPass<T>& pass, const OutputGrads<T>& grads);

/// Standalone plain network for one task: experts fused, other tasks dropped.
template <typename T>
Network<T> extract_expert(const Network<T>& net, std::size_t task);

extern template struct Network<float>;
extern template struct Network<double>;

}  // namespace lorkd
