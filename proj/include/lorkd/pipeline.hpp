// SPDX-License-Identifier: Apache-2.0

// Training stages: teacher training, warmup with frozen experts, rank
// planning, joint decomposition training, evaluation and cross-task CKA.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lorkd/data.hpp"
#include "lorkd/lowrank.hpp"
#include "lorkd/network.hpp"
#include "lorkd/optim.hpp"

namespace lorkd {

enum class RankMode { balanced, imbalanced };

std::string to_string(RankMode mode);
RankMode parse_rank_mode(const std::string& s);

struct TrainConfig {
  NetMode mode = NetMode::cls;
  std::size_t base_rank = 8;
  double beta = 1.0;
  double tau = 1.0;
  double learning_rate = 0.05;
  OptimizerKind optimizer = OptimizerKind::sgd_momentum;
  Schedule schedule = Schedule::cosine;
  std::size_t warmup_steps = 0;
  std::size_t train_steps = 0;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  RankMode rank_mode = RankMode::balanced;
  std::size_t teacher_steps = 0;
  double teacher_learning_rate = 0.05;
};

struct ArchConfig {
  std::size_t student_width = 8;
  std::size_t teacher_width = 16;
};

struct DataConfig {
  std::size_t train_per_task = 256;
  std::size_t eval_per_task = 128;
  std::size_t cka_probe = 128;
  std::vector<SyntheticTaskSpec> tasks;
};

struct ExperimentConfig {
  TrainConfig train;
  ArchConfig arch;
  DataConfig data;

  std::size_t task_count() const noexcept { return data.tasks.size(); }
  std::vector<std::size_t> class_counts() const;
  void validate() const;
};

struct TaskData {
  NetMode mode = NetMode::cls;
  std::vector<ClsDataset> cls_train, cls_eval;
  std::vector<SegDataset> seg_train, seg_eval;

  std::size_t task_count() const noexcept { return mode == NetMode::cls ? cls_train.size() : seg_train.size(); }
};

/// Train and eval splits for every task, derived from the config seed.
TaskData make_task_data(const ExperimentConfig& config);

/// One task-stratified mixed batch: sample i of step s belongs to task
/// (s * B + i) mod T, drawn uniformly from that task's training split.
struct Batch {
  Tensor<float> images;
  std::vector<std::size_t> tasks;
  std::vector<std::size_t> labels;  // cls
  Tensor<float> masks;              // seg: [B, K_max, S, S]; channels past K_t are zero
};

Batch sample_batch(const TaskData& data, std::size_t step, std::size_t batch_size, std::uint64_t seed);

struct MetricsReport {
  std::string metric;  // "accuracy" or "dsc"
  std::vector<double> per_task;
  double macro_avg = 0;
  std::size_t params_train = 0;
  std::vector<std::size_t> params_fused;  // per task
  std::vector<std::size_t> ranks;
  std::uint64_t forward_launches = 0;
  std::uint64_t backward_launches = 0;
  double wall_clock_s = 0;
};

Network<float> build_student(const ExperimentConfig& config, bool with_experts);
Network<float> build_teacher_for(const ExperimentConfig& config);

/// Trains the teacher on all tasks (each task's block of the unified output).
Network<float> train_teacher(const ExperimentConfig& config, const TaskData& data);

/// Trains backbone, heads and projection for warmup_steps with every expert
/// frozen. Logs one (step, task, task loss) record per task per step.
WarmupLog run_warmup(const ExperimentConfig& config, Network<float>& net, const TaskData& data,
                     const Network<float>* teacher);

/// Balanced mode, or an empty warmup log, gives base_rank everywhere.
RankPlan choose_ranks(const ExperimentConfig& config, const WarmupLog& log);

/// Re-attaches experts per the plan (when the net carries experts), then
/// trains every parameter jointly for train_steps.
void run_decomposition(const ExperimentConfig& config, Network<float>& net, const Network<float>* teacher,
                       const TaskData& data, const RankPlan& plan);

MetricsReport evaluate(const Network<float>& net, const TaskData& data);

/// Penultimate features of the probe images with every sample routed to task t.
Tensor<float> task_features(const Network<float>& net, const Tensor<float>& probe, std::size_t task);

Tensor<float> cka_probe(const TaskData& data, std::size_t count);

/// T x T linear-CKA matrix of task-routed penultimate features.
std::vector<std::vector<double>> cka_matrix(const Network<float>& net, const Tensor<float>& probe);

double mean_off_diagonal(const std::vector<std::vector<double>>& m);

struct ArmResult {
  Network<float> net;
  WarmupLog log;
  RankPlan plan;
  MetricsReport report;
};

/// Full student run: warmup, rank planning, decomposition, evaluation.
/// with_experts = false trains the expert-free shared multi-task baseline
/// on the same schedule.
ArmResult run_arm(const ExperimentConfig& config, const TaskData& data, const Network<float>* teacher,
                  bool with_experts);

}  // namespace lorkd
