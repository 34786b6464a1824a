// SPDX-License-Identifier: Apache-2.0

#include "lorkd/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <random>

#include <fmt/format.h>

#include "lorkd/metrics.hpp"
#include "lorkd/objectives.hpp"
#include "lorkd/ops.hpp"
#include "lorkd/rng.hpp"

namespace lorkd {

std::string to_string(RankMode mode) { return mode == RankMode::balanced ? "balanced" : "imbalanced"; }

RankMode parse_rank_mode(const std::string& s) {
  if (s == "balanced") return RankMode::balanced;
  if (s == "imbalanced") return RankMode::imbalanced;
  throw ValueError(fmt::format("unknown rank_mode '{}' (expected balanced or imbalanced)", s));
}

std::vector<std::size_t> ExperimentConfig::class_counts() const {
  std::vector<std::size_t> out;
  for (const auto& t : data.tasks) out.push_back(t.classes);
  return out;
}

void ExperimentConfig::validate() const {
  const auto& tr = train;
  if (data.tasks.empty()) throw ConfigError("at least one task is required");
  const GeneratorKind want = tr.mode == NetMode::cls ? GeneratorKind::pattern_cls : GeneratorKind::shape_seg;
  for (std::size_t t = 0; t < data.tasks.size(); ++t) {
    const auto& spec = data.tasks[t];
    spec.validate();
    if (spec.task_id != t) throw ConfigError(fmt::format("task {} has task_id {}", t, spec.task_id));
    if (spec.kind != want) {
      throw ConfigError(fmt::format("task {} uses generator {} in {} mode", t, to_string(spec.kind), to_string(tr.mode)));
    }
    if (spec.image_size != data.tasks[0].image_size) throw ConfigError("all tasks must share one image_size");
  }
  if (tr.base_rank < kMinRank) throw ConfigError(fmt::format("base_rank must be >= {}", kMinRank));
  if (!(tr.beta >= 0)) throw ConfigError("beta must be >= 0");
  if (!(tr.tau > 0)) throw ConfigError("tau must be > 0");
  if (!(tr.learning_rate > 0) || !(tr.teacher_learning_rate > 0)) throw ConfigError("learning rates must be > 0");
  if (tr.batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (arch.student_width < 4) throw ConfigError("student_width must be >= 4");
  if (arch.teacher_width <= arch.student_width) throw ConfigError("teacher_width must exceed student_width");
  if (data.train_per_task == 0 || data.eval_per_task == 0) throw ConfigError("dataset sizes must be >= 1");
}

TaskData make_task_data(const ExperimentConfig& config) {
  TaskData d;
  d.mode = config.train.mode;
  const std::uint64_t train_seed = derive_seed(config.train.seed, {100});
  const std::uint64_t eval_seed = derive_seed(config.train.seed, {200});
  for (const auto& spec : config.data.tasks) {
    if (d.mode == NetMode::cls) {
      d.cls_train.push_back(gen_synthetic_cls(spec, train_seed, config.data.train_per_task));
      d.cls_eval.push_back(gen_synthetic_cls(spec, eval_seed, config.data.eval_per_task));
    } else {
      d.seg_train.push_back(gen_synthetic_seg(spec, train_seed, config.data.train_per_task));
      d.seg_eval.push_back(gen_synthetic_seg(spec, eval_seed, config.data.eval_per_task));
    }
  }
  return d;
}

namespace {

void copy_image(const Tensor<float>& src, std::size_t index, Tensor<float>& dst, std::size_t slot) {
  const std::size_t per = src.size() / src.dim(0);
  std::copy_n(src.raw() + index * per, per, dst.raw() + slot * per);
}

}  // namespace

Batch sample_batch(const TaskData& data, std::size_t step, std::size_t batch_size, std::uint64_t seed) {
  const std::size_t T = data.task_count();
  if (T == 0 || batch_size == 0) throw ValueError("sample_batch needs tasks and a positive batch size");
  std::mt19937_64 gen(derive_seed(seed, {step}));
  const bool cls = data.mode == NetMode::cls;
  const Tensor<float>& first = cls ? data.cls_train[0].images : data.seg_train[0].images;
  Shape shape = first.shape();
  shape[0] = batch_size;
  Batch b;
  b.images = Tensor<float>(shape);
  std::size_t k_max = 0;
  if (!cls) {
    for (const auto& ds : data.seg_train) k_max = std::max(k_max, ds.masks.dim(1));
    b.masks = Tensor<float>({batch_size, k_max, shape[2], shape[3]});
  }
  for (std::size_t i = 0; i < batch_size; ++i) {
    const std::size_t t = (step * batch_size + i) % T;
    const std::size_t n = cls ? data.cls_train[t].size() : data.seg_train[t].size();
    const std::size_t idx = std::uniform_int_distribution<std::size_t>(0, n - 1)(gen);
    b.tasks.push_back(t);
    if (cls) {
      copy_image(data.cls_train[t].images, idx, b.images, i);
      b.labels.push_back(data.cls_train[t].labels[idx]);
    } else {
      const auto& ds = data.seg_train[t];
      copy_image(ds.images, idx, b.images, i);
      const std::size_t per = ds.masks.size() / ds.masks.dim(0);
      std::copy_n(ds.masks.raw() + idx * per, per, b.masks.raw() + i * (b.masks.size() / batch_size));
    }
  }
  return b;
}

Network<float> build_student(const ExperimentConfig& config, bool with_experts) {
  StudentOptions o;
  o.class_counts = config.class_counts();
  o.width = config.arch.student_width;
  o.seed = derive_seed(config.train.seed, {11});
  if (with_experts) o.ranks.assign(o.class_counts.size(), config.train.base_rank);
  if (config.train.mode == NetMode::cls) {
    if (config.train.beta > 0) o.projection_width = 4 * config.arch.teacher_width;
    return build_student_cls<float>(o);
  }
  return build_student_seg<float>(o);
}

Network<float> build_teacher_for(const ExperimentConfig& config) {
  TeacherOptions o;
  o.mode = config.train.mode;
  o.class_counts = config.class_counts();
  o.width = config.arch.teacher_width;
  o.seed = derive_seed(config.train.seed, {12});
  return build_teacher<float>(o);
}

namespace {

enum class Phase : std::uint64_t { teacher = 1, warmup = 2, decomposition = 3 };

const char* phase_name(Phase p) {
  switch (p) {
    case Phase::teacher: return "teacher training";
    case Phase::warmup: return "warmup";
    case Phase::decomposition: return "decomposition";
  }
  return "";
}

struct StepLosses {
  double total = 0;
  std::vector<double> task_sum;
  std::vector<std::size_t> task_n;
};

/// Channels [offset, offset + count) of sample b of a [B, C, H, W] tensor.
Tensor<float> sample_channels(const Tensor<float>& x, std::size_t b, std::size_t offset, std::size_t count) {
  const std::size_t C = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<float> out({1, count, x.dim(2), x.dim(3)});
  std::copy_n(x.raw() + (b * C + offset) * hw, count * hw, out.raw());
  return out;
}

void add_sample_channels(Tensor<float>& dst, std::size_t b, std::size_t offset, const Tensor<float>& src) {
  const std::size_t C = dst.dim(1), hw = dst.dim(2) * dst.dim(3);
  float* d = dst.raw() + (b * C + offset) * hw;
  for (std::size_t i = 0; i < src.size(); ++i) d[i] += src[i];
}

/// Forward + loss + backward for one batch; returns parameter gradients.
Network<float> batch_gradients(const ExperimentConfig& cfg, const Network<float>& net, const Network<float>* teacher,
                               const Batch& batch, StepLosses& losses) {
  const std::size_t T = cfg.task_count();
  const std::size_t B = batch.tasks.size();
  const auto counts = cfg.class_counts();
  const bool is_teacher = net.role == NetRole::teacher;
  const float beta = static_cast<float>(cfg.train.beta);
  const float tau = static_cast<float>(cfg.train.tau);
  const TaskIndexMatrix tasks(batch.tasks, T);
  losses = {0, std::vector<double>(T, 0.0), std::vector<std::size_t>(T, 0)};

  const ForwardPass<float> pass = forward_decomposed(net, batch.images, tasks);
  const bool transfer = !is_teacher && teacher != nullptr && beta > 0;
  std::optional<ForwardPass<float>> tpass;
  if (transfer) tpass = forward_decomposed(*teacher, batch.images, tasks);

  OutputGrads<float> og;
  if (cfg.train.mode == NetMode::cls) {
    std::vector<ClsTarget> targets;
    std::vector<Tensor<float>> logits;
    for (std::size_t b = 0; b < B; ++b) {
      targets.push_back({batch.tasks[b], batch.labels[b]});
      if (is_teacher) {
        const std::size_t off = net.class_offset(batch.tasks[b]);
        const Tensor<float>& full = pass.logits[b];
        logits.emplace_back(Shape{counts[batch.tasks[b]]},
                            std::vector<float>(full.raw() + off, full.raw() + off + counts[batch.tasks[b]]));
      } else {
        logits.push_back(pass.logits[b]);
      }
    }
    const bool feat = transfer && !net.projection.empty();
    const Tensor<float> empty;
    auto loss = total_cls_loss(feat ? pass.projected : empty, feat ? tpass->output : empty, logits, targets, counts,
                               feat ? beta : 0.0f, tau);
    losses.total = loss.total;
    for (std::size_t b = 0; b < B; ++b) {
      const Tensor<float> p = softmax_with_temperature(logits[b], tau);
      losses.task_sum[batch.tasks[b]] -= std::log(std::max(static_cast<double>(p[batch.labels[b]]), 1e-30));
      ++losses.task_n[batch.tasks[b]];
    }
    if (is_teacher) {
      for (std::size_t b = 0; b < B; ++b) {
        Tensor<float> full(pass.logits[b].shape());
        const std::size_t off = net.class_offset(batch.tasks[b]);
        std::copy_n(loss.grad_logits[b].raw(), loss.grad_logits[b].size(), full.raw() + off);
        og.logits.push_back(std::move(full));
      }
    } else {
      og.logits = std::move(loss.grad_logits);
      if (feat) og.projected = std::move(loss.grad_student_features);
    }
  } else {
    og.output = Tensor<float>(pass.output.shape());
    const float inv_b = 1.0f / static_cast<float>(B);
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t t = batch.tasks[b], K = counts[t];
      const std::size_t off = is_teacher ? net.class_offset(t) : 0;
      const Tensor<float> pred = sample_channels(pass.output, b, off, K);
      const SegTarget<float> target(sample_channels(batch.masks, b, 0, K));
      const Tensor<float> tpred = transfer ? sample_channels(tpass->output, b, teacher->class_offset(t), K)
                                           : Tensor<float>();
      auto loss = total_seg_loss(pred, target, tpred, transfer ? beta : 0.0f);
      losses.total += loss.total * inv_b;
      losses.task_sum[t] += loss.bce + loss.dice;
      ++losses.task_n[t];
      loss.grad *= inv_b;
      add_sample_channels(og.output, b, off, loss.grad);
    }
  }
  return backward_decomposed(net, pass, og);
}

void check_finite(double loss, Phase phase, std::size_t step) {
  if (!std::isfinite(loss)) {
    throw NumericError(fmt::format("non-finite loss ({}) at {} step {}", loss, phase_name(phase), step));
  }
}

bool trainable_all(ParamKind) { return true; }
bool trainable_no_experts(ParamKind k) { return k != ParamKind::expert; }

}  // namespace

Network<float> train_teacher(const ExperimentConfig& config, const TaskData& data) {
  config.validate();
  Network<float> teacher = build_teacher_for(config);
  NetworkOptimizer<float> opt(config.train.optimizer, trainable_all);
  const std::uint64_t seed = derive_seed(config.train.seed, {300, static_cast<std::uint64_t>(Phase::teacher)});
  const std::size_t steps = config.train.teacher_steps;
  for (std::size_t s = 0; s < steps; ++s) {
    const Batch batch = sample_batch(data, s, config.train.batch_size, seed);
    StepLosses losses;
    const Network<float> grads = batch_gradients(config, teacher, nullptr, batch, losses);
    check_finite(losses.total, Phase::teacher, s);
    opt.step(teacher, grads, scheduled_lr(config.train.teacher_learning_rate, config.train.schedule, s, steps));
  }
  return teacher;
}

WarmupLog run_warmup(const ExperimentConfig& config, Network<float>& net, const TaskData& data,
                     const Network<float>* teacher) {
  config.validate();
  WarmupLog log;
  NetworkOptimizer<float> opt(config.train.optimizer, trainable_no_experts);
  const std::uint64_t seed = derive_seed(config.train.seed, {300, static_cast<std::uint64_t>(Phase::warmup)});
  for (std::size_t s = 0; s < config.train.warmup_steps; ++s) {
    const Batch batch = sample_batch(data, s, config.train.batch_size, seed);
    StepLosses losses;
    const Network<float> grads = batch_gradients(config, net, teacher, batch, losses);
    check_finite(losses.total, Phase::warmup, s);
    for (std::size_t t = 0; t < losses.task_n.size(); ++t)
      if (losses.task_n[t] > 0) log.push_back({s, t, losses.task_sum[t] / static_cast<double>(losses.task_n[t])});
    opt.step(net, grads, config.train.learning_rate);
  }
  return log;
}

RankPlan choose_ranks(const ExperimentConfig& config, const WarmupLog& log) {
  const std::size_t T = config.task_count();
  if (config.train.rank_mode == RankMode::balanced || log.empty()) return balanced_plan(T, config.train.base_rank);
  return plan_ranks(measure_loss_reduction(log, T, default_reduction_window(log, T)), config.train.base_rank);
}

void run_decomposition(const ExperimentConfig& config, Network<float>& net, const Network<float>* teacher,
                       const TaskData& data, const RankPlan& plan) {
  config.validate();
  if (net.has_experts()) {
    if (plan.ranks.size() != net.task_count()) {
      throw ValueError(fmt::format("rank plan has {} ranks for {} tasks", plan.ranks.size(), net.task_count()));
    }
    attach_experts(net, plan.ranks, derive_seed(derive_seed(config.train.seed, {11}), {3}));
  }
  NetworkOptimizer<float> opt(config.train.optimizer, trainable_all);
  const std::uint64_t seed = derive_seed(config.train.seed, {300, static_cast<std::uint64_t>(Phase::decomposition)});
  const std::size_t steps = config.train.train_steps;
  for (std::size_t s = 0; s < steps; ++s) {
    const Batch batch = sample_batch(data, s, config.train.batch_size, seed);
    StepLosses losses;
    const Network<float> grads = batch_gradients(config, net, teacher, batch, losses);
    check_finite(losses.total, Phase::decomposition, s);
    opt.step(net, grads, scheduled_lr(config.train.learning_rate, config.train.schedule, s, steps));
  }
}

namespace {

constexpr std::size_t kEvalChunk = 64;

template <typename Fn>
void for_chunks(std::size_t n, Fn&& fn) {
  for (std::size_t begin = 0; begin < n; begin += kEvalChunk) fn(begin, std::min(n, begin + kEvalChunk));
}

}  // namespace

MetricsReport evaluate(const Network<float>& net, const TaskData& data) {
  MetricsReport r;
  const std::size_t T = data.task_count();
  const bool extracted = net.role == NetRole::extracted;
  std::vector<std::size_t> tasks_to_eval;
  if (extracted)
    tasks_to_eval = {net.extracted_task};
  else
    for (std::size_t t = 0; t < T; ++t) tasks_to_eval.push_back(t);
  if (net.role == NetRole::teacher) throw ValueError("evaluate expects a student or extracted network");

  for (std::size_t t : tasks_to_eval) {
    if (t >= T) throw ValueError(fmt::format("network task {} not present in the data", t));
    const std::size_t route = extracted ? 0 : t;
    const std::size_t route_tasks = extracted ? 1 : T;
    if (data.mode == NetMode::cls) {
      r.metric = "accuracy";
      const auto& ds = data.cls_eval[t];
      std::vector<Tensor<float>> logits;
      for_chunks(ds.size(), [&](std::size_t a, std::size_t b) {
        const TaskIndexMatrix m(std::vector<std::size_t>(b - a, route), route_tasks);
        auto pass = forward_decomposed(net, slice_batch(ds.images, a, b), m);
        for (auto& l : pass.logits) logits.push_back(std::move(l));
      });
      r.per_task.push_back(evaluate_accuracy(logits, ds.labels));
    } else {
      r.metric = "dsc";
      const auto& ds = data.seg_eval[t];
      const std::size_t K = ds.masks.dim(1);
      std::vector<double> dsc(K, 0.0);
      for_chunks(ds.size(), [&](std::size_t a, std::size_t b) {
        const TaskIndexMatrix m(std::vector<std::size_t>(b - a, route), route_tasks);
        const auto pass = forward_decomposed(net, slice_batch(ds.images, a, b), m);
        Tensor<float> pred({b - a, K, ds.masks.dim(2), ds.masks.dim(3)});
        for (std::size_t i = 0; i < b - a; ++i) add_sample_channels(pred, i, 0, sample_channels(pass.output, i, 0, K));
        const auto part = evaluate_dsc(pred, slice_batch(ds.masks, a, b));
        for (std::size_t k = 0; k < K; ++k) dsc[k] += part[k] * static_cast<double>(b - a);
      });
      for (double& v : dsc) v /= static_cast<double>(ds.size());
      r.per_task.push_back(macro_average(dsc));
    }
  }
  r.macro_avg = macro_average(r.per_task);
  r.params_train = net.param_count();
  if (net.role == NetRole::student) {
    for (std::size_t t = 0; t < net.task_count(); ++t) r.params_fused.push_back(extract_expert(net, t).param_count());
    for (std::size_t t = 0; t < net.task_count(); ++t) r.ranks.push_back(net.expert_rank(t));
  } else {
    r.params_fused.push_back(net.param_count());
  }
  return r;
}

Tensor<float> task_features(const Network<float>& net, const Tensor<float>& probe, std::size_t task) {
  if (task >= net.task_count()) throw ValueError(fmt::format("task {} out of range", task));
  const std::size_t n = probe.dim(0);
  const TaskIndexMatrix m(std::vector<std::size_t>(n, task), net.task_count());
  const auto pass = forward_decomposed(net, probe, m);
  if (net.mode == NetMode::cls) return pass.output;
  // input of the final 1x1 conv
  const Tensor<float>& f = pass.outputs[net.layers.size() - 3];
  return f.reshaped({n, f.size() / n});
}

Tensor<float> cka_probe(const TaskData& data, std::size_t count) {
  const std::size_t T = data.task_count();
  const bool cls = data.mode == NetMode::cls;
  const Tensor<float>& first = cls ? data.cls_eval[0].images : data.seg_eval[0].images;
  Shape shape = first.shape();
  shape[0] = count;
  Tensor<float> probe(shape);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t t = i % T;
    const Tensor<float>& src = cls ? data.cls_eval[t].images : data.seg_eval[t].images;
    copy_image(src, (i / T) % src.dim(0), probe, i);
  }
  return probe;
}

std::vector<std::vector<double>> cka_matrix(const Network<float>& net, const Tensor<float>& probe) {
  const std::size_t T = net.task_count();
  std::vector<Tensor<float>> feats;
  for (std::size_t t = 0; t < T; ++t) feats.push_back(task_features(net, probe, t));
  std::vector<std::vector<double>> m(T, std::vector<double>(T, 1.0));
  for (std::size_t i = 0; i < T; ++i)
    for (std::size_t j = i + 1; j < T; ++j) m[i][j] = m[j][i] = cka_similarity(feats[i], feats[j]);
  return m;
}

double mean_off_diagonal(const std::vector<std::vector<double>>& m) {
  double sum = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < m.size(); ++j)
      if (i != j) {
        sum += m[i][j];
        ++n;
      }
  return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

ArmResult run_arm(const ExperimentConfig& config, const TaskData& data, const Network<float>* teacher,
                  bool with_experts) {
  const auto start = std::chrono::steady_clock::now();
  reset_kernel_counters();
  ArmResult r{build_student(config, with_experts), {}, {}, {}};
  r.log = run_warmup(config, r.net, data, teacher);
  r.plan = with_experts ? choose_ranks(config, r.log) : RankPlan{config.train.base_rank, {}, {}, false};
  run_decomposition(config, r.net, teacher, data, r.plan);
  const KernelCounters counters = kernel_counters();
  r.report = evaluate(r.net, data);
  r.report.forward_launches = counters.conv_forward_launches;
  r.report.backward_launches = counters.conv_backward_launches;
  r.report.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

}  // namespace lorkd
