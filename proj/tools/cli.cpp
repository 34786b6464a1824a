// SPDX-License-Identifier: Apache-2.0

#include "cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iostream>
#include <optional>
#include <random>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "lorkd/checkpoint.hpp"
#include "lorkd/config.hpp"
#include "lorkd/eks_conv.hpp"
#include "lorkd/pipeline.hpp"
#include "lorkd/rng.hpp"

namespace lorkd {

namespace {

struct Args {
  std::string config, out, log, teacher, warmup, ranks, report, model;
  std::size_t base_rank = 8;
  std::string rank_mode = "imbalanced";
  std::size_t task = 0;
  bool baseline = false;
  // bench
  std::size_t tasks = 8, batch = 16, rank = 8, dim = 64, seq_len = 0, channels = 32, spatial = 16, repeats = 5;
  std::uint64_t seed = 0;
};

std::string pick(const std::string& flag, const RunFile& rf, const char* key, const char* what) {
  if (!flag.empty()) return flag;
  if (auto it = rf.paths.find(key); it != rf.paths.end()) return it->second;
  throw ConfigError(fmt::format("no {} path given (flag or config paths.{})", what, key));
}

std::string pick_optional(const std::string& flag, const RunFile& rf, const char* key) {
  if (!flag.empty()) return flag;
  if (auto it = rf.paths.find(key); it != rf.paths.end()) return it->second;
  return {};
}

Json run_header(const ExperimentConfig& config) {
  return Json{{"provenance", provenance(config)}, {"config", config_to_json(config)}};
}

int cmd_train_teacher(const Args& a) {
  const RunFile rf = load_config(a.config);
  const TaskData data = make_task_data(rf.config);
  const Network<float> teacher = train_teacher(rf.config, data);
  save_checkpoint(teacher, pick(a.out, rf, "teacher", "output"), run_header(rf.config));
  std::cout << fmt::format("teacher: {} parameters, {} steps\n", teacher.param_count(), rf.config.train.teacher_steps);
  return 0;
}

std::optional<Network<float>> load_teacher(const std::string& path, const ExperimentConfig& config) {
  if (path.empty()) {
    if (config.train.beta > 0) throw ConfigError("beta > 0 needs a teacher checkpoint (--teacher)");
    return std::nullopt;
  }
  Network<float> t = load_checkpoint(path);
  if (t.role != NetRole::teacher) throw ConfigError(fmt::format("'{}' is not a teacher checkpoint", path));
  if (t.class_counts != config.class_counts()) throw ConfigError("teacher tasks do not match the config");
  return t;
}

int cmd_warmup(const Args& a) {
  const RunFile rf = load_config(a.config);
  const TaskData data = make_task_data(rf.config);
  const auto teacher = load_teacher(pick_optional(a.teacher, rf, "teacher"), rf.config);
  Network<float> net = build_student(rf.config, !a.baseline);
  const WarmupLog log = run_warmup(rf.config, net, data, teacher ? &*teacher : nullptr);
  save_checkpoint(net, pick(a.out, rf, "warmup", "output"), run_header(rf.config));
  Json j = to_json(log);
  j.update(run_header(rf.config));
  write_json_file(pick(a.log, rf, "log", "log"), j);
  std::cout << fmt::format("warmup: {} steps, {} loss records\n", rf.config.train.warmup_steps, log.size());
  return 0;
}

int cmd_plan_ranks(const Args& a) {
  const WarmupLog log = warmup_log_from_json(read_json_file(a.log));
  std::size_t T = 0;
  for (const auto& r : log) T = std::max(T, r.task + 1);
  RankPlan plan;
  if (T == 0 || parse_rank_mode(a.rank_mode) == RankMode::balanced) {
    if (T == 0) throw ConfigError("warmup log is empty; balanced ranks need a task count (use the config path)");
    plan = balanced_plan(T, a.base_rank);
  } else {
    plan = plan_ranks(measure_loss_reduction(log, T, default_reduction_window(log, T)), a.base_rank);
  }
  const Json j = to_json(plan);
  if (!a.out.empty()) write_json_file(a.out, j);
  std::cout << j.dump() << "\n";
  return 0;
}

int cmd_decompose(const Args& a) {
  const RunFile rf = load_config(a.config);
  const ExperimentConfig& cfg = rf.config;
  const TaskData data = make_task_data(cfg);
  const auto teacher = load_teacher(pick_optional(a.teacher, rf, "teacher"), cfg);
  const Network<float>* tp = teacher ? &*teacher : nullptr;
  const std::string warmup_path = pick_optional(a.warmup, rf, "warmup");
  const std::string ranks_path = pick_optional(a.ranks, rf, "ranks");

  const auto start = std::chrono::steady_clock::now();
  reset_kernel_counters();
  Network<float> net;
  WarmupLog log;
  if (!warmup_path.empty()) {
    net = load_checkpoint(warmup_path);
    if (net.role != NetRole::student || net.class_counts != cfg.class_counts()) {
      throw ConfigError(fmt::format("'{}' is not a student checkpoint for this config", warmup_path));
    }
  } else {
    net = build_student(cfg, !a.baseline);
    log = run_warmup(cfg, net, data, tp);
  }
  RankPlan plan;
  if (!net.has_experts())
    plan = RankPlan{cfg.train.base_rank, {}, {}, false};
  else if (!ranks_path.empty())
    plan = rank_plan_from_json(read_json_file(ranks_path));
  else
    plan = choose_ranks(cfg, log);
  run_decomposition(cfg, net, tp, data, plan);
  const KernelCounters counters = kernel_counters();
  MetricsReport report = evaluate(net, data);
  report.forward_launches = counters.conv_forward_launches;
  report.backward_launches = counters.conv_backward_launches;
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  save_checkpoint(net, pick(a.out, rf, "model", "output"), run_header(cfg));
  Json j = to_json(report);
  j["rank_plan"] = to_json(plan);
  j.update(run_header(cfg));
  write_json_file(pick(a.report, rf, "report", "report"), j);
  std::cout << fmt::format("{} macro {:.4f}, {} train params, {:.1f}s\n", report.metric, report.macro_avg,
                           report.params_train, seconds);
  return 0;
}

int cmd_fuse(const Args& a) {
  const Network<float> net = load_checkpoint(a.model);
  const Network<float> fused = extract_expert(net, a.task);
  Json extra{{"source", a.model}, {"task", a.task}};
  save_checkpoint(fused, a.out, extra);
  std::cout << fmt::format("task {}: {} parameters fused (backbone {}, head {}), from {} at training time\n", a.task,
                           fused.param_count(), fused.backbone_param_count(), fused.head_param_count(),
                           net.param_count());
  return 0;
}

int cmd_eval(const Args& a) {
  const RunFile rf = load_config(a.config);
  const Network<float> net = load_checkpoint(a.model);
  if (net.role == NetRole::teacher) throw ConfigError("eval expects a student or fused checkpoint");
  const TaskData data = make_task_data(rf.config);
  const MetricsReport report = evaluate(net, data);
  Json j = to_json(report);
  j.update(run_header(rf.config));
  write_json_file(pick(a.report, rf, "report", "report"), j);
  std::cout << fmt::format("{} macro {:.4f}\n", report.metric, report.macro_avg);
  return 0;
}

int cmd_cka(const Args& a) {
  const RunFile rf = load_config(a.config);
  const Network<float> net = load_checkpoint(a.model);
  if (net.role != NetRole::student) throw ConfigError("cka expects a decomposed student checkpoint");
  const TaskData data = make_task_data(rf.config);
  const auto m = cka_matrix(net, cka_probe(data, rf.config.data.cka_probe));
  Json j{{"cka", m}, {"mean_off_diagonal", mean_off_diagonal(m)}};
  j.update(run_header(rf.config));
  write_json_file(a.out, j);
  std::cout << fmt::format("mean off-diagonal CKA {:.4f}\n", mean_off_diagonal(m));
  return 0;
}

template <typename Fn>
double median_seconds(std::size_t repeats, Fn&& fn) {
  std::vector<double> t;
  for (std::size_t i = 0; i < repeats; ++i) {
    const auto s = std::chrono::steady_clock::now();
    fn();
    t.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - s).count());
  }
  std::sort(t.begin(), t.end());
  return t[t.size() / 2];
}

Json cost_json(const CostEstimate& c) {
  return Json{{"eks_flops", c.eks_flops}, {"flora_flops", c.flora_flops}, {"eks_cheaper", c.eks_cheaper}};
}

int cmd_bench(const Args& a) {
  if (a.tasks == 0 || a.batch == 0 || a.rank < kMinRank || a.channels == 0 || a.spatial == 0 || a.repeats == 0) {
    throw ConfigError("bench needs positive tasks, batch, channels, spatial, repeats and rank >= 2");
  }
  const std::size_t seq_len = a.seq_len > 0 ? a.seq_len : a.spatial * a.spatial;
  const CostEstimate analytic = cost_estimate(a.tasks, a.batch, seq_len, a.dim, a.rank);

  // wall-clock on a 3x3 conv layer with C channels
  ConvGeometry g{a.channels, a.channels, 3, 1, 1, 1};
  std::mt19937_64 gen(derive_seed(a.seed, {1}));
  std::normal_distribution<float> normal(0.0f, 1.0f);
  EksConvLayer<float> layer{g, Tensor<float>(g.weight_shape()), Tensor<float>({g.out_channels}), {}};
  for (float& v : layer.w0.data()) v = normal(gen) * 0.1f;
  for (std::size_t t = 0; t < a.tasks; ++t) {
    auto pair = init_lowrank<float>(g, a.rank, derive_seed(a.seed, {2, t}));
    for (float& v : pair.b_factor.data()) v = normal(gen) * 0.02f;
    layer.experts.push_back(std::move(pair));
  }
  Tensor<float> h({a.batch, a.channels, a.spatial, a.spatial});
  for (float& v : h.data()) v = normal(gen);
  std::vector<std::size_t> assign(a.batch);
  for (std::size_t b = 0; b < a.batch; ++b) assign[b] = b % a.tasks;
  const TaskIndexMatrix m(assign, a.tasks);

  const double eks_s = median_seconds(a.repeats, [&] { (void)eks_forward(layer, h, m); });
  const double naive_s = median_seconds(a.repeats, [&] { (void)naive_forward(layer, h, m); });
  const std::size_t d2 = g.out_channels * g.in_channels * g.kernel * g.kernel;
  const auto d_approx = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(d2))));

  Json j{{"analytic",
          {{"tasks", a.tasks}, {"batch", a.batch}, {"seq_len", seq_len}, {"dim", a.dim}, {"rank", a.rank}}},
         {"cost", cost_json(analytic)},
         {"wallclock",
          {{"channels", a.channels},
           {"spatial", a.spatial},
           {"kernel", 3},
           {"repeats", a.repeats},
           {"eks_forward_s", eks_s},
           {"naive_forward_s", naive_s},
           {"speedup", naive_s / eks_s},
           {"conv_as_matmul",
            {{"seq_len", a.spatial * a.spatial},
             {"dim", d_approx},
             {"approximation", "l = H'*W', d^2 ~ C_out*C_in*k^2"},
             {"cost", cost_json(cost_estimate(a.tasks, a.batch, a.spatial * a.spatial, d_approx, a.rank))}}}}},
         {"threads", configure_threads_from_env()}};
  if (!a.report.empty()) write_json_file(a.report, j);
  std::cout << j.dump(2) << "\n";
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  configure_threads_from_env();
  CLI::App app{"Low-rank knowledge decomposition engine"};
  app.require_subcommand(1);
  Args a;

  auto* teacher = app.add_subcommand("train-teacher", "Train the teacher on every task");
  teacher->add_option("--config", a.config)->required();
  teacher->add_option("--out", a.out);

  auto* warmup = app.add_subcommand("warmup", "Train the backbone with experts frozen, log per-task losses");
  warmup->add_option("--config", a.config)->required();
  warmup->add_option("--teacher", a.teacher);
  warmup->add_option("--out", a.out);
  warmup->add_option("--log", a.log);
  warmup->add_flag("--baseline", a.baseline, "Expert-free shared multi-task student");

  auto* plan = app.add_subcommand("plan-ranks", "Per-task expert ranks from a warmup log");
  plan->add_option("--log", a.log)->required();
  plan->add_option("--base-rank", a.base_rank);
  plan->add_option("--rank-mode", a.rank_mode)->check(CLI::IsMember({"balanced", "imbalanced"}));
  plan->add_option("--out", a.out);

  auto* decompose = app.add_subcommand("decompose", "Joint training of backbone, experts and heads");
  decompose->add_option("--config", a.config)->required();
  decompose->add_option("--teacher", a.teacher);
  decompose->add_option("--warmup", a.warmup);
  decompose->add_option("--ranks", a.ranks);
  decompose->add_option("--out", a.out);
  decompose->add_option("--report", a.report);
  decompose->add_flag("--baseline", a.baseline, "Expert-free shared multi-task student");

  auto* fuse = app.add_subcommand("fuse", "Fuse one task's experts into a standalone model");
  fuse->add_option("--model", a.model)->required();
  fuse->add_option("--task", a.task)->required();
  fuse->add_option("--out", a.out)->required();

  auto* eval = app.add_subcommand("eval", "Evaluate a student or fused model");
  eval->add_option("--model", a.model)->required();
  eval->add_option("--config", a.config)->required();
  eval->add_option("--report", a.report);

  auto* bench = app.add_subcommand("bench", "Analytic FLOPs and eks vs naive wall-clock");
  bench->add_option("--tasks", a.tasks);
  bench->add_option("--batch", a.batch);
  bench->add_option("--rank", a.rank);
  bench->add_option("--dim", a.dim);
  bench->add_option("--seq-len", a.seq_len, "Analytic sequence length l (default spatial^2)");
  bench->add_option("--channels", a.channels);
  bench->add_option("--spatial", a.spatial);
  bench->add_option("--repeats", a.repeats);
  bench->add_option("--seed", a.seed);
  bench->add_option("--report", a.report);

  auto* cka = app.add_subcommand("cka", "Cross-task CKA of task-routed penultimate features");
  cka->add_option("--model", a.model)->required();
  cka->add_option("--config", a.config)->required();
  cka->add_option("--out", a.out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (teacher->parsed()) return cmd_train_teacher(a);
    if (warmup->parsed()) return cmd_warmup(a);
    if (plan->parsed()) return cmd_plan_ranks(a);
    if (decompose->parsed()) return cmd_decompose(a);
    if (fuse->parsed()) return cmd_fuse(a);
    if (eval->parsed()) return cmd_eval(a);
    if (bench->parsed()) return cmd_bench(a);
    if (cka->parsed()) return cmd_cka(a);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace lorkd
