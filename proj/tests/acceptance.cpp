// SPDX-License-Identifier: Apache-2.0

// Acceptance runner: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset.

#include <chrono>
#include <cstring>
#include <filesystem>
#include <map>
#include <iostream>
#include <set>
#include <sstream>
#include <unistd.h>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "cli.hpp"
#include "lorkd/checkpoint.hpp"
#include "lorkd/config.hpp"
#include "lorkd/network.hpp"
#include "lorkd/objectives.hpp"
#include "lorkd/ops.hpp"
#include "lorkd/pipeline.hpp"
#include "support.hpp"

using namespace lorkd;
using test::pick;
using test::random_tensor;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

template <typename T>
void randomize(Network<T>& net, std::mt19937_64& gen, double scale) {
  net.for_each_param([&](const std::string&, Tensor<T>& t, ParamKind) { t = random_tensor<T>(t.shape(), gen, -scale, scale); });
}

TaskIndexMatrix random_tasks(std::size_t B, std::size_t T_, std::mt19937_64& gen) {
  std::vector<std::size_t> v(B);
  for (auto& t : v) t = pick(gen, 0, T_ - 1);
  return TaskIndexMatrix(v, T_);
}

struct QuietStdout {
  std::ostringstream sink;
  std::streambuf* old = std::cout.rdbuf(sink.rdbuf());
  ~QuietStdout() { std::cout.rdbuf(old); }
};

int cli(std::vector<std::string> args) {
  QuietStdout quiet;
  args.insert(args.begin(), "lorkd");
  std::vector<const char*> argv;
  for (const auto& s : args) argv.push_back(s.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

struct TempDir {
  fs::path dir = fs::temp_directory_path() / fmt::format("lorkd_acceptance_{}", ::getpid());
  TempDir() { fs::create_directories(dir); }
  ~TempDir() { fs::remove_all(dir); }
  std::string operator/(const std::string& name) const { return (dir / name).string(); }
};

// 1 ----------------------------------------------------------------------

constexpr int kEksConfigs = 120;

Outcome eks_equivalence() {
  const auto start = std::chrono::steady_clock::now();
  std::mt19937_64 gen(1001);
  double worst32 = 0, worst64 = 0;
  for (int i = 0; i < kEksConfigs; ++i) {
    auto c64 = test::random_eks_case<double>(gen);
    worst64 = std::max(worst64, max_abs_diff(eks_forward(c64.layer, c64.input, c64.tasks),
                                             naive_forward(c64.layer, c64.input, c64.tasks)));
    auto c32 = test::random_eks_case<float>(gen);
    worst32 = std::max(worst32, static_cast<double>(max_abs_diff(eks_forward(c32.layer, c32.input, c32.tasks),
                                                                 naive_forward(c32.layer, c32.input, c32.tasks))));
  }
  const double s = seconds_since(start);
  return {worst32 <= 1e-5 && worst64 <= 1e-10 && s < 60,
          fmt::format("{} configs per dtype, max |eks - naive| f32 {:.2e} (<= 1e-5), f64 {:.2e} (<= 1e-10), {:.1f}s",
                      kEksConfigs, worst32, worst64, s)};
}

// 2 ----------------------------------------------------------------------

Outcome gradient_routing() {
  std::mt19937_64 gen(1002);
  std::size_t absent = 0, nonzero_absent = 0;
  double worst = 0;
  for (int i = 0; i < kEksConfigs; ++i) {
    auto c = test::random_eks_case<float>(gen);
    const auto probe = random_tensor<float>(eks_forward(c.layer, c.input, c.tasks).shape(), gen);
    const auto grads = eks_backward(c.layer, c.input, c.tasks, probe);
    Tensor<float> sum(c.layer.w0.shape());
    for (std::size_t t = 0; t < c.tasks.task_count(); ++t) {
      const auto rows = c.tasks.samples_of(t);
      if (rows.empty()) {
        ++absent;
        if (max_abs(grads.experts[t].b_factor) != 0.0f || max_abs(grads.experts[t].a_factor) != 0.0f) ++nonzero_absent;
        continue;
      }
      const auto fused = fuse_weights(c.layer.w0, c.layer.experts[t]);
      sum += conv2d_backward(gather_batch(probe, rows), gather_batch(c.input, rows), fused, c.layer.geometry).weight;
    }
    worst = std::max(worst, static_cast<double>(max_abs_diff(grads.w0, sum)));
  }
  return {nonzero_absent == 0 && absent > 0 && worst <= 1e-5,
          fmt::format("{} absent experts, {} with non-zero gradient; max |grad_w0 - sum of per-task| {:.2e} (<= 1e-5)",
                      absent, nonzero_absent, worst)};
}

// 3 ----------------------------------------------------------------------

struct FdTally {
  double worst = 0;
  std::size_t seeds = 0;
  void add(const Tensor<double>& a, const Tensor<double>& n) { worst = std::max(worst, test::rel_error(a, n)); }
};

double dot64(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

Outcome finite_differences() {
  const auto start = std::chrono::steady_clock::now();
  constexpr int kSeeds = 20;
  std::map<std::string, FdTally> tally;

  for (int seed = 0; seed < kSeeds; ++seed) {
    std::mt19937_64 gen(3000 + seed);

    {  // conv2d, including groups and stride
      const std::size_t groups = pick(gen, 1, 2);
      ConvGeometry g{groups * pick(gen, 1, 3), groups * pick(gen, 1, 3), pick(gen, 0, 1) ? std::size_t{3} : std::size_t{1},
                     pick(gen, 1, 2), pick(gen, 0, 1), groups};
      auto x = random_tensor<double>({2, g.in_channels, 5, 5}, gen);
      auto w = random_tensor<double>(g.weight_shape(), gen);
      const auto probe = random_tensor<double>(conv2d(x, w, g).shape(), gen);
      const auto gr = conv2d_backward(probe, x, w, g);
      auto f = [&] { return dot64(conv2d(x, w, g), probe); };
      auto [ax, nx] = test::sampled_fd(f, x, gr.input, 0, gen);
      auto [aw, nw] = test::sampled_fd(f, w, gr.weight, 0, gen);
      tally["conv2d"].add(ax, nx);
      tally["conv2d"].add(aw, nw);
      ++tally["conv2d"].seeds;
    }

    {  // eks_backward: input, w0, bias, both factors of every expert
      auto c = test::random_eks_case<double>(gen, 4, 6, 4, 6);
      const auto probe = random_tensor<double>(eks_forward(c.layer, c.input, c.tasks).shape(), gen);
      const auto grads = eks_backward(c.layer, c.input, c.tasks, probe);
      auto f = [&] { return dot64(eks_forward(c.layer, c.input, c.tasks), probe); };
      auto& t = tally["eks_backward"];
      auto check = [&](Tensor<double>& x, const Tensor<double>& g) {
        auto [a, n] = test::sampled_fd(f, x, g, 40, gen);
        t.add(a, n);
      };
      check(c.input, grads.input);
      check(c.layer.w0, grads.w0);
      if (c.layer.has_bias()) check(c.layer.bias, grads.bias);
      for (std::size_t e = 0; e < c.layer.task_count(); ++e) {
        check(c.layer.experts[e].b_factor, grads.experts[e].b_factor);
        check(c.layer.experts[e].a_factor, grads.experts[e].a_factor);
      }
      ++t.seeds;
    }

    {  // segmentation losses
      const Shape s{pick(gen, 1, 3), pick(gen, 2, 5), pick(gen, 2, 5)};
      auto pred = random_tensor<double>(s, gen, 0.05, 0.95);
      const auto teacher = random_tensor<double>(s, gen, 0.05, 0.95);
      Tensor<double> mask(s);
      for (double& v : mask.data()) v = static_cast<double>(pick(gen, 0, 1));
      const SegTarget<double> target(mask);
      auto fd = [&](const char* name, auto value, const Tensor<double>& grad) {
        auto [a, n] = test::sampled_fd(value, pred, grad, 0, gen);
        tally[name].add(a, n);
        ++tally[name].seeds;
      };
      fd("dice", [&] { return dice_loss(pred, target).value; }, dice_loss(pred, target).grad);
      fd("bce", [&] { return bce_loss(pred, target).value; }, bce_loss(pred, target).grad);
      fd("mask_kl", [&] { return mask_kl(teacher, pred).value; }, mask_kl(teacher, pred).grad);
      fd("seg_total", [&] { return total_seg_loss(pred, target, teacher, 0.1).total; },
         total_seg_loss(pred, target, teacher, 0.1).grad);
    }

    {  // KL over probability rows, w.r.t. the student probabilities
      const std::size_t rows = pick(gen, 1, 4), width = pick(gen, 2, 6);
      auto probs = [&] {
        auto t = random_tensor<double>({rows, width}, gen, 0.1, 1.0);
        for (std::size_t r = 0; r < rows; ++r) {
          double z = 0;
          for (std::size_t c = 0; c < width; ++c) z += t[r * width + c];
          for (std::size_t c = 0; c < width; ++c) t[r * width + c] /= z;
        }
        return t;
      };
      const auto pt = probs();
      auto ps = probs();
      auto raw = [&] {
        double v = 0;
        for (std::size_t i = 0; i < ps.size(); ++i) v += pt[i] * std::log(pt[i] / ps[i]);
        return v;
      };
      auto [a, n] = test::sampled_fd(raw, ps, kl_divergence(pt, ps).grad, 0, gen);
      tally["kl"].add(a, n);
      ++tally["kl"].seeds;
    }

    {  // classification: CE through the logits, transfer KL through the student features
      const std::size_t B = pick(gen, 1, 4), T_ = pick(gen, 1, 3), F = pick(gen, 2, 6);
      std::vector<std::size_t> counts(T_);
      for (auto& c : counts) c = pick(gen, 2, 5);
      std::vector<ClsTarget> targets(B);
      std::vector<Tensor<double>> logits(B);
      for (std::size_t i = 0; i < B; ++i) {
        targets[i].task = pick(gen, 0, T_ - 1);
        targets[i].label = pick(gen, 0, counts[targets[i].task] - 1);
        logits[i] = random_tensor<double>({counts[targets[i].task]}, gen, -2, 2);
      }
      auto fs_ = random_tensor<double>({B, F}, gen, -2, 2);
      const auto ft = random_tensor<double>({B, F}, gen, -2, 2);
      const double tau = 0.5 * static_cast<double>(pick(gen, 1, 4));
      auto f = [&] { return total_cls_loss(fs_, ft, logits, targets, counts, 1.0, tau).total; };
      const auto r = total_cls_loss(fs_, ft, logits, targets, counts, 1.0, tau);
      auto [a, n] = test::sampled_fd(f, fs_, r.grad_student_features, 0, gen);
      tally["cls_total"].add(a, n);
      for (std::size_t i = 0; i < B; ++i) {
        auto [al, nl] = test::sampled_fd(f, logits[i], r.grad_logits[i], 0, gen);
        tally["cls_total"].add(al, nl);
      }
      ++tally["cls_total"].seeds;
    }

    {  // end-to-end 8x8 segmentation student with experts
      StudentOptions o{{2, 1}, 4, static_cast<std::uint64_t>(seed), {2, 2}, 0};
      auto net = build_student_seg<double>(o);
      randomize(net, gen, 0.3);
      const auto x = random_tensor<double>({3, 1, 8, 8}, gen);
      const auto m = random_tasks(3, 2, gen);
      const auto pass = forward_decomposed(net, x, m);
      Tensor<double> mask(pass.output.shape());
      for (double& v : mask.data()) v = static_cast<double>(pick(gen, 0, 1));
      const auto teacher = random_tensor<double>(pass.output.shape(), gen, 0.1, 0.9);
      const SegTarget<double> target(mask);
      auto f = [&] { return total_seg_loss(forward_decomposed(net, x, m).output, target, teacher, 0.1).total; };
      const auto l = total_seg_loss(pass.output, target, teacher, 0.1);
      auto grads = backward_decomposed(net, pass, {l.grad, {}, {}});
      std::vector<Tensor<double>*> analytic;
      grads.for_each_param([&](const std::string&, Tensor<double>& t, ParamKind) { analytic.push_back(&t); });
      std::size_t i = 0;
      net.for_each_param([&](const std::string&, Tensor<double>& p, ParamKind) {
        auto [a, n] = test::sampled_fd(f, p, *analytic[i++], 8, gen, 1e-6);
        tally["seg_net"].add(a, n);
      });
      ++tally["seg_net"].seeds;
    }
  }

  const double s = seconds_since(start);
  bool ok = s < 300;
  std::string detail;
  for (const auto& [name, t] : tally) {
    ok = ok && t.worst < 1e-4 && t.seeds >= 20;
    detail += fmt::format("{} {:.1e}, ", name, t.worst);
  }
  return {ok, fmt::format("max rel error over {} seeds: {}all < 1e-4, {:.1f}s", kSeeds, detail, s)};
}

// 4 ----------------------------------------------------------------------

// Parameter count of a dense conv stack plus the task's own head, recounted from the geometries.
std::size_t fused_closed_form(const Network<float>& net, std::size_t task) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < net.convs.size(); ++i) {
    const auto& g = net.convs[i].geometry;
    std::size_t out = g.out_channels;
    if (net.mode == NetMode::seg && i + 1 == net.convs.size()) out = net.class_counts[task];
    n += out * (g.in_channels / g.groups) * g.kernel * g.kernel + (net.convs[i].has_bias() ? out : 0);
  }
  if (net.mode == NetMode::cls) n += net.feature_width() * net.class_counts[task] + net.class_counts[task];
  return n;
}

Outcome fusion() {
  std::mt19937_64 gen(1004);
  double worst = 0;
  std::size_t count_mismatch = 0, checked = 0;
  for (int i = 0; i < 10; ++i) {
    const bool cls = i % 2 == 0;
    const std::size_t T_ = pick(gen, 2, 4);
    std::vector<std::size_t> classes(T_), ranks(T_);
    for (auto& c : classes) c = pick(gen, cls ? 2 : 1, cls ? 5 : 3);
    for (auto& r : ranks) r = 2;
    StudentOptions o{classes, 6, static_cast<std::uint64_t>(i), ranks, cls ? std::size_t{16} : std::size_t{0}};
    auto net = cls ? build_student_cls<float>(o) : build_student_seg<float>(o);
    randomize(net, gen, 0.2);
    const std::size_t B = 4;
    const auto x = random_tensor<float>({B, 1, 8, 8}, gen);
    for (std::size_t t = 0; t < T_; ++t) {
      const auto full = forward_decomposed(net, x, TaskIndexMatrix(std::vector<std::size_t>(B, t), T_));
      const auto ex = extract_expert(net, t);
      const auto single = forward_decomposed(ex, x, TaskIndexMatrix(std::vector<std::size_t>(B, 0), 1));
      if (cls) {
        for (std::size_t b = 0; b < B; ++b)
          worst = std::max(worst, static_cast<double>(max_abs_diff(single.logits[b], full.logits[b])));
      } else {
        // the student's mask channels are shared: task t reads the first K_t
        const std::size_t C = full.output.dim(1), K = classes[t], HW = 64;
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t j = 0; j < K * HW; ++j)
            worst = std::max(worst, static_cast<double>(std::abs(single.output[(b * K) * HW + j] -
                                                                 full.output[b * C * HW + j])));
      }
      if (ex.param_count() != fused_closed_form(net, t)) ++count_mismatch;
      ++checked;
    }
  }
  return {worst <= 1e-5 && count_mismatch == 0,
          fmt::format("10 nets, {} (net, task) pairs: max |fused - decomposed| {:.2e} (<= 1e-5), {} count mismatches",
                      checked, worst, count_mismatch)};
}

// 5 ----------------------------------------------------------------------

Outcome rank_planner() {
  using V = std::vector<std::size_t>;
  const bool hand = plan_ranks({1, 1, 1}, 8).ranks == V{8, 8, 8} && plan_ranks({2, 1}, 8).ranks == V{14, 4} &&
                    plan_ranks({0, 2}, 8).ranks == V{2, 32};
  std::mt19937_64 gen(1005);
  std::size_t perm_fail = 0, scale_fail = 0;
  for (int i = 0; i < 300; ++i) {
    const std::size_t T_ = pick(gen, 1, 8), base = 2 * pick(gen, 1, 8);
    std::vector<double> dl(T_);
    for (auto& v : dl) v = std::uniform_real_distribution<double>(0.01, 3.0)(gen);
    const auto ranks = plan_ranks(dl, base).ranks;
    std::vector<std::size_t> order(T_);
    for (std::size_t t = 0; t < T_; ++t) order[t] = t;
    std::shuffle(order.begin(), order.end(), gen);
    std::vector<double> permuted(T_);
    for (std::size_t t = 0; t < T_; ++t) permuted[t] = dl[order[t]];
    const auto pr = plan_ranks(permuted, base).ranks;
    for (std::size_t t = 0; t < T_; ++t)
      if (pr[t] != ranks[order[t]]) ++perm_fail;
    // powers of two keep the scaled reductions exact
    const double c = std::ldexp(1.0, static_cast<int>(pick(gen, 0, 12)) - 6);
    std::vector<double> scaled(dl);
    for (auto& v : scaled) v *= c;
    if (plan_ranks(scaled, base).ranks != ranks) ++scale_fail;
  }
  return {hand && perm_fail == 0 && scale_fail == 0,
          fmt::format("hand cases {}, 300 random plans: {} permutation and {} scale failures",
                      hand ? "exact" : "WRONG", perm_fail, scale_fail)};
}

// 6 ----------------------------------------------------------------------

// Counts multiply-adds op by op: each task's d x r by r x d factor product, then
// one d x d weight applied to b*l rows (EKS); a rank-r per-example modulation
// costing r passes of the b*l x d x d product (FLoRA). Two FLOPs per multiply-add.
struct FlopCount {
  std::uint64_t eks = 0, flora = 0;
};

FlopCount count_flops(std::uint64_t T_, std::uint64_t b, std::uint64_t l, std::uint64_t d, std::uint64_t r) {
  auto mm = [](std::uint64_t m, std::uint64_t k, std::uint64_t n) { return 2 * m * k * n; };
  FlopCount c;
  for (std::uint64_t t = 0; t < T_; ++t) c.eks += mm(d, r, d);
  c.eks += mm(b * l, d, d);
  for (std::uint64_t e = 0; e < b; ++e)
    for (std::uint64_t k = 0; k < r; ++k) c.flora += mm(l, d, d);
  return c;
}

Outcome cost_model() {
  std::size_t mismatches = 0, cheaper = 0, points = 0;
  const std::uint64_t Ts[] = {1, 2, 4, 8, 32};
  const std::uint64_t bl_r[][3] = {{1, 1, 2}, {1, 2, 2}, {2, 2, 2}, {4, 4, 2}, {16, 256, 8},
                                   {1, 16, 1}, {8, 1, 4}, {2, 3, 16}, {16, 64, 2}, {4, 1, 2}};
  for (std::uint64_t T_ : Ts)
    for (const auto& p : bl_r) {
      const std::uint64_t b = p[0], l = p[1], r = p[2], d = 16;
      const auto est = cost_estimate(T_, b, l, d, r);
      const auto oracle = count_flops(T_, b, l, d, r);
      // T*r/(b*l) + 1 <= r, cross-multiplied
      const bool predicate = T_ * r + b * l <= r * b * l;
      if (est.eks_flops != oracle.eks || est.flora_flops != oracle.flora || est.eks_cheaper != predicate ||
          predicate != (oracle.eks <= oracle.flora)) {
        ++mismatches;
      }
      cheaper += predicate ? 1 : 0;
      ++points;
    }

  TempDir dir;
  const int rc = cli({"bench", "--tasks", "8", "--batch", "16", "--rank", "8", "--channels", "32", "--spatial", "16",
                      "--repeats", "5", "--report", dir / "bench.json"});
  double speedup = 0;
  bool bench_ok = rc == 0;
  if (bench_ok) {
    const Json j = read_json_file(dir / "bench.json");
    speedup = j["wallclock"]["speedup"].get<double>();
    const auto& a = j["analytic"];
    const auto oracle = count_flops(8, 16, a["seq_len"].get<std::uint64_t>(), a["dim"].get<std::uint64_t>(), 8);
    bench_ok = j["cost"]["eks_flops"] == oracle.eks && j["cost"]["flora_flops"] == oracle.flora &&
               j["cost"]["eks_cheaper"] == (oracle.eks <= oracle.flora);
  }
  return {mismatches == 0 && points == 50 && bench_ok,
          fmt::format("{} grid points ({} eks-cheaper), {} mismatches vs op-by-op FLOP count; bench report {}; "
                      "soft wall-clock eks/naive speedup {:.2f}x at T=8 B=16 C=32 16x16 ({} 1.5x)",
                      points, cheaper, mismatches, bench_ok ? "consistent" : "INCONSISTENT", speedup,
                      speedup >= 1.5 ? "meets" : "below")};
}

// 7 and 8 ----------------------------------------------------------------

struct ToyRun {
  std::vector<double> lorkd, mtl;
  double lorkd_macro = 0, mtl_macro = 0, lorkd_cka = 0, mtl_cka = 0;
};

std::vector<ToyRun> toy_runs;
double toy_seconds = 0;

const std::vector<ToyRun>& run_toy() {
  if (!toy_runs.empty()) return toy_runs;
  const auto start = std::chrono::steady_clock::now();
  for (std::uint64_t seed : {1, 2, 3}) {
    const Json j{{"mode", "cls"},
                 {"seed", seed},
                 {"train", {{"train_steps", 400}, {"warmup_steps", 40}, {"batch_size", 32}, {"optimizer", "adamw"},
                            {"learning_rate", 0.003}, {"teacher_steps", 300}}},
                 {"arch", {{"student_width", 6}, {"teacher_width", 12}}},
                 {"data", {{"task_count", 4}, {"classes", 5}, {"image_size", 16}, {"conflict_coupling", 1.0},
                           {"train_per_task", 512}, {"eval_per_task", 256}}}};
    const auto cfg = parse_config(j).config;
    const auto data = make_task_data(cfg);
    const auto teacher = train_teacher(cfg, data);
    const auto probe = cka_probe(data, cfg.data.cka_probe);
    const auto lorkd = run_arm(cfg, data, &teacher, true);
    const auto mtl = run_arm(cfg, data, &teacher, false);
    ToyRun r{lorkd.report.per_task, mtl.report.per_task, lorkd.report.macro_avg, mtl.report.macro_avg,
             mean_off_diagonal(cka_matrix(lorkd.net, probe)), mean_off_diagonal(cka_matrix(mtl.net, probe))};
    std::cout << fmt::format("  toy seed {}: LoRKD {:.3f} ({:.3f}) | MTL {:.3f} ({:.3f}) | CKA {:.4f} vs {:.4f}\n", seed,
                             r.lorkd_macro, fmt::join(r.lorkd, "/"), r.mtl_macro, fmt::join(r.mtl, "/"), r.lorkd_cka,
                             r.mtl_cka)
              << std::flush;
    toy_runs.push_back(std::move(r));
  }
  toy_seconds = seconds_since(start);
  return toy_runs;
}

Outcome toy_decomposition() {
  const auto& runs = run_toy();
  bool ok = toy_seconds < 900;
  std::string detail;
  for (const auto& r : runs) {
    std::size_t wins = 0;
    for (std::size_t t = 0; t < r.lorkd.size(); ++t) wins += r.lorkd[t] > r.mtl[t] ? 1 : 0;
    const double gap = 100 * (r.lorkd_macro - r.mtl_macro);
    ok = ok && wins >= 3 && gap >= 2.0;
    detail += fmt::format("{}/4 tasks, macro +{:.1f} pts; ", wins, gap);
  }
  return {ok, fmt::format("{}(need >= 3/4 and >= 2 pts each seed), {:.0f}s total (< 900s)", detail, toy_seconds)};
}

Outcome cka_direction() {
  const auto& runs = run_toy();
  bool ok = true;
  std::string detail;
  for (const auto& r : runs) {
    ok = ok && r.lorkd_cka < r.mtl_cka;
    detail += fmt::format("{:.4f} < {:.4f}; ", r.lorkd_cka, r.mtl_cka);
  }
  return {ok, fmt::format("mean off-diagonal CKA LoRKD vs MTL per seed: {}", detail)};
}

// 9 ----------------------------------------------------------------------

ExperimentConfig tiny_config(const std::string& mode, double beta) {
  Json j{{"mode", mode},
         {"seed", 9},
         {"train", {{"train_steps", 5}, {"warmup_steps", 3}, {"batch_size", 6}, {"teacher_steps", 3},
                    {"base_rank", 2}, {"beta", beta}}},
         {"arch", {{"student_width", 4}, {"teacher_width", 8}}},
         {"data", {{"task_count", 3}, {"image_size", 8}, {"train_per_task", 12}, {"eval_per_task", 8},
                   {"cka_probe", 12}}}};
  if (mode == "seg") j["data"]["classes"] = 2;
  return parse_config(j).config;
}

std::string expert_bytes(const Network<float>& net) {
  std::string out;
  net.for_each_param([&](const std::string&, const Tensor<float>& t, ParamKind k) {
    if (k == ParamKind::expert)
      out.append(reinterpret_cast<const char*>(t.data().data()), t.size() * sizeof(float));
  });
  return out;
}

Outcome determinism() {
  std::size_t frozen = 0, runs = 0, identical = 0, roundtrips = 0, exact = 0;
  for (const char* mode : {"cls", "seg"}) {
    const auto cfg = tiny_config(mode, std::string(mode) == "cls" ? 1.0 : 0.1);
    const auto data = make_task_data(cfg);
    const auto teacher = train_teacher(cfg, data);

    auto net = build_student(cfg, true);
    std::mt19937_64 gen(1009);
    for (auto& c : net.convs)
      for (auto& e : c.experts) e.b_factor = random_tensor<float>(e.b_factor.shape(), gen, -0.01, 0.01);
    const std::string before = expert_bytes(net);
    (void)run_warmup(cfg, net, data, &teacher);
    frozen += expert_bytes(net) == before ? 1 : 0;

    for (bool experts : {true, false}) {
      const auto a = serialize_checkpoint(run_arm(cfg, data, &teacher, experts).net);
      const auto b = serialize_checkpoint(run_arm(cfg, data, &teacher, experts).net);
      identical += a == b ? 1 : 0;
      ++runs;
      ++roundtrips;
      exact += serialize_checkpoint(deserialize_checkpoint(a)) == a ? 1 : 0;
    }
    const auto t = serialize_checkpoint(teacher);
    identical += t == serialize_checkpoint(train_teacher(cfg, data)) ? 1 : 0;
    ++runs;
    ++roundtrips;
    exact += serialize_checkpoint(deserialize_checkpoint(t)) == t ? 1 : 0;
  }
  return {frozen == 2 && identical == runs && exact == roundtrips,
          fmt::format("experts byte-identical after warmup {}/2; repeated runs bit-identical {}/{}; "
                      "round trips bit-exact {}/{}",
                      frozen, identical, runs, exact, roundtrips)};
}

// 10 ---------------------------------------------------------------------

Outcome defaults() {
  const Json data{{"task_count", 2}};
  const auto seg = parse_config(Json{{"mode", "seg"}, {"data", data}}).config;
  const auto cls = parse_config(Json{{"mode", "cls"}, {"data", data}}).config;
  const auto over =
      parse_config(Json{{"mode", "seg"}, {"data", data}, {"train", {{"beta", 0.5}, {"base_rank", 4}}}}).config;
  const bool def = seg.train.beta == 0.1 && cls.train.beta == 1.0 && seg.train.base_rank == 8 &&
                   cls.train.base_rank == 8 && over.train.beta == 0.5 && over.train.base_rank == 4;

  TempDir dir;
  Json j = config_to_json(tiny_config("seg", 0.1));
  write_json_file(dir / "run.json", j);
  const std::string cfg = dir / "run.json";
  const auto expected = config_to_json(load_config(cfg).config);
  bool echo = cli({"train-teacher", "--config", cfg, "--out", dir / "t.lrkd"}) == 0 &&
              cli({"warmup", "--config", cfg, "--teacher", dir / "t.lrkd", "--out", dir / "w.lrkd", "--log",
                   dir / "log.json"}) == 0 &&
              cli({"decompose", "--config", cfg, "--teacher", dir / "t.lrkd", "--warmup", dir / "w.lrkd", "--out",
                   dir / "m.lrkd", "--report", dir / "report.json"}) == 0 &&
              cli({"eval", "--model", dir / "m.lrkd", "--config", cfg, "--report", dir / "eval.json"}) == 0;
  if (echo) {
    for (const char* f : {"log.json", "report.json", "eval.json"}) {
      const Json r = read_json_file(dir / f);
      echo = echo && r["config"] == expected && r["config"]["train"]["beta"] == 0.1 &&
             r["provenance"]["config_hash"] == config_hash(load_config(cfg).config);
    }
  }
  return {def && echo, fmt::format("beta seg {} / cls {}, base rank {}, overrides {}; config echo in log, "
                                   "decompose and eval reports {}",
                                   seg.train.beta, cls.train.beta, seg.train.base_rank,
                                   over.train.beta == 0.5 ? "honored" : "IGNORED", echo ? "present" : "MISSING")};
}

}  // namespace

int main(int argc, char** argv) {
  configure_threads_from_env();
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  const std::vector<std::pair<int, Outcome (*)()>> criteria = {
      {1, eks_equivalence}, {2, gradient_routing}, {3, finite_differences}, {4, fusion},  {5, rank_planner},
      {6, cost_model},      {7, toy_decomposition}, {8, cka_direction},   {9, determinism}, {10, defaults}};
  bool all = true;
  for (const auto& [id, fn] : criteria) {
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, fmt::format("threw: {}", e.what())};
    }
    all = all && o.pass;
    std::cout << fmt::format("criterion {}: {} {}\n", id, o.pass ? "PASS" : "FAIL", o.detail) << std::flush;
  }
  return all ? 0 : 1;
}
