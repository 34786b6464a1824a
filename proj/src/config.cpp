// SPDX-License-Identifier: Apache-2.0

#include "lorkd/config.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "lorkd/ops.hpp"

namespace lorkd {

namespace {

/// Reads typed fields from one JSON object and rejects keys it never asked for.
class ObjectReader {
 public:
  ObjectReader(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(fmt::format("{}: expected an object", where_));
  }

  bool has(const std::string& key) {
    known_.insert(key);
    return j_.contains(key);
  }

  template <typename V>
  V get(const std::string& key, V fallback) {
    if (!has(key)) return fallback;
    try {
      return j_.at(key).get<V>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(fmt::format("{}.{}: {}", where_, key, e.what()));
    }
  }

  const Json& at(const std::string& key) {
    known_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!known_.count(key)) throw ConfigError(fmt::format("{}: unknown key '{}'", where_, key));
    }
  }

 private:
  const Json& j_;
  std::string where_;
  std::set<std::string> known_;
};

template <typename Fn>
auto as_config_error(Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
}

std::size_t non_negative(long long v, const char* what) {
  if (v < 0) throw ConfigError(fmt::format("{} must be >= 0, got {}", what, v));
  return static_cast<std::size_t>(v);
}

}  // namespace

RunFile parse_config(const Json& j) {
  RunFile rf;
  ExperimentConfig& c = rf.config;
  ObjectReader root(j, "config");
  if (!root.has("mode")) throw ConfigError("config: 'mode' is required (cls or seg)");
  const std::string mode = root.get<std::string>("mode", "");
  c.train.mode = as_config_error([&] { return parse_net_mode(mode); });
  const bool cls = c.train.mode == NetMode::cls;
  c.train.seed = root.get<std::uint64_t>("seed", 0);

  TrainConfig& tr = c.train;
  tr.beta = cls ? 1.0 : 0.1;
  tr.learning_rate = cls ? 0.05 : 1e-4;
  tr.optimizer = cls ? OptimizerKind::sgd_momentum : OptimizerKind::adamw;
  if (root.has("train")) {
    ObjectReader r(root.at("train"), "config.train");
    tr.base_rank = non_negative(r.get<long long>("base_rank", 8), "base_rank");
    tr.beta = r.get<double>("beta", tr.beta);
    tr.tau = r.get<double>("tau", tr.tau);
    tr.learning_rate = r.get<double>("learning_rate", tr.learning_rate);
    if (r.has("optimizer"))
      tr.optimizer = as_config_error([&] { return parse_optimizer(r.get<std::string>("optimizer", "")); });
    if (r.has("schedule"))
      tr.schedule = as_config_error([&] { return parse_schedule(r.get<std::string>("schedule", "")); });
    tr.train_steps = non_negative(r.get<long long>("train_steps", 0), "train_steps");
    const long long warmup_default = tr.train_steps > 0 ? std::max<long long>(1, tr.train_steps / 10) : 0;
    tr.warmup_steps = non_negative(r.get<long long>("warmup_steps", warmup_default), "warmup_steps");
    tr.batch_size = non_negative(r.get<long long>("batch_size", 16), "batch_size");
    if (r.has("rank_mode"))
      tr.rank_mode = as_config_error([&] { return parse_rank_mode(r.get<std::string>("rank_mode", "")); });
    tr.teacher_steps =
        non_negative(r.get<long long>("teacher_steps", static_cast<long long>(tr.train_steps)), "teacher_steps");
    tr.teacher_learning_rate = r.get<double>("teacher_learning_rate", tr.learning_rate);
    r.finish();
  } else {
    tr.teacher_learning_rate = tr.learning_rate;
  }

  if (root.has("arch")) {
    ObjectReader r(root.at("arch"), "config.arch");
    c.arch.student_width = non_negative(r.get<long long>("student_width", 8), "student_width");
    c.arch.teacher_width = non_negative(r.get<long long>("teacher_width", 16), "teacher_width");
    r.finish();
  }

  if (!root.has("data")) throw ConfigError("config: 'data' is required");
  {
    ObjectReader r(root.at("data"), "config.data");
    DataConfig& d = c.data;
    d.train_per_task = non_negative(r.get<long long>("train_per_task", 256), "train_per_task");
    d.eval_per_task = non_negative(r.get<long long>("eval_per_task", 128), "eval_per_task");
    d.cka_probe = non_negative(r.get<long long>("cka_probe", 128), "cka_probe");
    const std::size_t image_size = non_negative(r.get<long long>("image_size", 32), "image_size");
    const std::size_t classes = non_negative(r.get<long long>("classes", cls ? 4 : 1), "classes");
    const double coupling = r.get<double>("conflict_coupling", 0.0);
    const GeneratorKind kind = cls ? GeneratorKind::pattern_cls : GeneratorKind::shape_seg;
    auto base_spec = [&](std::size_t t) {
      SyntheticTaskSpec s;
      s.task_id = t;
      s.kind = kind;
      s.family = static_cast<ShapeFamily>(t % 4);
      s.image_size = image_size;
      s.classes = classes;
      s.conflict_coupling = coupling;
      return s;
    };
    const bool has_tasks = r.has("tasks"), has_count = r.has("task_count");
    if (has_tasks == has_count) throw ConfigError("config.data: give exactly one of 'tasks' or 'task_count'");
    if (has_count) {
      const std::size_t T = non_negative(r.get<long long>("task_count", 0), "task_count");
      for (std::size_t t = 0; t < T; ++t) d.tasks.push_back(base_spec(t));
    } else {
      const Json& list = r.at("tasks");
      if (!list.is_array()) throw ConfigError("config.data.tasks: expected an array");
      for (std::size_t t = 0; t < list.size(); ++t) {
        ObjectReader tr_(list[t], fmt::format("config.data.tasks[{}]", t));
        SyntheticTaskSpec s = base_spec(t);
        if (tr_.has("family"))
          s.family = as_config_error([&] { return parse_shape_family(tr_.get<std::string>("family", "")); });
        s.classes = non_negative(tr_.get<long long>("classes", static_cast<long long>(s.classes)), "classes");
        s.conflict_coupling = tr_.get<double>("conflict_coupling", s.conflict_coupling);
        tr_.finish();
        d.tasks.push_back(s);
      }
    }
    r.finish();
  }

  if (root.has("paths")) {
    ObjectReader r(root.at("paths"), "config.paths");
    for (const char* key : {"teacher", "warmup", "ranks", "model", "report", "log"})
      if (r.has(key)) rf.paths[key] = r.get<std::string>(key, "");
    r.finish();
  }
  root.finish();
  as_config_error([&] {
    c.validate();
    return 0;
  });
  return rf;
}

Json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot open '{}'", path));
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(fmt::format("{}: {}", path, e.what()));
  }
}

RunFile load_config(const std::string& path) { return parse_config(read_json_file(path)); }

Json config_to_json(const ExperimentConfig& c) {
  const TrainConfig& t = c.train;
  Json tasks = Json::array();
  for (const auto& s : c.data.tasks) {
    Json js{{"classes", s.classes}, {"conflict_coupling", s.conflict_coupling}};
    if (s.kind == GeneratorKind::shape_seg) js["family"] = to_string(s.family);
    tasks.push_back(js);
  }
  return Json{
      {"mode", to_string(t.mode)},
      {"seed", t.seed},
      {"train",
       {{"base_rank", t.base_rank},
        {"beta", t.beta},
        {"tau", t.tau},
        {"learning_rate", t.learning_rate},
        {"optimizer", to_string(t.optimizer)},
        {"schedule", to_string(t.schedule)},
        {"warmup_steps", t.warmup_steps},
        {"train_steps", t.train_steps},
        {"batch_size", t.batch_size},
        {"rank_mode", to_string(t.rank_mode)},
        {"teacher_steps", t.teacher_steps},
        {"teacher_learning_rate", t.teacher_learning_rate}}},
      {"arch", {{"student_width", c.arch.student_width}, {"teacher_width", c.arch.teacher_width}}},
      {"data",
       {{"train_per_task", c.data.train_per_task},
        {"eval_per_task", c.data.eval_per_task},
        {"cka_probe", c.data.cka_probe},
        {"image_size", c.data.tasks.empty() ? 0 : c.data.tasks[0].image_size},
        {"tasks", tasks}}},
  };
}

std::string config_hash(const ExperimentConfig& config) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : config_to_json(config).dump()) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return fmt::format("{:016x}", h);
}

Json provenance(const ExperimentConfig& config) {
  return Json{{"config_hash", config_hash(config)},
              {"seed", config.train.seed},
              {"version", kVersion},
              {"checkpoint_format", 1},
              {"threads", configure_threads_from_env()}};
}

Json to_json(const RankPlan& plan) {
  Json j{{"base_rank", plan.base_rank}, {"loss_reductions", plan.loss_reductions}, {"ranks", plan.ranks}};
  if (plan.degenerate) j["degenerate"] = true;
  return j;
}

RankPlan rank_plan_from_json(const Json& j) {
  RankPlan p;
  ObjectReader r(j, "rank plan");
  if (!r.has("ranks")) throw ConfigError("rank plan: 'ranks' is required");
  p.base_rank = r.get<std::size_t>("base_rank", 0);
  p.loss_reductions = r.get<std::vector<double>>("loss_reductions", {});
  p.ranks = r.get<std::vector<std::size_t>>("ranks", {});
  p.degenerate = r.get<bool>("degenerate", false);
  r.finish();
  for (std::size_t rank : p.ranks)
    if (rank < kMinRank) throw ConfigError(fmt::format("rank plan: rank {} below the minimum {}", rank, kMinRank));
  return p;
}

Json to_json(const WarmupLog& log) {
  Json rows = Json::array();
  for (const auto& rec : log) rows.push_back(Json::array({rec.step, rec.task, rec.loss}));
  return Json{{"task_losses", rows}};
}

WarmupLog warmup_log_from_json(const Json& j) {
  ObjectReader r(j, "warmup log");
  if (!r.has("task_losses")) throw ConfigError("warmup log: 'task_losses' is required");
  const Json& rows = r.at("task_losses");
  r.has("provenance");
  r.has("config");
  r.finish();
  if (!rows.is_array()) throw ConfigError("warmup log: 'task_losses' must be an array");
  WarmupLog log;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const Json& row = rows[i];
    if (!row.is_array() || row.size() != 3 || !row[0].is_number_unsigned() || !row[1].is_number_unsigned() ||
        !row[2].is_number()) {
      throw ConfigError(fmt::format("warmup log: entry {} is not [step, task, loss]", i));
    }
    log.push_back({row[0].get<std::size_t>(), row[1].get<std::size_t>(), row[2].get<double>()});
  }
  return log;
}

Json to_json(const MetricsReport& r) {
  Json per_task = Json::object();
  for (std::size_t t = 0; t < r.per_task.size(); ++t) per_task[fmt::format("task{}", t)] = r.per_task[t];
  return Json{{"metric", r.metric},
              {"per_task", per_task},
              {"macro_avg", r.macro_avg},
              {"params_train", r.params_train},
              {"params_fused", r.params_fused.empty() ? 0 : r.params_fused.front()},
              {"params_fused_per_task", r.params_fused},
              {"ranks", r.ranks},
              {"kernel_launches", {{"conv_forward", r.forward_launches}, {"conv_backward", r.backward_launches}}}};
}

void write_text_file(const std::string& path, const std::string& text) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(fmt::format("cannot write '{}'", tmp));
    out << text;
    if (!out.flush()) throw Error(fmt::format("write to '{}' failed", tmp));
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(fmt::format("cannot move '{}' to '{}': {}", tmp, path, ec.message()));
}

void write_json_file(const std::string& path, const Json& j) { write_text_file(path, j.dump(2) + "\n"); }

}  // namespace lorkd
