// SPDX-License-Identifier: Apache-2.0

// Run configuration file (JSON). Unknown keys are rejected at every level;
// omitted keys take mode-dependent defaults:
//   cls: beta 1, SGD with momentum, lr 0.05
//   seg: beta 0.1, AdamW, lr 1e-4
//   both: base_rank 8, tau 1, warmup_steps = train_steps / 10 (at least 1)

#pragma once

#include <map>
#include <string>

#include <json.hpp>

#include "lorkd/pipeline.hpp"

namespace lorkd {

using Json = nlohmann::ordered_json;

inline constexpr const char* kVersion = "0.1.0";

struct RunFile {
  ExperimentConfig config;
  /// Optional default artifact paths (teacher, warmup, ranks, model, report, log).
  std::map<std::string, std::string> paths;
};

RunFile parse_config(const Json& j);
RunFile load_config(const std::string& path);

/// Fully resolved configuration, every default filled in.
Json config_to_json(const ExperimentConfig& config);

/// FNV-1a 64 of the resolved configuration's compact JSON, as 16 hex digits.
std::string config_hash(const ExperimentConfig& config);

Json provenance(const ExperimentConfig& config);

Json to_json(const RankPlan& plan);
RankPlan rank_plan_from_json(const Json& j);

Json to_json(const WarmupLog& log);
WarmupLog warmup_log_from_json(const Json& j);

Json to_json(const MetricsReport& report);

Json read_json_file(const std::string& path);
/// Atomic: writes a temporary sibling and renames it into place.
void write_text_file(const std::string& path, const std::string& text);
void write_json_file(const std::string& path, const Json& j);

}  // namespace lorkd
