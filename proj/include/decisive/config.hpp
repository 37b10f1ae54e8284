#pragma once

#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "decisive/dataset.hpp"
#include "decisive/pipeline.hpp"
#include "decisive/soft_layout.hpp"

namespace decisive {

/// Every tunable of every module, addressed by flat "section.name" keys.
struct Config {
  SimConfig sim;
  DatasetConfig data;
  TrainConfig train;
  ClusterConfig cluster;
  GuidanceConfig guidance;
  MetricsConfig metrics;

  PipelineConfig pipeline() const { return {sim, cluster, guidance, metrics}; }
};

using KeyValues = std::vector<std::pair<std::string, std::string>>;

/// All keys in a fixed order with canonical value strings.
KeyValues to_key_values(const Config& cfg);
/// Keys whose name starts with `prefix`.
KeyValues to_key_values(const Config& cfg, std::string_view prefix);
/// Throws InputError on an unknown key or a malformed value.
void set_key(Config& cfg, std::string_view key, std::string_view value);
std::vector<std::string> config_keys();

/// Flat "key = value" text; '#' starts a comment.
void apply_config_text(Config& cfg, std::string_view text, std::string_view origin = "config");
Config load_config_file(const std::string& path);
/// Canonical text form, one key per line; re-parses to an equal config.
std::string config_to_text(const Config& cfg);
/// JSON object of key -> value string.
std::string config_to_json(const Config& cfg);

}  // namespace decisive
