#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mla/model.hpp"
#include "mla/objectives.hpp"
#include "mla/synthworld.hpp"
#include "mla/training.hpp"

namespace mla {

struct PathsConfig {
  std::string corpora = "data/corpora";
  std::string runs = "runs";
  bool operator==(const PathsConfig&) const = default;
};

struct RunConfig {
  WorldConfig world;
  ModelConfig model;
  LossConfig loss;
  std::vector<StageConfig> stages;
  PathsConfig paths;
  // CLI overrides; both echo back out so reruns reproduce them.
  std::optional<uint64_t> seed_override;
  std::optional<std::vector<std::string>> language_filter;

  void validate() const;
  // Languages the pipelines should train/evaluate: the filter when present,
  // otherwise a stage's own list (or all world languages).
  std::vector<std::string> effective_languages(const std::vector<std::string>& base) const;
  bool operator==(const RunConfig&) const = default;
};

// The pinned default pipeline; an empty config file resolves to exactly this.
RunConfig default_run_config();

// Strict parsing: unknown keys and type mismatches fail with the dotted key
// path; an empty document yields the defaults.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::filesystem::path& path);

// Fully-resolved echo; parse_run_config(echo_run_config(c)) == c.
std::string echo_run_config(const RunConfig& cfg);
uint64_t config_hash(const RunConfig& cfg);

void apply_seed_override(RunConfig& cfg, uint64_t seed);

}  // namespace mla
