#pragma once

#include <filesystem>

#include "json.hpp"
#include "peftlab/model.hpp"
#include "peftlab/train.hpp"

namespace peftlab {

struct TaskSpec {
  std::string name = "qa";  // "qa" | "caption" | "multitask"
  std::size_t attributes = 4;
  std::size_t values = 4;
  std::size_t n = 4096;
  double noise_sigma = 0.1;
  std::uint64_t world_seed = 1;
  std::uint64_t data_seed = 2;
  AblationMode ablation = AblationMode::None;
  AblationScope ablation_scope = AblationScope::RoutingOnly;
};

/// Declarative run description. Parsing is strict: unknown keys and invalid
/// enum strings are configuration errors; alpha defaults to the rank.
struct ExperimentConfig {
  ModelConfig model;
  PeftPlacement peft;
  TaskSpec task;
  TrainConfig train;
  std::string out_dir = "run";

  Dataset build_dataset() const;
  Model build_model() const;  // built and injected
  nlohmann::json to_json() const;

  /// Output directory resolved against the PEFTLAB_OUT_ROOT env var when the
  /// configured path is relative.
  std::filesystem::path resolved_out_dir() const;
};

ExperimentConfig parse_experiment_json(const nlohmann::json& j);

/// Loads a config file, then applies "section.key=value" overrides in order.
ExperimentConfig load_experiment_config(const std::filesystem::path& path,
                                        const std::vector<std::string>& overrides = {});

/// Parses one override of the form "a.b=value"; the value is read as JSON
/// when possible, as a bare string otherwise.
void apply_override(nlohmann::json& j, const std::string& assignment);

/// Resolved config plus provenance, written into the run directory before
/// training starts.
void write_manifest(const ExperimentConfig& cfg, Model& model, const std::filesystem::path& dir);

extern const char* kVersionStamp;

}  // namespace peftlab
