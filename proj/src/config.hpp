#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "model.hpp"
#include "tasks.hpp"
#include "trainer.hpp"

namespace memvit {

struct SweepConfig {
  std::vector<double> learning_rates = {0.3, 0.1, 0.03, 0.01};
  std::vector<std::size_t> mem_counts = {1, 2, 5, 10, 20};
  std::vector<Regime> regimes = {Regime::head_only, Regime::head_cls, Regime::memory_masked, Regime::full};
  std::vector<std::size_t> layer_counts;  // ablation K values; empty = {0, L/2, L}
};

struct DataConfig {
  SyntheticTaskSpec synthetic;
  std::string path;  // binary dataset; overrides synthetic generation when set
};

// Whole run configuration. Sections: model, train, data, sweep, output.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  SweepConfig sweep;
  std::string output_dir = "runs/default";
  std::uint64_t init_seed = 0;  // model.init_seed

  void validate() const;
};

// Parses YAML text. Unknown keys, wrong types and invalid values raise
// ConfigError naming the line and field.
RunConfig parse_run_config(const std::string& yaml_text);
RunConfig load_run_config(const std::filesystem::path& path);

// Fully resolved configuration, defaults included, as YAML.
std::string dump_run_config(const RunConfig& cfg);

// Generates or loads the data section; the holdout share of the training
// pool comes from train.eval_fraction.
Dataset load_data(const RunConfig& cfg);

}  // namespace memvit
