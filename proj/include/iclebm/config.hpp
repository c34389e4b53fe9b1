#pragma once
// Plain-text run configuration with namespaced keys ("train.batch_size",
// "langevin.step_size", ...). Every key has a built-in default; unknown keys
// are errors. Precedence: explicit overrides > config file > defaults.

#include <string>
#include <vector>

#include "iclebm/common.hpp"
#include "iclebm/eval.hpp"
#include "iclebm/gmm.hpp"
#include "iclebm/model.hpp"
#include "iclebm/trainer.hpp"

namespace iclebm {

struct EvalSettings {
  Interval grid_box{-6.0, 6.0};  // both axes
  int landscape_resolution = 64;
  int partition_resolution = 256;

  void validate() const;
  GridSpec landscape_grid() const { return GridSpec{grid_box, grid_box, landscape_resolution, landscape_resolution}; }
};

struct RunConfig {
  TaskPrior prior;
  ModelConfig model;
  TrainConfig train;  // includes the langevin block and the run seed
  EvalSettings eval;

  void validate() const;
};

RunConfig default_config();

// Defaults overlaid with the file contents. Errors name the key and line.
RunConfig load_config_file(const std::string& path);

// Applies "key = value" lines from text on top of cfg (line numbers offset 0).
void apply_config_text(RunConfig& cfg, const std::string& text);

// Single key override; throws ConfigError with line 0.
void apply_override(RunConfig& cfg, const std::string& key, const std::string& value);

// Canonical dump; parsing it back reproduces an identical effective config.
std::string dump_config(const RunConfig& cfg);

// All known keys in canonical order.
std::vector<std::string> config_keys();

}  // namespace iclebm
