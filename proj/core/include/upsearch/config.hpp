#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "upsearch/controller.hpp"
#include "upsearch/trainer.hpp"

namespace upsearch {

// Sections of the run configuration file. Every field has a working default;
// the file only overrides. Parsing is strict: `version` is required and
// unknown keys anywhere are errors naming the offending "section.key".

struct DatasetSection {
  int train_count = 600;
  int test_count = 150;
  std::uint64_t seed = 1;
  int image_size = 12;
};

struct SearchSection {
  int steps = 10;
  int samples_per_step = 50;
  int measured_per_step = 10;
  int workers = 0;  // 0: available parallelism - 1
  std::uint64_t seed = 1;
  double gp_noise_var = 1e-4;
  int final_finetune_epochs = 10;  // extra tuning of the winning scheme
};

struct CalibrateSection {
  std::vector<double> ratios = {0.0, 0.3, 0.5, 0.7, 0.8, 0.9};
  int repetitions = 30;
  std::uint64_t seed = 7;
  double holdout = 0.2;
  std::uint64_t split_seed = 17;
};

struct PathsSection {
  std::string graph = "out/base_graph.json";
  std::string weights = "out/base_weights.bin";
  std::string cost_model = "out/cost_model.json";
  std::string run_log = "out/run_log.jsonl";
  std::string observations = "out/observations.jsonl";
  std::string controller_checkpoint = "out/controller.bin";
  std::string best_weights = "out/best_weights.bin";
  std::string best_graph = "out/best_graph.json";
};

struct RunConfig {
  int version = 1;
  DatasetSection dataset;
  TrainConfig train;
  // Base-model training gets its own budget and rate: the frozen TrainConfig
  // rate is a fine-tuning rate, far too timid for training from scratch.
  int base_epochs = 20;
  double base_learning_rate = 3e-3;
  ControllerConfig controller;
  SearchSection search;
  CalibrateSection calibrate;
  PathsSection paths;
};

RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);

// Effective configuration, defaults resolved, as a stable JSON object; this
// is what run log headers echo.
std::string run_config_to_json(const RunConfig& cfg);

}  // namespace upsearch
