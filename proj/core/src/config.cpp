#include "upsearch/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "upsearch/errors.hpp"

namespace upsearch {
namespace {

using nlohmann::json;

void expect_keys(const json& obj, const std::string& section,
                 const std::set<std::string>& allowed) {
  if (!obj.is_object())
    throw ConfigError("'" + section + "' must be an object");
  for (const auto& [key, _] : obj.items()) {
    if (!allowed.count(key)) {
      const std::string where =
          section == "(root)" ? key : section + "." + key;
      throw ConfigError("unknown key '" + where + "'");
    }
  }
}

// Typed field readers; absence keeps the default.
template <typename T>
void read(const json& obj, const std::string& section, const char* key,
          T& out) {
  auto it = obj.find(key);
  if (it == obj.end()) return;
  try {
    out = it->get<T>();
  } catch (const json::exception&) {
    throw ConfigError("bad value for '" + section + "." + key + "'");
  }
}

}  // namespace

RunConfig parse_run_config(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  expect_keys(doc, "(root)",
              {"version", "dataset", "train", "controller", "search",
               "calibrate", "paths"});
  if (!doc.contains("version"))
    throw ConfigError("config is missing required key 'version'");

  RunConfig cfg;
  read(doc, "(root)", "version", cfg.version);
  if (cfg.version != 1)
    throw ConfigError("unsupported config version " +
                      std::to_string(cfg.version) + " (expected 1)");

  if (doc.contains("dataset")) {
    const json& d = doc["dataset"];
    expect_keys(d, "dataset", {"train_count", "test_count", "seed", "image_size"});
    read(d, "dataset", "train_count", cfg.dataset.train_count);
    read(d, "dataset", "test_count", cfg.dataset.test_count);
    read(d, "dataset", "seed", cfg.dataset.seed);
    read(d, "dataset", "image_size", cfg.dataset.image_size);
  }

  if (doc.contains("train")) {
    const json& t = doc["train"];
    expect_keys(t, "train",
                {"learning_rate", "weight_decay", "beta1", "beta2", "adam_eps",
                 "batch_size", "replace_finetune_epochs",
                 "prune_finetune_epochs", "patience", "base_epochs",
                 "base_learning_rate"});
    read(t, "train", "learning_rate", cfg.train.learning_rate);
    read(t, "train", "weight_decay", cfg.train.weight_decay);
    read(t, "train", "beta1", cfg.train.beta1);
    read(t, "train", "beta2", cfg.train.beta2);
    read(t, "train", "adam_eps", cfg.train.adam_eps);
    read(t, "train", "batch_size", cfg.train.batch_size);
    read(t, "train", "replace_finetune_epochs",
         cfg.train.replace_finetune_epochs);
    read(t, "train", "prune_finetune_epochs", cfg.train.prune_finetune_epochs);
    read(t, "train", "patience", cfg.train.patience);
    read(t, "train", "base_epochs", cfg.base_epochs);
    read(t, "train", "base_learning_rate", cfg.base_learning_rate);
  }

  if (doc.contains("controller")) {
    const json& c = doc["controller"];
    expect_keys(c, "controller",
                {"hidden_size", "num_layers", "init_range", "learning_rate",
                 "alpha", "latency_threshold_ms", "batch", "ema_decay",
                 "grad_clip"});
    read(c, "controller", "hidden_size", cfg.controller.hidden_size);
    read(c, "controller", "num_layers", cfg.controller.num_layers);
    read(c, "controller", "init_range", cfg.controller.init_range);
    read(c, "controller", "learning_rate", cfg.controller.learning_rate);
    read(c, "controller", "alpha", cfg.controller.alpha);
    read(c, "controller", "latency_threshold_ms",
         cfg.controller.latency_threshold_ms);
    read(c, "controller", "batch", cfg.controller.batch);
    read(c, "controller", "ema_decay", cfg.controller.ema_decay);
    read(c, "controller", "grad_clip", cfg.controller.grad_clip);
  }

  if (doc.contains("search")) {
    const json& s = doc["search"];
    expect_keys(s, "search",
                {"steps", "samples_per_step", "measured_per_step", "workers",
                 "seed", "gp_noise_var", "final_finetune_epochs"});
    read(s, "search", "steps", cfg.search.steps);
    read(s, "search", "samples_per_step", cfg.search.samples_per_step);
    read(s, "search", "measured_per_step", cfg.search.measured_per_step);
    read(s, "search", "workers", cfg.search.workers);
    read(s, "search", "seed", cfg.search.seed);
    read(s, "search", "gp_noise_var", cfg.search.gp_noise_var);
    read(s, "search", "final_finetune_epochs",
         cfg.search.final_finetune_epochs);
  }

  if (doc.contains("calibrate")) {
    const json& c = doc["calibrate"];
    expect_keys(c, "calibrate",
                {"ratios", "repetitions", "seed", "holdout", "split_seed"});
    read(c, "calibrate", "ratios", cfg.calibrate.ratios);
    read(c, "calibrate", "repetitions", cfg.calibrate.repetitions);
    read(c, "calibrate", "seed", cfg.calibrate.seed);
    read(c, "calibrate", "holdout", cfg.calibrate.holdout);
    read(c, "calibrate", "split_seed", cfg.calibrate.split_seed);
  }

  if (doc.contains("paths")) {
    const json& p = doc["paths"];
    expect_keys(p, "paths",
                {"graph", "weights", "cost_model", "run_log", "observations",
                 "controller_checkpoint", "best_weights", "best_graph"});
    read(p, "paths", "graph", cfg.paths.graph);
    read(p, "paths", "weights", cfg.paths.weights);
    read(p, "paths", "cost_model", cfg.paths.cost_model);
    read(p, "paths", "run_log", cfg.paths.run_log);
    read(p, "paths", "observations", cfg.paths.observations);
    read(p, "paths", "controller_checkpoint",
         cfg.paths.controller_checkpoint);
    read(p, "paths", "best_weights", cfg.paths.best_weights);
    read(p, "paths", "best_graph", cfg.paths.best_graph);
  }

  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string run_config_to_json(const RunConfig& cfg) {
  json doc;
  doc["version"] = cfg.version;
  doc["dataset"] = {{"train_count", cfg.dataset.train_count},
                    {"test_count", cfg.dataset.test_count},
                    {"seed", cfg.dataset.seed},
                    {"image_size", cfg.dataset.image_size}};
  doc["train"] = {{"learning_rate", cfg.train.learning_rate},
                  {"weight_decay", cfg.train.weight_decay},
                  {"beta1", cfg.train.beta1},
                  {"beta2", cfg.train.beta2},
                  {"adam_eps", cfg.train.adam_eps},
                  {"batch_size", cfg.train.batch_size},
                  {"replace_finetune_epochs", cfg.train.replace_finetune_epochs},
                  {"prune_finetune_epochs", cfg.train.prune_finetune_epochs},
                  {"patience", cfg.train.patience},
                  {"base_epochs", cfg.base_epochs},
                  {"base_learning_rate", cfg.base_learning_rate}};
  doc["controller"] = {{"hidden_size", cfg.controller.hidden_size},
                       {"num_layers", cfg.controller.num_layers},
                       {"init_range", cfg.controller.init_range},
                       {"learning_rate", cfg.controller.learning_rate},
                       {"alpha", cfg.controller.alpha},
                       {"latency_threshold_ms", cfg.controller.latency_threshold_ms},
                       {"batch", cfg.controller.batch},
                       {"ema_decay", cfg.controller.ema_decay},
                       {"grad_clip", cfg.controller.grad_clip}};
  doc["search"] = {{"steps", cfg.search.steps},
                   {"samples_per_step", cfg.search.samples_per_step},
                   {"measured_per_step", cfg.search.measured_per_step},
                   {"workers", cfg.search.workers},
                   {"seed", cfg.search.seed},
                   {"gp_noise_var", cfg.search.gp_noise_var},
                   {"final_finetune_epochs", cfg.search.final_finetune_epochs}};
  doc["calibrate"] = {{"ratios", cfg.calibrate.ratios},
                      {"repetitions", cfg.calibrate.repetitions},
                      {"seed", cfg.calibrate.seed},
                      {"holdout", cfg.calibrate.holdout},
                      {"split_seed", cfg.calibrate.split_seed}};
  doc["paths"] = {{"graph", cfg.paths.graph},
                  {"weights", cfg.paths.weights},
                  {"cost_model", cfg.paths.cost_model},
                  {"run_log", cfg.paths.run_log},
                  {"observations", cfg.paths.observations},
                  {"controller_checkpoint", cfg.paths.controller_checkpoint},
                  {"best_weights", cfg.paths.best_weights},
                  {"best_graph", cfg.paths.best_graph}};
  return doc.dump();
}

}  // namespace upsearch
