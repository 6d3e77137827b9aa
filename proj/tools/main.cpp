// upsearch command line: train-base | calibrate | search | eval-scheme |
// bench | export. Exit codes: 0 ok, 2 config error, 3 runtime error,
// 4 numerical failure. Errors are single lines on stderr.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "upsearch/config.hpp"
#include "upsearch/controller.hpp"
#include "upsearch/cost_model.hpp"
#include "upsearch/errors.hpp"
#include "upsearch/evaluate.hpp"
#include "upsearch/latency_lab.hpp"
#include "upsearch/pruning.hpp"
#include "upsearch/rng.hpp"
#include "upsearch/scheme.hpp"
#include "upsearch/search.hpp"
#include "upsearch/sparse_format.hpp"
#include "upsearch/trainer.hpp"
#include "upsearch/weights.hpp"

namespace {

using namespace upsearch;

std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

void ensure_parent(const std::string& path) {
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

// No-op actions on every slot: keep the kernel, prune nothing.
UnifiedScheme identity_scheme(const ModelGraph& g) {
  UnifiedScheme s;
  s.per_layer.assign(g.scheme_slots().size(), LayerActions{});
  return s;
}

int cmd_train_base(const RunConfig& cfg) {
  Dataset data =
      make_synthetic_dataset(cfg.dataset.train_count, cfg.dataset.test_count,
                             cfg.dataset.seed, cfg.dataset.image_size);
  ModelGraph g = desk_model(data.input_shape, data.num_classes);
  Rng rng(cfg.dataset.seed ^ 0x9e3779b97f4a7c15ull);
  ModelWeights start = init_weights(g, rng);
  TrainConfig tc = cfg.train;
  tc.learning_rate = cfg.base_learning_rate;  // from-scratch rate
  TrainResult res =
      train(g, start, data, tc, cfg.base_epochs, nullptr, cfg.dataset.seed + 1);

  ensure_parent(cfg.paths.graph);
  save_graph(g, cfg.paths.graph);
  ensure_parent(cfg.paths.weights);
  save_weights(res.weights, cfg.paths.weights);

  double test_acc = accuracy(g, res.weights, data, data.test);
  std::printf("epochs %zu best_epoch %d early_stopped %d test_accuracy %s\n",
              res.val_losses.size(), res.best_epoch, res.early_stopped ? 1 : 0,
              fmt(test_acc).c_str());
  std::printf("graph %s\nweights %s\n", cfg.paths.graph.c_str(),
              cfg.paths.weights.c_str());
  return 0;
}

int cmd_calibrate(const RunConfig& cfg) {
  auto mk = [](int c_in, int c_out, int k, int stride, int h, int w) {
    LayerSpec s;
    s.kind = LayerKind::Conv2d;
    s.c_in = c_in;
    s.c_out = c_out;
    s.kernel = k;
    s.stride = stride;
    s.input_shape = {c_in, h, w};
    return s;
  };
  // Spans the regimes the cost model must interpolate: channel widths 16-128,
  // spatial sizes 6-48, both kernel sizes, strides 1 and 2.
  std::vector<LayerSpec> grid = {
      mk(16, 32, 3, 1, 32, 32), mk(32, 32, 3, 2, 32, 32),
      mk(32, 64, 3, 1, 16, 16), mk(64, 64, 3, 2, 16, 16),
      mk(64, 128, 3, 1, 8, 8),  mk(32, 64, 1, 1, 16, 16),
      mk(64, 128, 1, 1, 8, 8),  mk(16, 16, 3, 1, 48, 48),
      mk(96, 96, 3, 1, 6, 6),   mk(48, 48, 3, 1, 20, 20)};

  auto samples =
      collect_latency_samples(grid, cfg.calibrate.ratios,
                              cfg.calibrate.repetitions, cfg.calibrate.seed);
  CostModel cm =
      calibrate(samples, cfg.calibrate.holdout, cfg.calibrate.split_seed);

  ensure_parent(cfg.paths.cost_model);
  save_cost_model(cm, cfg.paths.cost_model);

  std::printf("samples %d pooled_r2 %s\n", cm.total_samples,
              fmt(cm.pooled_r2).c_str());
  const char* ptype_names[3] = {"filter", "pattern", "block"};
  for (int pt = 0; pt < 3; ++pt) {
    for (int wf = 0; wf < 2; ++wf) {
      const CostArm& arm = cm.arm(static_cast<PruningType>(pt), wf == 1);
      if (!arm.calibrated) continue;
      std::printf("arm %s%s r2 %s samples %d\n", ptype_names[pt],
                  wf ? "+winograd" : "", fmt(arm.r2).c_str(), arm.samples);
    }
  }
  std::printf("cost_model %s\n", cfg.paths.cost_model.c_str());
  return 0;
}

int cmd_search(RunConfig cfg, bool synthetic) {
  // Synthetic evaluation is instant, so parallel workers buy nothing and
  // would make run-log record order completion-dependent. Default to the
  // single-worker deterministic mode unless the user asked for more.
  if (synthetic && cfg.search.workers == 0) cfg.search.workers = 1;

  SearchConfig scfg;
  scfg.steps = cfg.search.steps;
  scfg.samples_per_step = cfg.search.samples_per_step;
  scfg.measured_per_step = cfg.search.measured_per_step;
  scfg.workers = cfg.search.workers;
  scfg.seed = cfg.search.seed;
  scfg.gp_noise_var = cfg.search.gp_noise_var;
  ensure_parent(cfg.paths.run_log);
  scfg.run_log_path = cfg.paths.run_log;
  scfg.config_echo = run_config_to_json(cfg);

  if (synthetic) {
    SyntheticObjective obj = make_synthetic_objective(cfg.dataset.seed);
    ControllerState ctl =
        init_controller(cfg.controller, obj.space.class_vocabs,
                        cfg.search.seed);
    SearchResult res =
        search(ctl, obj.space, scfg, make_synthetic_evaluator(obj, cfg.controller));
    ensure_parent(cfg.paths.controller_checkpoint);
    save_controller(ctl, cfg.paths.controller_checkpoint);

    std::printf("measured %d best_reward %s optimum %s\n", res.measured,
                fmt(res.best.reward).c_str(), fmt(obj.optimum()).c_str());
    std::printf("run_log %s\ncontroller %s\n", cfg.paths.run_log.c_str(),
                cfg.paths.controller_checkpoint.c_str());
    return 0;
  }

  ModelGraph g = load_graph(cfg.paths.graph);
  ModelWeights base = load_weights(cfg.paths.weights);
  CostModel cm = load_cost_model(cfg.paths.cost_model);
  Dataset data =
      make_synthetic_dataset(cfg.dataset.train_count, cfg.dataset.test_count,
                             cfg.dataset.seed, cfg.dataset.image_size);
  TokenSpace space = build_token_space(g);
  ControllerState ctl =
      init_controller(cfg.controller, space.class_vocabs, cfg.search.seed);

  if (!cfg.paths.observations.empty()) {
    ensure_parent(cfg.paths.observations);
    std::filesystem::remove(cfg.paths.observations);  // stream is per-run
    scfg.observation_log_path = cfg.paths.observations;
  }
  scfg.baseline_tokens = tokenize(identity_scheme(g));

  Evaluator eval = [&](const std::vector<int>& tokens, std::uint64_t seed) {
    return evaluate_scheme(detokenize(tokens), g, base, data, cfg.train,
                           cfg.controller, cm, seed);
  };
  auto finalize = [&](const EvalRecord& best) {
    TrainConfig ft = cfg.train;
    ft.prune_finetune_epochs = cfg.search.final_finetune_epochs;
    ModelWeights tuned;
    ModelGraph tuned_graph;
    EvalRecord rec = evaluate_scheme(best.scheme, g, base, data, ft,
                                     cfg.controller, cm,
                                     cfg.search.seed ^ 0x51edULL, &tuned,
                                     &tuned_graph);
    rec.tokens = best.tokens;
    if (!rec.failed) {
      ensure_parent(cfg.paths.best_weights);
      save_weights(tuned, cfg.paths.best_weights);
      ensure_parent(cfg.paths.best_graph);
      save_graph(tuned_graph, cfg.paths.best_graph);
    }
    return rec;
  };

  SearchResult res = search(ctl, space, scfg, eval, finalize);
  ensure_parent(cfg.paths.controller_checkpoint);
  save_controller(ctl, cfg.paths.controller_checkpoint);

  std::printf("measured %d best_reward %s best_accuracy %s best_latency_ms %s\n",
              res.measured, fmt(res.best.reward).c_str(),
              fmt(res.best.accuracy).c_str(), fmt(res.best.latency_ms).c_str());
  std::printf("tuned %s\n", record_to_json(res.best_tuned).c_str());
  std::printf("run_log %s\nobservations %s\ncontroller %s\n",
              cfg.paths.run_log.c_str(), cfg.paths.observations.c_str(),
              cfg.paths.controller_checkpoint.c_str());
  if (!res.best_tuned.failed) {
    std::printf("best_weights %s\nbest_graph %s\n",
                cfg.paths.best_weights.c_str(), cfg.paths.best_graph.c_str());
  }
  return 0;
}

int cmd_eval_scheme(const RunConfig& cfg, const std::string& scheme_path) {
  UnifiedScheme scheme = scheme_from_json(slurp(scheme_path));
  ModelGraph g = load_graph(cfg.paths.graph);
  ModelWeights base = load_weights(cfg.paths.weights);
  CostModel cm = load_cost_model(cfg.paths.cost_model);
  Dataset data =
      make_synthetic_dataset(cfg.dataset.train_count, cfg.dataset.test_count,
                             cfg.dataset.seed, cfg.dataset.image_size);
  EvalRecord rec = evaluate_scheme(scheme, g, base, data, cfg.train,
                                   cfg.controller, cm, cfg.search.seed);
  std::printf("%s\n", record_to_json(rec).c_str());
  return 0;
}

int cmd_bench(const std::string& layer, const std::string& ptype_str,
              double ratio, bool winograd) {
  int v[6];
  char tail;
  if (std::sscanf(layer.c_str(), "%d,%d,%d,%d,%d,%d%c", &v[0], &v[1], &v[2],
                  &v[3], &v[4], &v[5], &tail) != 6)
    throw ConfigError("bad --layer '" + layer + "' (want cin,cout,k,stride,h,w)");
  for (int x : v)
    if (x <= 0) throw ConfigError("--layer fields must be positive: " + layer);

  LayerSpec spec;
  spec.id = 0;
  spec.kind = LayerKind::Conv2d;
  spec.c_in = v[0];
  spec.c_out = v[1];
  spec.kernel = v[2];
  spec.stride = v[3];
  spec.input_shape = {v[0], v[4], v[5]};
  if (spec.kernel != 1 && spec.kernel != 3)
    throw ConfigError("kernel must be 1 or 3");
  if (v[4] < spec.kernel || v[5] < spec.kernel)
    throw ConfigError("input smaller than the kernel");
  if (winograd && (spec.kernel != 3 || spec.stride != 1))
    throw ConfigError("winograd needs kernel 3 and stride 1");
  if (ratio < 0.0 || ratio >= 1.0)
    throw ConfigError("--ratio must be in [0, 1)");
  PruningType ptype = pruning_type_from_string(ptype_str);
  if (ptype == PruningType::Pattern && spec.kernel != 3)
    throw ConfigError("pattern pruning needs a 3x3 kernel");

  Rng rng(1);
  std::vector<double> w(dense_weight_count(spec));
  double scale = std::sqrt(2.0 / (spec.c_in * spec.kernel * spec.kernel));
  for (double& x : w) x = rng.normal() * scale;

  LatencyStats st;
  std::size_t bytes = dense_weight_bytes(spec);
  std::uint64_t kept = w.size();
  if (ratio > 0.0) {
    PruningMask mask = project(spec, w, ptype, ratio);
    apply_mask(w, mask);
    SparseWeights sparse = encode(spec, w, mask);
    bytes = encoded_bytes(sparse);
    kept = mask.keep.size() - mask.zeros();
    st = bench_layer(spec, w, &sparse, winograd, TuningParams{});
  } else {
    st = bench_layer(spec, w, nullptr, winograd, TuningParams{});
  }
  std::printf(
      "layer %s ptype %s ratio %s winograd %d kept %llu bytes %zu "
      "median_ms %s iqr_ms %s repetitions %d\n",
      layer.c_str(), to_string(ptype).c_str(), fmt(ratio).c_str(),
      winograd ? 1 : 0, static_cast<unsigned long long>(kept), bytes,
      fmt(st.median_ms).c_str(), fmt(st.iqr_ms).c_str(), st.repetitions);
  return 0;
}

int cmd_export(const std::string& runlog_path, const std::string& out_dir) {
  RunLog log = read_run_log(runlog_path);
  std::filesystem::create_directories(out_dir);

  std::string records_path = (std::filesystem::path(out_dir) / "records.csv").string();
  std::ofstream rec_out(records_path, std::ios::binary);
  if (!rec_out) throw IoError("cannot write " + records_path);
  rec_out << "index,provenance,failed,reward,accuracy,latency_ms,sparsity,"
             "wall_time_s,tokens\n";
  int idx = 0;
  for (const EvalRecord& r : log.records) {
    std::string tokens;
    for (std::size_t j = 0; j < r.tokens.size(); ++j) {
      if (j) tokens += ' ';
      tokens += std::to_string(r.tokens[j]);
    }
    rec_out << idx++ << ','
            << (r.provenance == RewardProvenance::Measured ? "measured"
                                                           : "surrogate")
            << ',' << (r.failed ? 1 : 0) << ',' << fmt(r.reward) << ','
            << fmt(r.accuracy) << ',' << fmt(r.latency_ms) << ','
            << fmt(r.sparsity) << ',' << fmt(r.wall_time_s) << ',' << tokens
            << '\n';
  }
  rec_out.close();

  // Best-so-far reward over measured evaluations, in log order. Failure
  // sentinels carry reward -1, so the curve is honest about bad stretches.
  std::string curve_path = (std::filesystem::path(out_dir) / "curve.csv").string();
  std::ofstream curve(curve_path, std::ios::binary);
  if (!curve) throw IoError("cannot write " + curve_path);
  curve << "eval_index,reward,best_reward,accuracy,latency_ms\n";
  int n_measured = 0;
  double best = 0.0;
  for (const EvalRecord& r : log.records) {
    if (r.provenance != RewardProvenance::Measured) continue;
    best = n_measured == 0 ? r.reward : std::max(best, r.reward);
    curve << n_measured++ << ',' << fmt(r.reward) << ',' << fmt(best) << ','
          << fmt(r.accuracy) << ',' << fmt(r.latency_ms) << '\n';
  }
  curve.close();

  std::printf("records %zu -> %s\nmeasured %d -> %s\n", log.records.size(),
              records_path.c_str(), n_measured, curve_path.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"compression scheme search for small conv nets"};
  app.require_subcommand(1);

  std::string config_path, scheme_path, layer_spec, ptype_str, runlog_path,
      out_dir;
  double ratio = 0.0;
  bool synthetic = false, winograd = false;
  int workers = 0;
  std::uint64_t seed = 0;

  CLI::App* train_cmd =
      app.add_subcommand("train-base", "train and checkpoint the base model");
  train_cmd->add_option("--config", config_path, "run config file")->required();

  CLI::App* cal_cmd = app.add_subcommand(
      "calibrate", "microbenchmark sweep and latency cost model fit");
  cal_cmd->add_option("--config", config_path, "run config file")->required();

  CLI::App* search_cmd =
      app.add_subcommand("search", "run the compression scheme search");
  search_cmd->add_option("--config", config_path, "run config file")->required();
  search_cmd->add_flag("--synthetic", synthetic,
                       "search the synthetic objective (no model needed)");
  CLI::Option* workers_opt = search_cmd->add_option(
      "--workers", workers, "evaluation threads (0 = all cores minus one)");
  CLI::Option* seed_opt =
      search_cmd->add_option("--seed", seed, "override the search seed");

  CLI::App* eval_cmd = app.add_subcommand(
      "eval-scheme", "evaluate one scheme and print its record");
  eval_cmd->add_option("--scheme", scheme_path, "scheme JSON file")->required();
  eval_cmd->add_option("--config", config_path, "run config file")->required();

  CLI::App* bench_cmd =
      app.add_subcommand("bench", "microbenchmark one layer configuration");
  bench_cmd->add_option("--layer", layer_spec, "cin,cout,k,stride,h,w")
      ->required();
  bench_cmd->add_option("--ptype", ptype_str, "filter|pattern|block")
      ->required();
  bench_cmd->add_option("--ratio", ratio, "pruning ratio in [0, 1)")
      ->required();
  bench_cmd->add_flag("--winograd", winograd, "transform-domain 3x3 kernel");

  CLI::App* export_cmd =
      app.add_subcommand("export", "write run log tables as CSV");
  export_cmd->add_option("--runlog", runlog_path, "run log file")->required();
  export_cmd->add_option("--out", out_dir, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::fprintf(stderr, "error: config: %s\n", one_line(e.what()).c_str());
    return 2;
  }

  try {
    if (*train_cmd) return cmd_train_base(load_run_config(config_path));
    if (*cal_cmd) return cmd_calibrate(load_run_config(config_path));
    if (*search_cmd) {
      RunConfig cfg = load_run_config(config_path);
      if (workers_opt->count()) cfg.search.workers = workers;
      if (seed_opt->count()) cfg.search.seed = seed;
      return cmd_search(std::move(cfg), synthetic);
    }
    if (*eval_cmd)
      return cmd_eval_scheme(load_run_config(config_path), scheme_path);
    if (*bench_cmd) return cmd_bench(layer_spec, ptype_str, ratio, winograd);
    if (*export_cmd) return cmd_export(runlog_path, out_dir);
    return 2;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: config: %s\n", one_line(e.what()).c_str());
    return 2;
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "error: numerical: %s\n", one_line(e.what()).c_str());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: runtime: %s\n", one_line(e.what()).c_str());
    return 3;
  }
}
