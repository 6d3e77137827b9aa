#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "upsearch/controller.hpp"
#include "upsearch/evaluate.hpp"
#include "upsearch/graph_bo.hpp"
#include "upsearch/scheme.hpp"

namespace upsearch {

// Evaluates one token sequence. Must be deterministic in (tokens, seed) for
// single-worker reproducibility and thread-safe when workers > 1. Thrown
// exceptions become failure-sentinel records; the search keeps going.
using Evaluator =
    std::function<EvalRecord(const std::vector<int>&, std::uint64_t)>;

struct SearchConfig {
  int steps = 10;
  int samples_per_step = 50;   // schemes drawn from the controller per step
  int measured_per_step = 10;  // schemes sent to real evaluation per step
  int workers = 0;             // 0: available parallelism - 1, floored at 1
  std::uint64_t seed = 1;
  double gp_noise_var = 1e-4;
  WLConfig wl;
  std::string run_log_path;          // empty: log kept in memory only
  std::string observation_log_path;  // empty: no observation log
  std::vector<int> baseline_tokens;  // evaluated before step 1 when set
  std::string config_echo;           // JSON object echoed into the log header
  std::function<void(int, const ControllerState&)> on_step;
};

struct SearchResult {
  EvalRecord best;        // best measured record (non-failed preferred)
  EvalRecord best_tuned;  // finalize(best) when a finalizer was given
  std::vector<EvalRecord> log;  // run log contents, in append order
  int measured = 0;
};

// Path graph of (position class, token) labels for the graph kernel. On a
// space built from a model graph this equals to_graph(detokenize(tokens)).
SchemeGraph tokens_to_graph(const TokenSpace& space,
                            const std::vector<int>& tokens);

// One search run. Per step: sample `samples_per_step` sequences from the
// current controller, pick `measured_per_step` of them by expected
// improvement (everyone gets the posterior mean as a surrogate reward, and
// sampling order is kept when the two sizes are equal since there is nothing
// to rank), evaluate the picked ones across the workers, make a single
// policy update from all samples, then refit the surrogate on every measured
// record so far. Worker failures turn into reward -1 sentinel records. With
// one worker the run log (header + records) is a pure function of the
// configuration: wall times are zeroed and all seeds come from one master
// stream. `finalize` (e.g. a longer fine-tune) runs once on the best
// non-failed record.
SearchResult search(ControllerState& controller, const TokenSpace& space,
                    const SearchConfig& cfg, const Evaluator& evaluate,
                    const std::function<EvalRecord(const EvalRecord&)>&
                        finalize = nullptr);

struct RunLog {
  std::string header_json;
  std::vector<EvalRecord> records;
};

// Parses a run log written by search(); first line must be the header.
RunLog read_run_log(const std::string& path);

// Closed-form objective over a five-position token space with 720 valid
// schemes: per-position utilities plus adjacent-pair interactions, scaled
// into [0, 1]. Small enough to brute-force, structured enough that greedy
// per-position choices are not optimal.
struct SyntheticObjective {
  TokenSpace space;
  std::vector<std::vector<double>> unary;     // [position][token]
  std::vector<std::vector<double>> pairwise;  // [position][a * next_vocab + b]

  double value(const std::vector<int>& tokens) const;
  std::vector<int> argmax() const;  // exhaustive enumeration
  double optimum() const { return value(argmax()); }
};

SyntheticObjective make_synthetic_objective(std::uint64_t seed);

// Measured-provenance evaluator whose accuracy is the objective value and
// whose latency sits exactly at the penalty threshold, so reward == value.
Evaluator make_synthetic_evaluator(const SyntheticObjective& obj,
                                   const ControllerConfig& rcfg);

}  // namespace upsearch
