#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "upsearch/controller.hpp"
#include "upsearch/cost_model.hpp"
#include "upsearch/model_ir.hpp"
#include "upsearch/scheme.hpp"
#include "upsearch/trainer.hpp"
#include "upsearch/weights.hpp"

namespace upsearch {

// One scheme evaluation, as appended to the run log. `tokens` is the
// controller-facing identity of the scheme; evaluations made outside a
// tokenized search (the eval-scheme command) leave it empty. `measured_ms`
// is a wall-clock benchmark when one was taken, -1 otherwise.
struct EvalRecord {
  std::vector<int> tokens;
  UnifiedScheme scheme;
  bool has_scheme = false;
  double accuracy = 0.0;
  double latency_ms = 0.0;
  double measured_ms = -1.0;
  double reward = 0.0;
  RewardProvenance provenance = RewardProvenance::Measured;
  double sparsity = 0.0;
  double wall_time_s = 0.0;
  bool failed = false;
  std::string note;

  bool operator==(const EvalRecord&) const = default;
};

// Single-line JSON, suitable for an append-only run log.
std::string record_to_json(const EvalRecord& rec);
EvalRecord record_from_json(const std::string& line);

// Full measured pipeline: kernel replacements + short fine-tune, pruning by
// the scheme's method, masked fine-tune with the latency estimate computed
// concurrently, then test accuracy and reward. Any failure along the way
// (invalid scheme, numerical blowup) degrades to a reward -1 sentinel record
// with failed=true instead of throwing, so a search can learn to avoid the
// scheme. On success tuned_out/graph_out (if given) receive the fine-tuned
// weights and the transformed graph.
EvalRecord evaluate_scheme(const UnifiedScheme& scheme, const ModelGraph& graph,
                           const ModelWeights& base_weights, const Dataset& data,
                           const TrainConfig& tcfg, const ControllerConfig& rcfg,
                           const CostModel& cm, std::uint64_t seed,
                           ModelWeights* tuned_out = nullptr,
                           ModelGraph* graph_out = nullptr);

}  // namespace upsearch
