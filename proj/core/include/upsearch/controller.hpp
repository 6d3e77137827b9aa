#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "upsearch/model_ir.hpp"
#include "upsearch/scheme.hpp"

namespace upsearch {

// Policy/training hyperparameters. Defaults are the frozen configuration;
// alpha is the latency penalty per millisecond over the threshold.
struct ControllerConfig {
  int hidden_size = 49;
  int num_layers = 2;
  double init_range = 0.1;
  double learning_rate = 5e-4;
  double alpha = 0.01;
  double latency_threshold_ms = 100.0;
  int batch = 50;
  double ema_decay = 0.95;
  double grad_clip = 5.0;
};

enum class RewardProvenance { Measured, Surrogate };

struct Reward {
  double accuracy = 0.0;
  double latency_ms = 0.0;
  double value = 0.0;
  RewardProvenance provenance = RewardProvenance::Measured;
};

// value = accuracy - alpha * max(0, latency_ms - threshold), tagged Measured.
Reward compute_reward(double accuracy, double latency_ms,
                      const ControllerConfig& cfg);

// Policy parameters live in one flat vector so optimizer state, gradient
// checks, and checkpoints all address the same storage:
//   [start embedding | per-class embedding tables | per-layer LSTM
//    (Wx, Wh, bias) | per-class output heads (W, bias)]
// Embedding width equals hidden_size; heads are shared across layers.
struct ControllerState {
  ControllerConfig cfg;
  std::vector<int> class_vocabs;
  std::vector<double> theta;
  std::vector<double> adam_m;
  std::vector<double> adam_v;
  double baseline = 0.0;
  bool baseline_initialized = false;
  std::uint64_t step = 0;
};

int controller_param_count(const ControllerConfig& cfg,
                           const std::vector<int>& class_vocabs);

// Uniform init in [-init_range, init_range]; validates config invariants.
ControllerState init_controller(const ControllerConfig& cfg,
                                const std::vector<int>& class_vocabs,
                                std::uint64_t seed);

struct SampledSequence {
  std::vector<int> tokens;
  std::vector<double> log_probs;  // one per position, under the masked softmax
  double total_log_prob = 0.0;
};

// Autoregressive masked sampling over a token space. Read-only on state, so
// concurrent callers may share a snapshot. Throws ConfigError if every token
// is masked at some position and ShapeError when vocabularies disagree.
SampledSequence sample_tokens(const ControllerState& state,
                              const TokenSpace& space, std::uint64_t seed);

// Convenience wrapper for the real space: sample on build_token_space(graph)
// and decode. The result always passes validate against the graph.
std::pair<UnifiedScheme, SampledSequence> sample(const ControllerState& state,
                                                 const ModelGraph& graph,
                                                 std::uint64_t seed);

// Per-position log-probabilities of a fixed token sequence under the current
// parameters (forward only). Masked tokens get their masked-softmax value,
// about -1e9, so exp() underflows to exactly zero.
std::vector<double> sequence_log_probs(const ControllerState& state,
                                       const TokenSpace& space,
                                       const std::vector<int>& tokens);

// Weighted score-function gradient: d/dtheta of
//   sum_entries weight * log P(tokens; theta),
// computed by backprop through the unrolled LSTM. Flat layout matches theta.
struct WeightedSequence {
  std::vector<int> tokens;
  double weight = 1.0;
};
std::vector<double> policy_gradient(const ControllerState& state,
                                    const TokenSpace& space,
                                    const std::vector<WeightedSequence>& batch);

// Scales v to max_norm when its L2 norm exceeds it; returns the norm before
// scaling.
double clip_global_norm(std::vector<double>& v, double max_norm);

struct BatchEntry {
  std::vector<int> tokens;
  std::vector<double> log_probs;  // as returned at sample time (diagnostics)
  Reward reward;
};

// One REINFORCE ascent step: advantage = reward - baseline (baseline seeds
// from the first batch mean), gradient averaged over the batch, clipped at
// grad_clip, applied via Adam(learning_rate); afterwards the baseline EMA
// absorbs the batch mean and the step counter increments.
void reinforce_update(ControllerState& state, const TokenSpace& space,
                      const std::vector<BatchEntry>& batch);

// Versioned binary checkpoint; round trips restore bit-identical sampling.
void save_controller(const ControllerState& state, const std::string& path);
ControllerState load_controller(const std::string& path);
void save_controller(const ControllerState& state, std::ostream& os);
ControllerState load_controller(std::istream& is);

}  // namespace upsearch
