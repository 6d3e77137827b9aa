#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "upsearch/model_ir.hpp"
#include "upsearch/pruning.hpp"
#include "upsearch/scheme.hpp"

namespace upsearch {

// min ||A x - b||_2 subject to x >= 0, solved with the active-set method.
// a is row-major [rows][cols]. Converges in finitely many steps; the guard
// against cycling throws NumericalError.
std::vector<double> nnls(const std::vector<double>& a, int rows, int cols,
                         const std::vector<double>& b, double tol = 1e-10);

// One host measurement of a layer configuration.
struct LatencySample {
  LayerSpec spec;
  PruningType ptype = PruningType::Filter;
  bool winograd = false;
  std::uint64_t kept_entries = 0;  // surviving weights
  std::uint64_t sparse_bytes = 0;  // encoded weight container size
  double measured_ms = 0.0;
};

// Linear predictor for one (pruning type, winograd) execution arm:
//   t = c0 + c1 * bytes_moved + c2 * effective_macs + c3 * transform_tiles
// NNLS keeps every coefficient nonnegative, so a prediction can never rise
// when a scheme removes work.
struct CostArm {
  bool calibrated = false;
  std::array<double, 4> c{0.0, 0.0, 0.0, 0.0};
  double r2 = 0.0;  // holdout fit quality
  int samples = 0;
};

struct CostModel {
  std::array<std::array<CostArm, 2>, 3> arms{};  // [ptype][winograd]
  double pooled_r2 = 0.0;
  int total_samples = 0;

  const CostArm& arm(PruningType ptype, bool winograd) const;
  CostArm& arm(PruningType ptype, bool winograd);
};

// Feature vector {1, bytes_moved, effective_macs, transform_tiles}.
// bytes_moved is the weight container plus both activation tensors at 8
// bytes per element. Effective MACs are kept weights times output pixels,
// scaled by 16/36 on the winograd path (2x2 output tiles cost 16 products
// where direct costs 36). The tile feature counts input plus output tile
// transforms and is zero off the winograd path.
std::array<double, 4> cost_features(const LayerSpec& spec,
                                    std::uint64_t kept_entries,
                                    std::uint64_t sparse_bytes, bool winograd);

// Dense fallbacks for layers without a usable sparse encoding.
std::uint64_t dense_weight_count(const LayerSpec& spec);
std::uint64_t dense_weight_bytes(const LayerSpec& spec);

// Grid measurement over layers x pruning types x ratios x winograd flag.
// Combinations a format cannot express are skipped (pattern off 3x3 kernels,
// winograd off stride-1 3x3 stages); masks with no zeros run the dense
// kernel so every arm sees its ratio-0 anchor.
std::vector<LatencySample> collect_latency_samples(
    const std::vector<LayerSpec>& layers, const std::vector<double>& ratios,
    int repetitions = 30, std::uint64_t seed = 7);

// Fits every arm holding at least 8 samples on a seeded 80/20 split and
// scores it on the held-out fifth. Under 20 samples in total is a
// ConfigError; a fitted arm whose design is rank deficient over its active
// features is a ConfigError naming the arm. Arms under the per-arm minimum
// stay uncalibrated.
CostModel calibrate(const std::vector<LatencySample>& samples,
                    double holdout = 0.2, std::uint64_t seed = 17);

struct LatencyEstimate {
  std::map<int, double> per_layer_ms;  // layer id -> predicted ms
  double total_ms = 0.0;
};

// Predicts scheme latency layer by layer. Slot layers use their action's
// (ptype, winograd) arm with winograd gated on per-layer eligibility;
// layers whose mask is missing or has no zeros take dense features; layers
// outside any slot take the dense (filter, direct) arm. BatchNorm and ReLU
// cost nothing. Touching an uncalibrated arm is a ConfigError.
LatencyEstimate estimate(const ModelGraph& graph, const UnifiedScheme& scheme,
                         const std::map<int, PruningMask>& masks,
                         const CostModel& cm);

void save_cost_model(const CostModel& cm, const std::string& path);
CostModel load_cost_model(const std::string& path);

}  // namespace upsearch
