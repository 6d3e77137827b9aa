#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <vector>

#include "upsearch/model_ir.hpp"
#include "upsearch/scheme.hpp"
#include "upsearch/weights.hpp"

namespace upsearch {

// Keep-mask over one layer's weight tensor, flat in the weight layout.
struct PruningMask {
  std::vector<std::uint8_t> keep;  // 1 = weight survives
  PruningType ptype = PruningType::Filter;
  double requested_ratio = 0.0;
  double achieved_ratio = 0.0;  // zero entries / total entries

  std::size_t zeros() const;
};

// Counts of blocks along the input / output channel dimensions.
struct BlockSpec {
  int b_in = 4;
  int b_out = 4;
};

// Clamps the requested counts to the channel extents, then lowers each to
// the nearest divisor so blocks tile the tensor exactly.
BlockSpec make_block_spec(int c_in, int c_out, int b_in = 4, int b_out = 4);

// Up to max_patterns distinct 3x3 cell masks, exactly 4 set bits each.
// Bit i covers kernel cell i in row-major order.
struct PatternLibrary {
  std::vector<std::uint16_t> masks;
};

// Library of the layer's most frequent per-kernel top-4-magnitude masks,
// most frequent first; count ties break toward the smaller mask value.
PatternLibrary build_pattern_library(const LayerSpec& spec,
                                     const std::vector<double>& w,
                                     int max_patterns = 8);

// Zeroes the round(ratio * c_out) output filters of smallest L2 norm, lower
// index first on ties. Throws ShapeError when that would empty the layer.
PruningMask project_filter(const LayerSpec& spec, const std::vector<double>& w,
                           double ratio);

// Every kernel keeps the 4 cells of the library pattern best overlapping its
// own top-4 magnitude cells (ties: lowest library index); then whole kernels
// are zeroed in ascending masked-L2 order until the pruned fraction reaches
// max(ratio, 5/9), always keeping at least one kernel per output filter.
// The 5/9 floor is structural: the pattern stage alone removes 5 of 9 cells.
PruningMask project_pattern(const LayerSpec& spec, const std::vector<double>& w,
                            double ratio, const PatternLibrary& lib);

// Each block keeps the max(1, round((1 - ratio) * k^2)) kernel cells with
// the largest summed squared magnitude over the block (ties: row-major
// order); kernels inside one block share the mask bit-identically.
// Degenerates to a no-op on 1x1 kernels.
PruningMask project_block(const LayerSpec& spec, const std::vector<double>& w,
                          double ratio, const BlockSpec& bs);

// Dispatch on ptype, with the pattern library and block spec derived from
// the layer itself.
PruningMask project(const LayerSpec& spec, const std::vector<double>& w,
                    PruningType ptype, double ratio);

// Zeroes masked entries in place; idempotent.
void apply_mask(std::vector<double>& w, const PruningMask& mask);

// Layers of a slot that a pruning type touches. A depthwise pair splits the
// action: Filter prunes the pointwise stage, Pattern the depthwise stage,
// Block both.
std::vector<int> pruned_layers_of_slot(const ModelGraph& graph, int slot,
                                       PruningType ptype);

struct SparsityReport {
  std::map<int, double> per_layer;  // layer id -> pruned fraction
  double overall = 0.0;             // parameter-weighted over masked layers
};

SparsityReport sparsity_report(const ModelGraph& graph,
                               const std::map<int, PruningMask>& masks);

struct AdmmConfig {
  double rho = 1e-3;
  int prune_epochs = 5;
  int finetune_epochs = 10;
};

// One primal pass on loss(W) + (rho/2) sum_l ||W_l - Z_l + U_l||_F^2 over
// the whole model. Production supplies a one-epoch SGD closure from the
// trainer; tests substitute closed-form quadratic minimizers.
using WStep = std::function<void(ModelWeights& weights,
                                 const std::map<int, std::vector<double>>& z,
                                 const std::map<int, std::vector<double>>& u)>;

// Projects trained weights directly, one projection per touched layer.
// Masked entries become exactly 0. Requires scheme.method == Magnitude.
std::map<int, PruningMask> magnitude_prune(const ModelGraph& graph,
                                           ModelWeights& weights,
                                           const UnifiedScheme& scheme);

// Alternating W / Z / U rounds: the W-step closure, then Z = projection of
// W + U under each layer's ptype/ratio, then U += W - Z. After prune_epochs
// rounds the projection of W + U is hard-applied to W; with zero rounds that
// reduces to the magnitude masks. Throws NumericalError when a W-step leaves
// non-finite weights. Requires scheme.method == Admm.
std::map<int, PruningMask> admm_prune(const ModelGraph& graph,
                                      ModelWeights& weights,
                                      const UnifiedScheme& scheme,
                                      const AdmmConfig& cfg,
                                      const WStep& w_step);

}  // namespace upsearch
