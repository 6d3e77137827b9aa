#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "upsearch/model_ir.hpp"
#include "upsearch/rng.hpp"

namespace upsearch {

// Parameters of one layer, all double precision.
//   Conv2d:          w laid out [c_out][c_in][k][k], bias [c_out]
//   DepthwiseConv2d: w laid out [c][1][k][k],        bias [c]
//   Dense:           w laid out [c_out][c_in],       bias [c_out]
//   BatchNorm:       gamma/beta/mean/var per channel, plus epsilon
struct LayerWeights {
  std::vector<double> w;
  std::vector<double> bias;
  std::vector<double> bn_gamma;
  std::vector<double> bn_beta;
  std::vector<double> bn_mean;
  std::vector<double> bn_var;
  double bn_eps = 1e-5;
};

struct ModelWeights {
  std::map<int, LayerWeights> layers;

  const LayerWeights& at(int id) const;
  LayerWeights& at(int id);
};

// Number of weight entries the spec's kind/shape implies.
std::size_t weight_numel(const LayerSpec& spec);

inline std::size_t conv_index(const LayerSpec& s, int o, int i, int r, int c) {
  int per_out = (s.kind == LayerKind::DepthwiseConv2d) ? 1 : s.c_in;
  return ((static_cast<std::size_t>(o) * per_out + i) * s.kernel + r) * s.kernel + c;
}

// He-normal init for conv/dense, identity-stats init for batch norm.
ModelWeights init_weights(const ModelGraph& graph, Rng& rng);

// Structural check: every layer present with the sizes the graph implies.
void check_weights(const ModelGraph& graph, const ModelWeights& weights);

// Versioned little-endian binary format; bit-exact round trip.
void save_weights(const ModelWeights& weights, const std::string& path);
ModelWeights load_weights(const std::string& path);

// Fuses Conv2d/DepthwiseConv2d -> BatchNorm pairs where the BatchNorm is the
// convolution's sole consumer, folding the normalization into the conv
// weights and bias using the stored running statistics. Repeats until no
// such pair remains; never changes outputs of the network in eval mode.
struct FuseResult {
  ModelGraph graph;
  ModelWeights weights;
  int fused_pairs = 0;
};
FuseResult fuse(const ModelGraph& graph, const ModelWeights& weights);

// In-place kernel replacement of one prunable convolution. Targets:
//   kernel 1: keep the layer id, weights take the center tap of each 3x3
//             kernel (or zero-pad a 1x1 back to 3x3 center for the inverse).
//   kernel 3: inverse of the above.
//   depthwise pair: the layer becomes DW 3x3 (fresh id, original stride)
//             followed by a 1x1 conv that keeps the original id and bias;
//             DW kernels are the per-input-channel mean of the original
//             kernels, the 1x1 takes per-(in,out) kernel sums, scaled so the
//             composed map matches the original tensor's Frobenius norm.
// The replaced layers inherit the original scheme_slot.
enum class ReplacementTarget { Conv1x1, Conv3x3, DepthwisePair };

struct ReplaceResult {
  ModelGraph graph;
  ModelWeights weights;
  std::vector<int> new_layer_ids;  // layers now realizing the slot, in order
};
ReplaceResult replace_kernel(const ModelGraph& graph, const ModelWeights& weights,
                             int layer_id, ReplacementTarget target);

}  // namespace upsearch
