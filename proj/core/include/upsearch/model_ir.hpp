#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "upsearch/errors.hpp"

namespace upsearch {

struct TensorShape {
  int channels = 0;
  int height = 0;
  int width = 0;

  bool operator==(const TensorShape&) const = default;
  long long numel() const {
    return static_cast<long long>(channels) * height * width;
  }
};

enum class LayerKind { Conv2d, DepthwiseConv2d, Dense, BatchNorm, ReLU };

std::string to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& s);

// One node of the model graph. Convolutions use square kernels (n in {1, 3})
// and symmetric zero padding of (n - 1) / 2, so stride-1 layers preserve
// spatial dims. Non-conv kinds keep kernel = 0 and stride = 1.
//
// scheme_slot links a prunable convolution to its position in a compression
// scheme; kernel replacement can split one slot across two layers, which then
// share the slot id. -1 means the layer takes no scheme actions.
struct LayerSpec {
  int id = -1;
  LayerKind kind = LayerKind::Conv2d;
  int c_in = 0;
  int c_out = 0;
  int kernel = 0;
  int stride = 1;
  TensorShape input_shape;
  bool prunable = false;
  int scheme_slot = -1;

  bool operator==(const LayerSpec&) const = default;
};

// Directed graph over layer ids. Layers are kept in topological order.
struct ModelGraph {
  std::vector<LayerSpec> layers;
  std::vector<std::pair<int, int>> edges;  // producer id -> consumer id

  const LayerSpec& layer(int id) const;
  LayerSpec& layer(int id);
  bool has_layer(int id) const;
  std::vector<int> consumers(int id) const;
  std::vector<int> producers(int id) const;
  int max_layer_id() const;

  // Prunable Conv2d ids in layer order; these carry scheme actions.
  std::vector<int> prunable_layer_ids() const;

  // Distinct scheme slots in ascending order.
  std::vector<int> scheme_slots() const;
  std::vector<int> layers_of_slot(int slot) const;

  // Throws ShapeError when the graph is malformed: duplicate or dangling ids,
  // cycles, non-square kernels outside {1, 3}, depthwise channel mismatch,
  // channel or spatial disagreement along edges, or no prunable layer.
  void validate() const;
};

// Output shape of a single layer applied to its input_shape.
TensorShape output_shape(const LayerSpec& spec);

// Multiply-accumulate count of one layer (0 for BatchNorm / ReLU).
std::uint64_t mac_count(const LayerSpec& spec);

std::uint64_t total_macs(const ModelGraph& graph);

// Recomputes every input_shape by propagating the entry layers' shapes
// through the edges. Throws ShapeError on disagreement between producers.
void propagate_shapes(ModelGraph& graph);

// Assigns scheme_slot 0..P-1 to the prunable convolutions in layer order.
void assign_scheme_slots(ModelGraph& graph);

// Serialization to a stable structured-text document; integer fields only,
// so round trips are exact.
std::string graph_to_json(const ModelGraph& graph);
ModelGraph graph_from_json(const std::string& text);
void save_graph(const ModelGraph& graph, const std::string& path);
ModelGraph load_graph(const std::string& path);

}  // namespace upsearch
