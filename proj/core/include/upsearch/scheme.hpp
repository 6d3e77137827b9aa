#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "upsearch/model_ir.hpp"

namespace upsearch {

// Unified per-layer compression actions. Enum values double as token values,
// so the integer encodings below are load-bearing and frozen.
enum class KernelChoice : int { Conv1x1 = 0, Conv3x3 = 1, Dw3x3Then1x1 = 2 };
enum class PruningMethod : int { Magnitude = 0, Admm = 1 };
enum class PruningType : int { Filter = 0, Pattern = 1, Block = 2 };

// Ratio 0 means "skip pruning".
inline constexpr std::array<double, 6> kPruningRatios{0.0, 0.3, 0.5, 0.7, 0.8, 0.9};

int ratio_index(double ratio);            // throws ShapeError when not in the set
double ratio_from_index(int index);

std::string to_string(KernelChoice k);
std::string to_string(PruningMethod m);
std::string to_string(PruningType t);
KernelChoice kernel_choice_from_string(const std::string& s);
PruningMethod pruning_method_from_string(const std::string& s);
PruningType pruning_type_from_string(const std::string& s);

struct LayerActions {
  KernelChoice kernel = KernelChoice::Conv3x3;
  bool winograd = false;
  PruningType ptype = PruningType::Filter;
  double ratio = 0.0;

  bool operator==(const LayerActions&) const = default;
};

// One point of the search space: a global pruning method plus per-layer
// actions, ordered by scheme slot.
struct UnifiedScheme {
  PruningMethod method = PruningMethod::Magnitude;
  std::vector<LayerActions> per_layer;

  bool operator==(const UnifiedScheme&) const = default;
};

// Token position classes. All layers share one output head / embedding table
// per class, so identical actions at the same class compare equal everywhere.
enum PositionClass : int {
  kClassMethod = 0,
  kClassKernel = 1,
  kClassWinograd = 2,
  kClassPtype = 3,
  kClassRatio = 4,
};
inline constexpr int kNumPositionClasses = 5;

// Vocabulary sizes per class for the real search space.
inline constexpr std::array<int, kNumPositionClasses> kClassVocab{2, 3, 2, 3, 6};

// Sequential decision space the controller samples from: a flat list of
// token positions with per-class vocabularies and a prefix-dependent
// validity mask. Custom spaces (tests, synthetic fixtures) fill the fields
// directly; the real space is derived from a model graph.
struct TokenSpace {
  struct Position {
    int class_id = 0;
    int vocab = 0;
    int layer = -1;  // scheme slot index; -1 for layer-independent positions
  };

  std::vector<Position> positions;
  std::vector<int> class_vocabs;
  std::vector<std::uint8_t> layer_winograd_capable;  // per slot: 3x3 stride-1 placement

  // Optional override for custom spaces; when set it fully defines validity.
  std::function<std::vector<std::uint8_t>(int, const std::vector<int>&)> custom_mask;

  int size() const { return static_cast<int>(positions.size()); }
  int num_layers() const;

  // Valid-token mask for a position given the already-sampled prefix.
  // Real-space rules: winograd=1 only when the layer's chosen kernel keeps a
  // 3x3 stage and the placement is stride-1; Pattern only when the chosen
  // kernel keeps a 3x3 stage.
  std::vector<std::uint8_t> valid_mask(int position, const std::vector<int>& prefix) const;

  // Distinct schemes this space admits under the masks.
  std::uint64_t count_valid() const;
};

// Token space of a model graph: [method] + per prunable slot
// [kernel, winograd, ptype, ratio].
TokenSpace build_token_space(const ModelGraph& graph);

// Scheme <-> token array. Token layout matches build_token_space ordering.
std::vector<int> tokenize(const UnifiedScheme& scheme);
UnifiedScheme detokenize(const std::vector<int>& tokens);

// Structural violations of a scheme against a graph. Throws ShapeError when
// the layer count does not match the graph's slots; otherwise returns
// human-readable violations (empty means valid). A scheme is valid exactly
// when masked sampling could have produced it.
std::vector<std::string> validate(const UnifiedScheme& scheme, const ModelGraph& graph);

// Labeled path DAG over the scheme's tokens, used by the graph kernel.
// Node labels encode (position class, token); graphs from distinct schemes
// differ in at least one label.
struct SchemeGraph {
  std::vector<int> labels;
  std::vector<std::pair<int, int>> edges;

  bool operator==(const SchemeGraph&) const = default;
};
SchemeGraph to_graph(const UnifiedScheme& scheme);

int scheme_node_label(int class_id, int token);

// Structured-text serialization; round trips are exact.
std::string scheme_to_json(const UnifiedScheme& scheme);
UnifiedScheme scheme_from_json(const std::string& text);

}  // namespace upsearch
