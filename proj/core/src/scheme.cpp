#include "upsearch/scheme.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

namespace upsearch {

using nlohmann::json;

int ratio_index(double ratio) {
  for (std::size_t i = 0; i < kPruningRatios.size(); ++i)
    if (kPruningRatios[i] == ratio) return static_cast<int>(i);
  throw ShapeError("pruning ratio " + std::to_string(ratio) + " is not in the search space");
}

double ratio_from_index(int index) {
  if (index < 0 || index >= static_cast<int>(kPruningRatios.size()))
    throw ShapeError("ratio token " + std::to_string(index) + " out of range");
  return kPruningRatios[static_cast<std::size_t>(index)];
}

std::string to_string(KernelChoice k) {
  switch (k) {
    case KernelChoice::Conv1x1: return "1x1";
    case KernelChoice::Conv3x3: return "3x3";
    case KernelChoice::Dw3x3Then1x1: return "dw3x3_1x1";
  }
  throw ShapeError("unknown kernel choice");
}

std::string to_string(PruningMethod m) {
  switch (m) {
    case PruningMethod::Magnitude: return "magnitude";
    case PruningMethod::Admm: return "admm";
  }
  throw ShapeError("unknown pruning method");
}

std::string to_string(PruningType t) {
  switch (t) {
    case PruningType::Filter: return "filter";
    case PruningType::Pattern: return "pattern";
    case PruningType::Block: return "block";
  }
  throw ShapeError("unknown pruning type");
}

KernelChoice kernel_choice_from_string(const std::string& s) {
  if (s == "1x1") return KernelChoice::Conv1x1;
  if (s == "3x3") return KernelChoice::Conv3x3;
  if (s == "dw3x3_1x1") return KernelChoice::Dw3x3Then1x1;
  throw IoError("unknown kernel choice: " + s);
}

PruningMethod pruning_method_from_string(const std::string& s) {
  if (s == "magnitude") return PruningMethod::Magnitude;
  if (s == "admm") return PruningMethod::Admm;
  throw IoError("unknown pruning method: " + s);
}

PruningType pruning_type_from_string(const std::string& s) {
  if (s == "filter") return PruningType::Filter;
  if (s == "pattern") return PruningType::Pattern;
  if (s == "block") return PruningType::Block;
  throw IoError("unknown pruning type: " + s);
}

namespace {

// Chosen kernel form keeps a 3x3 convolution stage.
bool keeps_3x3(int kernel_token) {
  return kernel_token == static_cast<int>(KernelChoice::Conv3x3) ||
         kernel_token == static_cast<int>(KernelChoice::Dw3x3Then1x1);
}

}  // namespace

int TokenSpace::num_layers() const {
  int m = -1;
  for (const auto& p : positions) m = std::max(m, p.layer);
  return m + 1;
}

std::vector<std::uint8_t> TokenSpace::valid_mask(int position,
                                                 const std::vector<int>& prefix) const {
  const Position& pos = positions.at(static_cast<std::size_t>(position));
  if (custom_mask) return custom_mask(position, prefix);

  std::vector<std::uint8_t> mask(static_cast<std::size_t>(pos.vocab), 1);
  if (pos.layer < 0) return mask;

  // Locate the kernel token already sampled for this layer, if any.
  int kernel_token = -1;
  for (int q = 0; q < position; ++q) {
    if (positions[static_cast<std::size_t>(q)].layer == pos.layer &&
        positions[static_cast<std::size_t>(q)].class_id == kClassKernel)
      kernel_token = prefix.at(static_cast<std::size_t>(q));
  }

  if (pos.class_id == kClassWinograd) {
    bool capable = pos.layer < static_cast<int>(layer_winograd_capable.size()) &&
                   layer_winograd_capable[static_cast<std::size_t>(pos.layer)] != 0;
    if (!capable || kernel_token < 0 || !keeps_3x3(kernel_token)) mask[1] = 0;
  } else if (pos.class_id == kClassPtype) {
    if (kernel_token < 0 || !keeps_3x3(kernel_token))
      mask[static_cast<std::size_t>(PruningType::Pattern)] = 0;
  }
  return mask;
}

std::uint64_t TokenSpace::count_valid() const {
  // Depth-first walk over the masked prefix tree.
  std::uint64_t count = 0;
  std::vector<int> prefix;
  std::function<void(int)> walk = [&](int pos) {
    if (pos == size()) {
      ++count;
      return;
    }
    std::vector<std::uint8_t> mask = valid_mask(pos, prefix);
    for (int t = 0; t < positions[static_cast<std::size_t>(pos)].vocab; ++t) {
      if (!mask[static_cast<std::size_t>(t)]) continue;
      prefix.push_back(t);
      walk(pos + 1);
      prefix.pop_back();
    }
  };
  walk(0);
  return count;
}

TokenSpace build_token_space(const ModelGraph& graph) {
  TokenSpace space;
  space.class_vocabs.assign(kClassVocab.begin(), kClassVocab.end());
  space.positions.push_back({kClassMethod, kClassVocab[kClassMethod], -1});
  std::vector<int> slots = graph.scheme_slots();
  for (int slot : slots) {
    space.positions.push_back({kClassKernel, kClassVocab[kClassKernel], slot});
    space.positions.push_back({kClassWinograd, kClassVocab[kClassWinograd], slot});
    space.positions.push_back({kClassPtype, kClassVocab[kClassPtype], slot});
    space.positions.push_back({kClassRatio, kClassVocab[kClassRatio], slot});
  }
  space.layer_winograd_capable.assign(slots.size(), 0);
  for (std::size_t i = 0; i < slots.size(); ++i) {
    // Winograd placement needs a stride-1 position; the kernel form itself is
    // decided by the sampled kernel token.
    std::vector<int> ids = graph.layers_of_slot(slots[i]);
    bool stride1 = true;
    for (int id : ids)
      if (graph.layer(id).stride != 1) stride1 = false;
    space.layer_winograd_capable[i] = stride1 ? 1 : 0;
  }
  return space;
}

std::vector<int> tokenize(const UnifiedScheme& scheme) {
  std::vector<int> tokens;
  tokens.reserve(1 + 4 * scheme.per_layer.size());
  tokens.push_back(static_cast<int>(scheme.method));
  for (const LayerActions& a : scheme.per_layer) {
    tokens.push_back(static_cast<int>(a.kernel));
    tokens.push_back(a.winograd ? 1 : 0);
    tokens.push_back(static_cast<int>(a.ptype));
    tokens.push_back(ratio_index(a.ratio));
  }
  return tokens;
}

UnifiedScheme detokenize(const std::vector<int>& tokens) {
  if (tokens.empty() || (tokens.size() - 1) % 4 != 0)
    throw ShapeError("token array length " + std::to_string(tokens.size()) +
                     " does not encode a scheme");
  auto check = [](int v, int vocab, const char* what) {
    if (v < 0 || v >= vocab)
      throw ShapeError(std::string(what) + " token " + std::to_string(v) + " out of range");
  };
  UnifiedScheme s;
  check(tokens[0], kClassVocab[kClassMethod], "method");
  s.method = static_cast<PruningMethod>(tokens[0]);
  std::size_t layers = (tokens.size() - 1) / 4;
  for (std::size_t l = 0; l < layers; ++l) {
    const int* t = &tokens[1 + 4 * l];
    check(t[0], kClassVocab[kClassKernel], "kernel");
    check(t[1], kClassVocab[kClassWinograd], "winograd");
    check(t[2], kClassVocab[kClassPtype], "ptype");
    check(t[3], kClassVocab[kClassRatio], "ratio");
    LayerActions a;
    a.kernel = static_cast<KernelChoice>(t[0]);
    a.winograd = t[1] != 0;
    a.ptype = static_cast<PruningType>(t[2]);
    a.ratio = ratio_from_index(t[3]);
    s.per_layer.push_back(a);
  }
  return s;
}

std::vector<std::string> validate(const UnifiedScheme& scheme, const ModelGraph& graph) {
  std::vector<int> slots = graph.scheme_slots();
  if (scheme.per_layer.size() != slots.size())
    throw ShapeError("scheme has " + std::to_string(scheme.per_layer.size()) +
                     " layers but the graph has " + std::to_string(slots.size()) + " slots");

  std::vector<std::string> violations;
  for (std::size_t i = 0; i < scheme.per_layer.size(); ++i) {
    const LayerActions& a = scheme.per_layer[i];
    std::string where = "layer " + std::to_string(i) + ": ";
    bool has_3x3 = a.kernel != KernelChoice::Conv1x1;

    // Pattern eligibility is a property of the chosen kernel form, not of the
    // ratio: the type token is sampled before the ratio token, so a type that
    // could never be sampled must also never validate.
    if (a.ptype == PruningType::Pattern && !has_3x3)
      violations.push_back(where + "pattern pruning requires a 3x3 stage");

    if (a.winograd) {
      bool stride1 = true;
      for (int id : graph.layers_of_slot(slots[i]))
        if (graph.layer(id).stride != 1) stride1 = false;
      if (!has_3x3)
        violations.push_back(where + "winograd requires a 3x3 stage");
      else if (!stride1)
        violations.push_back(where + "winograd requires stride 1");
    }

    bool ratio_ok = false;
    for (double r : kPruningRatios)
      if (r == a.ratio) ratio_ok = true;
    if (!ratio_ok) violations.push_back(where + "ratio not in the search space");
  }
  return violations;
}

int scheme_node_label(int class_id, int token) { return class_id * 16 + token; }

SchemeGraph to_graph(const UnifiedScheme& scheme) {
  std::vector<int> tokens = tokenize(scheme);
  SchemeGraph g;
  g.labels.reserve(tokens.size());
  g.labels.push_back(scheme_node_label(kClassMethod, tokens[0]));
  static constexpr int kLayerClasses[4] = {kClassKernel, kClassWinograd, kClassPtype,
                                           kClassRatio};
  for (std::size_t i = 1; i < tokens.size(); ++i)
    g.labels.push_back(scheme_node_label(kLayerClasses[(i - 1) % 4], tokens[i]));
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i)
    g.edges.emplace_back(static_cast<int>(i), static_cast<int>(i) + 1);
  return g;
}

std::string scheme_to_json(const UnifiedScheme& scheme) {
  json doc;
  doc["version"] = 1;
  doc["method"] = to_string(scheme.method);
  doc["layers"] = json::array();
  for (const LayerActions& a : scheme.per_layer) {
    doc["layers"].push_back({{"kernel", to_string(a.kernel)},
                             {"winograd", a.winograd},
                             {"ptype", to_string(a.ptype)},
                             {"ratio", a.ratio}});
  }
  return doc.dump();
}

UnifiedScheme scheme_from_json(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw IoError(std::string("scheme parse failure: ") + e.what());
  }
  if (!doc.contains("version") || doc["version"].get<int>() != 1)
    throw IoError("scheme: unsupported or missing version");
  UnifiedScheme s;
  try {
    s.method = pruning_method_from_string(doc.at("method").get<std::string>());
    for (const auto& jl : doc.at("layers")) {
      LayerActions a;
      a.kernel = kernel_choice_from_string(jl.at("kernel").get<std::string>());
      a.winograd = jl.at("winograd").get<bool>();
      a.ptype = pruning_type_from_string(jl.at("ptype").get<std::string>());
      a.ratio = jl.at("ratio").get<double>();
      ratio_index(a.ratio);  // membership check
      s.per_layer.push_back(a);
    }
  } catch (const json::exception& e) {
    throw IoError(std::string("scheme: malformed document: ") + e.what());
  }
  return s;
}

}  // namespace upsearch
