#include "upsearch/model_ir.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <queue>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace upsearch {

using nlohmann::json;

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv2d: return "conv2d";
    case LayerKind::DepthwiseConv2d: return "depthwise_conv2d";
    case LayerKind::Dense: return "dense";
    case LayerKind::BatchNorm: return "batch_norm";
    case LayerKind::ReLU: return "relu";
  }
  throw ShapeError("unknown layer kind");
}

LayerKind layer_kind_from_string(const std::string& s) {
  if (s == "conv2d") return LayerKind::Conv2d;
  if (s == "depthwise_conv2d") return LayerKind::DepthwiseConv2d;
  if (s == "dense") return LayerKind::Dense;
  if (s == "batch_norm") return LayerKind::BatchNorm;
  if (s == "relu") return LayerKind::ReLU;
  throw IoError("unknown layer kind string: " + s);
}

const LayerSpec& ModelGraph::layer(int id) const {
  for (const auto& l : layers)
    if (l.id == id) return l;
  throw ShapeError("ModelGraph::layer: no layer with id " + std::to_string(id));
}

LayerSpec& ModelGraph::layer(int id) {
  for (auto& l : layers)
    if (l.id == id) return l;
  throw ShapeError("ModelGraph::layer: no layer with id " + std::to_string(id));
}

bool ModelGraph::has_layer(int id) const {
  for (const auto& l : layers)
    if (l.id == id) return true;
  return false;
}

std::vector<int> ModelGraph::consumers(int id) const {
  std::vector<int> out;
  for (const auto& [from, to] : edges)
    if (from == id) out.push_back(to);
  return out;
}

std::vector<int> ModelGraph::producers(int id) const {
  std::vector<int> out;
  for (const auto& [from, to] : edges)
    if (to == id) out.push_back(from);
  return out;
}

int ModelGraph::max_layer_id() const {
  int m = -1;
  for (const auto& l : layers) m = std::max(m, l.id);
  return m;
}

std::vector<int> ModelGraph::prunable_layer_ids() const {
  std::vector<int> out;
  for (const auto& l : layers)
    if (l.prunable && l.kind == LayerKind::Conv2d) out.push_back(l.id);
  return out;
}

std::vector<int> ModelGraph::scheme_slots() const {
  std::set<int> slots;
  for (const auto& l : layers)
    if (l.scheme_slot >= 0) slots.insert(l.scheme_slot);
  return {slots.begin(), slots.end()};
}

std::vector<int> ModelGraph::layers_of_slot(int slot) const {
  std::vector<int> out;
  for (const auto& l : layers)
    if (l.scheme_slot == slot) out.push_back(l.id);
  return out;
}

namespace {

bool is_conv(const LayerSpec& s) {
  return s.kind == LayerKind::Conv2d || s.kind == LayerKind::DepthwiseConv2d;
}

// Kahn topological order over layer ids; throws on cycles.
std::vector<int> topo_order(const ModelGraph& g) {
  std::map<int, int> indeg;
  for (const auto& l : g.layers) indeg[l.id] = 0;
  for (const auto& [from, to] : g.edges) indeg[to]++;
  std::queue<int> ready;
  for (const auto& l : g.layers)
    if (indeg[l.id] == 0) ready.push(l.id);
  std::vector<int> order;
  while (!ready.empty()) {
    int id = ready.front();
    ready.pop();
    order.push_back(id);
    for (int c : g.consumers(id))
      if (--indeg[c] == 0) ready.push(c);
  }
  if (order.size() != g.layers.size())
    throw ShapeError("ModelGraph::validate: graph contains a cycle");
  return order;
}

}  // namespace

TensorShape output_shape(const LayerSpec& s) {
  const TensorShape& in = s.input_shape;
  switch (s.kind) {
    case LayerKind::Conv2d:
    case LayerKind::DepthwiseConv2d: {
      if (in.channels != s.c_in)
        throw ShapeError("layer " + std::to_string(s.id) + ": input channels " +
                         std::to_string(in.channels) + " != c_in " + std::to_string(s.c_in));
      if (s.kernel != 1 && s.kernel != 3)
        throw ShapeError("layer " + std::to_string(s.id) + ": kernel must be 1 or 3");
      if (s.stride < 1) throw ShapeError("layer " + std::to_string(s.id) + ": bad stride");
      int pad = (s.kernel - 1) / 2;
      int oh = (in.height + 2 * pad - s.kernel) / s.stride + 1;
      int ow = (in.width + 2 * pad - s.kernel) / s.stride + 1;
      if (oh <= 0 || ow <= 0)
        throw ShapeError("layer " + std::to_string(s.id) + ": empty spatial output");
      return {s.c_out, oh, ow};
    }
    case LayerKind::Dense: {
      if (in.numel() != s.c_in)
        throw ShapeError("layer " + std::to_string(s.id) + ": dense input " +
                         std::to_string(in.numel()) + " != c_in " + std::to_string(s.c_in));
      return {s.c_out, 1, 1};
    }
    case LayerKind::BatchNorm:
    case LayerKind::ReLU: {
      if (in.channels != s.c_in || s.c_in != s.c_out)
        throw ShapeError("layer " + std::to_string(s.id) + ": elementwise channel mismatch");
      return in;
    }
  }
  throw ShapeError("unknown layer kind");
}

std::uint64_t mac_count(const LayerSpec& s) {
  TensorShape out = output_shape(s);
  switch (s.kind) {
    case LayerKind::Conv2d:
      return static_cast<std::uint64_t>(s.c_in) * s.c_out * s.kernel * s.kernel *
             out.height * out.width;
    case LayerKind::DepthwiseConv2d:
      if (s.c_in != s.c_out)
        throw ShapeError("depthwise layer " + std::to_string(s.id) + ": c_in != c_out");
      return static_cast<std::uint64_t>(s.c_in) * s.kernel * s.kernel * out.height * out.width;
    case LayerKind::Dense:
      return static_cast<std::uint64_t>(s.c_in) * s.c_out;
    case LayerKind::BatchNorm:
    case LayerKind::ReLU:
      return 0;
  }
  throw ShapeError("unknown layer kind");
}

std::uint64_t total_macs(const ModelGraph& graph) {
  std::uint64_t total = 0;
  for (const auto& l : graph.layers) total += mac_count(l);
  return total;
}

void propagate_shapes(ModelGraph& graph) {
  std::vector<int> order = topo_order(graph);
  for (int id : order) {
    LayerSpec& l = graph.layer(id);
    std::vector<int> prods = graph.producers(id);
    if (!prods.empty()) {
      TensorShape in = output_shape(graph.layer(prods[0]));
      for (std::size_t i = 1; i < prods.size(); ++i) {
        if (!(output_shape(graph.layer(prods[i])) == in))
          throw ShapeError("layer " + std::to_string(id) + ": producers disagree on shape");
      }
      l.input_shape = in;
      if (l.kind == LayerKind::Dense) {
        if (in.numel() != l.c_in)
          throw ShapeError("layer " + std::to_string(id) + ": dense c_in mismatch");
      } else {
        l.c_in = in.channels;
        if (l.kind == LayerKind::BatchNorm || l.kind == LayerKind::ReLU)
          l.c_out = in.channels;
        if (l.kind == LayerKind::DepthwiseConv2d && l.c_out != in.channels)
          throw ShapeError("layer " + std::to_string(id) + ": depthwise c_out mismatch");
      }
    }
    output_shape(l);  // shape sanity even for entry layers
  }
}

void assign_scheme_slots(ModelGraph& graph) {
  int slot = 0;
  for (auto& l : graph.layers) {
    if (l.prunable && l.kind == LayerKind::Conv2d)
      l.scheme_slot = slot++;
    else
      l.scheme_slot = -1;
  }
}

void ModelGraph::validate() const {
  std::set<int> ids;
  for (const auto& l : layers) {
    if (!ids.insert(l.id).second)
      throw ShapeError("duplicate layer id " + std::to_string(l.id));
  }
  for (const auto& [from, to] : edges) {
    if (!ids.count(from) || !ids.count(to))
      throw ShapeError("edge references missing layer " + std::to_string(ids.count(from) ? to : from));
    if (from == to) throw ShapeError("self edge on layer " + std::to_string(from));
  }
  topo_order(*this);

  for (const auto& l : layers) {
    if (is_conv(l) && l.kernel != 1 && l.kernel != 3)
      throw ShapeError("layer " + std::to_string(l.id) + ": conv kernel must be 1 or 3");
    if (l.kind == LayerKind::DepthwiseConv2d && l.c_in != l.c_out)
      throw ShapeError("layer " + std::to_string(l.id) + ": depthwise needs c_in == c_out");
    if (l.prunable && l.kind != LayerKind::Conv2d)
      throw ShapeError("layer " + std::to_string(l.id) + ": only Conv2d can be prunable");
    TensorShape out = output_shape(l);  // validates kernel/stride/shape fields
    for (int cid : consumers(l.id)) {
      const LayerSpec& c = layer(cid);
      if (c.kind == LayerKind::Dense) {
        if (out.numel() != c.c_in)
          throw ShapeError("edge " + std::to_string(l.id) + "->" + std::to_string(cid) +
                           ": dense input size mismatch");
      } else if (out.channels != c.c_in) {
        throw ShapeError("edge " + std::to_string(l.id) + "->" + std::to_string(cid) +
                         ": channel mismatch " + std::to_string(out.channels) + " vs " +
                         std::to_string(c.c_in));
      }
      if (!(c.input_shape == out))
        throw ShapeError("edge " + std::to_string(l.id) + "->" + std::to_string(cid) +
                         ": input_shape not propagated");
    }
  }

  if (prunable_layer_ids().empty())
    throw ShapeError("graph has no prunable convolution");
}

std::string graph_to_json(const ModelGraph& graph) {
  json doc;
  doc["version"] = 1;
  doc["layers"] = json::array();
  for (const auto& l : graph.layers) {
    doc["layers"].push_back({
        {"id", l.id},
        {"kind", to_string(l.kind)},
        {"c_in", l.c_in},
        {"c_out", l.c_out},
        {"n", l.kernel},
        {"stride", l.stride},
        {"input_shape",
         {{"channels", l.input_shape.channels},
          {"height", l.input_shape.height},
          {"width", l.input_shape.width}}},
        {"prunable", l.prunable},
        {"scheme_slot", l.scheme_slot},
    });
  }
  doc["edges"] = json::array();
  for (const auto& [from, to] : graph.edges) doc["edges"].push_back({from, to});
  return doc.dump(2);
}

ModelGraph graph_from_json(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw IoError(std::string("model graph parse failure: ") + e.what());
  }
  if (!doc.contains("version") || doc["version"].get<int>() != 1)
    throw IoError("model graph: unsupported or missing version");
  ModelGraph g;
  try {
    for (const auto& jl : doc.at("layers")) {
      LayerSpec l;
      l.id = jl.at("id").get<int>();
      l.kind = layer_kind_from_string(jl.at("kind").get<std::string>());
      l.c_in = jl.at("c_in").get<int>();
      l.c_out = jl.at("c_out").get<int>();
      l.kernel = jl.at("n").get<int>();
      l.stride = jl.at("stride").get<int>();
      const auto& shp = jl.at("input_shape");
      l.input_shape = {shp.at("channels").get<int>(), shp.at("height").get<int>(),
                       shp.at("width").get<int>()};
      l.prunable = jl.at("prunable").get<bool>();
      l.scheme_slot = jl.at("scheme_slot").get<int>();
      g.layers.push_back(l);
    }
    for (const auto& je : doc.at("edges"))
      g.edges.emplace_back(je.at(0).get<int>(), je.at(1).get<int>());
  } catch (const json::exception& e) {
    throw IoError(std::string("model graph: malformed document: ") + e.what());
  }
  return g;
}

void save_graph(const ModelGraph& graph, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for write: " + path);
  os << graph_to_json(graph) << "\n";
  if (!os) throw IoError("write failure: " + path);
}

ModelGraph load_graph(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return graph_from_json(ss.str());
}

}  // namespace upsearch
