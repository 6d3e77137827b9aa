#include "upsearch/weights.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "upsearch/binio.hpp"

namespace upsearch {

const LayerWeights& ModelWeights::at(int id) const {
  auto it = layers.find(id);
  if (it == layers.end())
    throw ShapeError("ModelWeights: no weights for layer " + std::to_string(id));
  return it->second;
}

LayerWeights& ModelWeights::at(int id) {
  auto it = layers.find(id);
  if (it == layers.end())
    throw ShapeError("ModelWeights: no weights for layer " + std::to_string(id));
  return it->second;
}

std::size_t weight_numel(const LayerSpec& spec) {
  switch (spec.kind) {
    case LayerKind::Conv2d:
      return static_cast<std::size_t>(spec.c_out) * spec.c_in * spec.kernel * spec.kernel;
    case LayerKind::DepthwiseConv2d:
      return static_cast<std::size_t>(spec.c_out) * spec.kernel * spec.kernel;
    case LayerKind::Dense:
      return static_cast<std::size_t>(spec.c_out) * spec.c_in;
    case LayerKind::BatchNorm:
    case LayerKind::ReLU:
      return 0;
  }
  throw ShapeError("unknown layer kind");
}

ModelWeights init_weights(const ModelGraph& graph, Rng& rng) {
  ModelWeights w;
  for (const auto& l : graph.layers) {
    LayerWeights lw;
    switch (l.kind) {
      case LayerKind::Conv2d:
      case LayerKind::DepthwiseConv2d: {
        int fan_in = (l.kind == LayerKind::Conv2d ? l.c_in : 1) * l.kernel * l.kernel;
        double scale = std::sqrt(2.0 / fan_in);
        lw.w.resize(weight_numel(l));
        for (double& x : lw.w) x = scale * rng.normal();
        lw.bias.assign(l.c_out, 0.0);
        break;
      }
      case LayerKind::Dense: {
        double scale = std::sqrt(2.0 / l.c_in);
        lw.w.resize(weight_numel(l));
        for (double& x : lw.w) x = scale * rng.normal();
        lw.bias.assign(l.c_out, 0.0);
        break;
      }
      case LayerKind::BatchNorm: {
        lw.bn_gamma.assign(l.c_out, 1.0);
        lw.bn_beta.assign(l.c_out, 0.0);
        lw.bn_mean.assign(l.c_out, 0.0);
        lw.bn_var.assign(l.c_out, 1.0);
        break;
      }
      case LayerKind::ReLU:
        break;
    }
    w.layers[l.id] = std::move(lw);
  }
  return w;
}

void check_weights(const ModelGraph& graph, const ModelWeights& weights) {
  for (const auto& l : graph.layers) {
    const LayerWeights& lw = weights.at(l.id);
    if (lw.w.size() != weight_numel(l))
      throw ShapeError("layer " + std::to_string(l.id) + ": weight tensor has " +
                       std::to_string(lw.w.size()) + " entries, expected " +
                       std::to_string(weight_numel(l)));
    if (l.kind == LayerKind::Conv2d || l.kind == LayerKind::DepthwiseConv2d ||
        l.kind == LayerKind::Dense) {
      if (lw.bias.size() != static_cast<std::size_t>(l.c_out))
        throw ShapeError("layer " + std::to_string(l.id) + ": bias size mismatch");
    }
    if (l.kind == LayerKind::BatchNorm) {
      std::size_t c = static_cast<std::size_t>(l.c_out);
      if (lw.bn_gamma.size() != c || lw.bn_beta.size() != c || lw.bn_mean.size() != c ||
          lw.bn_var.size() != c)
        throw ShapeError("layer " + std::to_string(l.id) + ": batch norm param size mismatch");
    }
  }
}

namespace {
constexpr char kWeightsMagic[4] = {'U', 'P', 'W', 'T'};
constexpr std::uint32_t kWeightsVersion = 1;
}  // namespace

void save_weights(const ModelWeights& weights, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for write: " + path);
  write_magic(os, kWeightsMagic, kWeightsVersion);
  write_u64(os, weights.layers.size());
  for (const auto& [id, lw] : weights.layers) {
    write_i32(os, id);
    write_f64_vec(os, lw.w);
    write_f64_vec(os, lw.bias);
    write_f64_vec(os, lw.bn_gamma);
    write_f64_vec(os, lw.bn_beta);
    write_f64_vec(os, lw.bn_mean);
    write_f64_vec(os, lw.bn_var);
    write_f64(os, lw.bn_eps);
  }
  if (!os) throw IoError("write failure: " + path);
}

ModelWeights load_weights(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  std::uint32_t version = read_magic(is, kWeightsMagic);
  if (version != kWeightsVersion)
    throw IoError("weights file version " + std::to_string(version) + " unsupported");
  ModelWeights w;
  std::uint64_t count = read_u64(is);
  for (std::uint64_t i = 0; i < count; ++i) {
    int id = read_i32(is);
    LayerWeights lw;
    lw.w = read_f64_vec(is);
    lw.bias = read_f64_vec(is);
    lw.bn_gamma = read_f64_vec(is);
    lw.bn_beta = read_f64_vec(is);
    lw.bn_mean = read_f64_vec(is);
    lw.bn_var = read_f64_vec(is);
    lw.bn_eps = read_f64(is);
    w.layers[id] = std::move(lw);
  }
  return w;
}

FuseResult fuse(const ModelGraph& graph, const ModelWeights& weights) {
  FuseResult res{graph, weights, 0};
  bool changed = true;
  while (changed) {
    changed = false;
    for (const auto& conv : res.graph.layers) {
      if (conv.kind != LayerKind::Conv2d && conv.kind != LayerKind::DepthwiseConv2d) continue;
      std::vector<int> cons = res.graph.consumers(conv.id);
      if (cons.size() != 1) continue;  // another consumer needs the raw output
      int bn_id = cons[0];
      const LayerSpec& bn = res.graph.layer(bn_id);
      if (bn.kind != LayerKind::BatchNorm) continue;

      LayerWeights& cw = res.weights.at(conv.id);
      const LayerWeights& bw = res.weights.at(bn_id);
      int per_out = static_cast<int>(cw.w.size()) / conv.c_out;
      for (int o = 0; o < conv.c_out; ++o) {
        double factor = bw.bn_gamma[o] / std::sqrt(bw.bn_var[o] + bw.bn_eps);
        for (int j = 0; j < per_out; ++j)
          cw.w[static_cast<std::size_t>(o) * per_out + j] *= factor;
        cw.bias[o] = (cw.bias[o] - bw.bn_mean[o]) * factor + bw.bn_beta[o];
      }

      // Rewire conv -> (consumers of the batch norm) and drop the bn node.
      std::vector<std::pair<int, int>> new_edges;
      for (const auto& [from, to] : res.graph.edges) {
        if (to == bn_id) continue;
        if (from == bn_id)
          new_edges.emplace_back(conv.id, to);
        else
          new_edges.emplace_back(from, to);
      }
      res.graph.edges = std::move(new_edges);
      res.graph.layers.erase(
          std::remove_if(res.graph.layers.begin(), res.graph.layers.end(),
                         [&](const LayerSpec& l) { return l.id == bn_id; }),
          res.graph.layers.end());
      res.weights.layers.erase(bn_id);
      res.fused_pairs++;
      changed = true;
      break;  // layer list mutated, restart the scan
    }
  }
  return res;
}

namespace {

// Center tap of each 3x3 kernel; the 1x1 that preserves the map best when the
// surround is small.
void shrink_to_1x1(const LayerSpec& src, LayerWeights& lw) {
  std::vector<double> w1(static_cast<std::size_t>(src.c_out) * src.c_in);
  for (int o = 0; o < src.c_out; ++o)
    for (int i = 0; i < src.c_in; ++i)
      w1[static_cast<std::size_t>(o) * src.c_in + i] = lw.w[conv_index(src, o, i, 1, 1)];
  lw.w = std::move(w1);
}

void grow_to_3x3(const LayerSpec& src, LayerWeights& lw) {
  LayerSpec dst = src;
  dst.kernel = 3;
  std::vector<double> w3(static_cast<std::size_t>(src.c_out) * src.c_in * 9, 0.0);
  for (int o = 0; o < src.c_out; ++o)
    for (int i = 0; i < src.c_in; ++i)
      w3[conv_index(dst, o, i, 1, 1)] = lw.w[static_cast<std::size_t>(o) * src.c_in + i];
  lw.w = std::move(w3);
}

}  // namespace

ReplaceResult replace_kernel(const ModelGraph& graph, const ModelWeights& weights,
                             int layer_id, ReplacementTarget target) {
  const LayerSpec& orig = graph.layer(layer_id);
  if (orig.kind != LayerKind::Conv2d || !orig.prunable)
    throw ShapeError("replace_kernel: layer " + std::to_string(layer_id) +
                     " is not a prunable convolution");

  ReplaceResult res{graph, weights, {}};
  LayerSpec& spec = res.graph.layer(layer_id);
  LayerWeights& lw = res.weights.at(layer_id);

  switch (target) {
    case ReplacementTarget::Conv1x1: {
      if (spec.kernel == 3) shrink_to_1x1(spec, lw);
      spec.kernel = 1;
      res.new_layer_ids = {layer_id};
      break;
    }
    case ReplacementTarget::Conv3x3: {
      if (spec.kernel == 1) grow_to_3x3(spec, lw);
      spec.kernel = 3;
      res.new_layer_ids = {layer_id};
      break;
    }
    case ReplacementTarget::DepthwisePair: {
      if (spec.kernel != 3)
        throw ShapeError("replace_kernel: depthwise pair expects a 3x3 source");
      int dw_id = res.graph.max_layer_id() + 1;

      LayerSpec dw;
      dw.id = dw_id;
      dw.kind = LayerKind::DepthwiseConv2d;
      dw.c_in = spec.c_in;
      dw.c_out = spec.c_in;
      dw.kernel = 3;
      dw.stride = spec.stride;
      dw.input_shape = spec.input_shape;
      dw.prunable = false;
      dw.scheme_slot = spec.scheme_slot;

      // Depthwise kernels: per-input-channel mean over output filters.
      LayerWeights dww;
      dww.w.assign(static_cast<std::size_t>(spec.c_in) * 9, 0.0);
      for (int i = 0; i < spec.c_in; ++i)
        for (int r = 0; r < 3; ++r)
          for (int c = 0; c < 3; ++c) {
            double acc = 0.0;
            for (int o = 0; o < spec.c_out; ++o) acc += lw.w[conv_index(spec, o, i, r, c)];
            dww.w[(static_cast<std::size_t>(i) * 3 + r) * 3 + c] = acc / spec.c_out;
          }
      dww.bias.assign(spec.c_in, 0.0);

      // Pointwise stage: per-(out,in) kernel sums, then rescale so the
      // composed kernel pw[o,i] * dw[i,:,:] matches the original Frobenius
      // norm.
      std::vector<double> pw(static_cast<std::size_t>(spec.c_out) * spec.c_in, 0.0);
      for (int o = 0; o < spec.c_out; ++o)
        for (int i = 0; i < spec.c_in; ++i) {
          double acc = 0.0;
          for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) acc += lw.w[conv_index(spec, o, i, r, c)];
          pw[static_cast<std::size_t>(o) * spec.c_in + i] = acc;
        }
      double orig_sq = 0.0;
      for (double x : lw.w) orig_sq += x * x;
      std::vector<double> dw_sq(spec.c_in, 0.0);
      for (int i = 0; i < spec.c_in; ++i) {
        double acc = 0.0;
        for (int j = 0; j < 9; ++j) {
          double v = dww.w[static_cast<std::size_t>(i) * 9 + j];
          acc += v * v;
        }
        dw_sq[i] = acc;
      }
      double composed_sq = 0.0;
      for (int o = 0; o < spec.c_out; ++o)
        for (int i = 0; i < spec.c_in; ++i) {
          double p = pw[static_cast<std::size_t>(o) * spec.c_in + i];
          composed_sq += p * p * dw_sq[i];
        }
      if (composed_sq > 0.0) {
        double scale = std::sqrt(orig_sq / composed_sq);
        for (double& x : pw) x *= scale;
      }

      // The original id becomes the pointwise stage so downstream consumers
      // (and any following batch norm) stay attached to the slot's output.
      spec.kind = LayerKind::Conv2d;
      spec.kernel = 1;
      spec.stride = 1;
      spec.input_shape = output_shape(dw);
      lw.w = std::move(pw);

      res.graph.layers.insert(
          std::find_if(res.graph.layers.begin(), res.graph.layers.end(),
                       [&](const LayerSpec& l) { return l.id == layer_id; }),
          dw);
      std::vector<std::pair<int, int>> new_edges;
      for (const auto& [from, to] : res.graph.edges) {
        if (to == layer_id)
          new_edges.emplace_back(from, dw_id);
        else
          new_edges.emplace_back(from, to);
      }
      new_edges.emplace_back(dw_id, layer_id);
      res.graph.edges = std::move(new_edges);
      res.weights.layers[dw_id] = std::move(dww);
      res.new_layer_ids = {dw_id, layer_id};
      break;
    }
  }
  propagate_shapes(res.graph);
  return res;
}

}  // namespace upsearch
