#pragma once

// Shared test utilities. The reference forward pass here is intentionally
// written as plain nested loops, independent of the library's execution
// paths, so it can serve as an oracle for fusion / replacement / training
// equivalence checks.

#include <cmath>
#include <map>
#include <vector>

#include "upsearch/model_ir.hpp"
#include "upsearch/rng.hpp"
#include "upsearch/weights.hpp"

namespace testutil {

struct RefAct {
  int c = 0, h = 0, w = 0;
  std::vector<double> v;

  double& at(int ch, int y, int x) { return v[(static_cast<std::size_t>(ch) * h + y) * w + x]; }
  double at(int ch, int y, int x) const {
    return v[(static_cast<std::size_t>(ch) * h + y) * w + x];
  }
};

inline RefAct random_act(int c, int h, int w, upsearch::Rng& rng) {
  RefAct a{c, h, w, {}};
  a.v.resize(static_cast<std::size_t>(c) * h * w);
  for (double& x : a.v) x = rng.normal();
  return a;
}

// Eval-mode forward of a single layer (batch norm uses running statistics).
inline RefAct ref_forward_layer(const upsearch::LayerSpec& s, const upsearch::LayerWeights& lw,
                                const RefAct& in) {
  using upsearch::LayerKind;
  upsearch::TensorShape os = upsearch::output_shape(s);
  RefAct out{os.channels, os.height, os.width, {}};
  out.v.assign(static_cast<std::size_t>(os.channels) * os.height * os.width, 0.0);
  switch (s.kind) {
    case LayerKind::Conv2d: {
      int pad = (s.kernel - 1) / 2;
      for (int o = 0; o < s.c_out; ++o)
        for (int y = 0; y < out.h; ++y)
          for (int x = 0; x < out.w; ++x) {
            double acc = lw.bias.empty() ? 0.0 : lw.bias[o];
            for (int i = 0; i < s.c_in; ++i)
              for (int r = 0; r < s.kernel; ++r)
                for (int c = 0; c < s.kernel; ++c) {
                  int yy = y * s.stride + r - pad;
                  int xx = x * s.stride + c - pad;
                  if (yy < 0 || yy >= in.h || xx < 0 || xx >= in.w) continue;
                  acc += lw.w[upsearch::conv_index(s, o, i, r, c)] * in.at(i, yy, xx);
                }
            out.at(o, y, x) = acc;
          }
      break;
    }
    case LayerKind::DepthwiseConv2d: {
      int pad = (s.kernel - 1) / 2;
      for (int ch = 0; ch < s.c_out; ++ch)
        for (int y = 0; y < out.h; ++y)
          for (int x = 0; x < out.w; ++x) {
            double acc = lw.bias.empty() ? 0.0 : lw.bias[ch];
            for (int r = 0; r < s.kernel; ++r)
              for (int c = 0; c < s.kernel; ++c) {
                int yy = y * s.stride + r - pad;
                int xx = x * s.stride + c - pad;
                if (yy < 0 || yy >= in.h || xx < 0 || xx >= in.w) continue;
                acc += lw.w[upsearch::conv_index(s, ch, 0, r, c)] * in.at(ch, yy, xx);
              }
            out.at(ch, y, x) = acc;
          }
      break;
    }
    case LayerKind::Dense: {
      for (int o = 0; o < s.c_out; ++o) {
        double acc = lw.bias.empty() ? 0.0 : lw.bias[o];
        for (int i = 0; i < s.c_in; ++i)
          acc += lw.w[static_cast<std::size_t>(o) * s.c_in + i] * in.v[i];
        out.v[o] = acc;
      }
      break;
    }
    case LayerKind::BatchNorm: {
      for (int ch = 0; ch < s.c_out; ++ch) {
        double inv = 1.0 / std::sqrt(lw.bn_var[ch] + lw.bn_eps);
        for (int y = 0; y < out.h; ++y)
          for (int x = 0; x < out.w; ++x)
            out.at(ch, y, x) =
                (in.at(ch, y, x) - lw.bn_mean[ch]) * inv * lw.bn_gamma[ch] + lw.bn_beta[ch];
      }
      break;
    }
    case LayerKind::ReLU: {
      for (std::size_t i = 0; i < in.v.size(); ++i) out.v[i] = in.v[i] > 0.0 ? in.v[i] : 0.0;
      break;
    }
  }
  return out;
}

// Forward through a chain-shaped graph; returns the last layer's activation.
inline RefAct ref_forward(const upsearch::ModelGraph& g, const upsearch::ModelWeights& w,
                          const RefAct& input) {
  std::map<int, RefAct> acts;
  RefAct last;
  for (const auto& l : g.layers) {
    std::vector<int> prods = g.producers(l.id);
    const RefAct& in = prods.empty() ? input : acts.at(prods[0]);
    acts[l.id] = ref_forward_layer(l, w.at(l.id), in);
    last = acts[l.id];
  }
  return last;
}

// Convenience builder: a chain of layers wired in order, shapes propagated
// from the given input shape, scheme slots assigned.
inline upsearch::ModelGraph chain_graph(std::vector<upsearch::LayerSpec> layers,
                                        upsearch::TensorShape input) {
  upsearch::ModelGraph g;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    layers[i].id = static_cast<int>(i);
    if (i > 0) g.edges.emplace_back(static_cast<int>(i) - 1, static_cast<int>(i));
  }
  g.layers = std::move(layers);
  g.layers[0].input_shape = input;
  upsearch::propagate_shapes(g);
  upsearch::assign_scheme_slots(g);
  return g;
}

inline upsearch::LayerSpec conv(int c_in, int c_out, int kernel, int stride = 1,
                                bool prunable = true) {
  upsearch::LayerSpec s;
  s.kind = upsearch::LayerKind::Conv2d;
  s.c_in = c_in;
  s.c_out = c_out;
  s.kernel = kernel;
  s.stride = stride;
  s.prunable = prunable;
  return s;
}

inline upsearch::LayerSpec bn(int c) {
  upsearch::LayerSpec s;
  s.kind = upsearch::LayerKind::BatchNorm;
  s.c_in = c;
  s.c_out = c;
  s.kernel = 0;
  return s;
}

inline upsearch::LayerSpec relu(int c) {
  upsearch::LayerSpec s;
  s.kind = upsearch::LayerKind::ReLU;
  s.c_in = c;
  s.c_out = c;
  s.kernel = 0;
  return s;
}

inline upsearch::LayerSpec dense(int c_in, int c_out) {
  upsearch::LayerSpec s;
  s.kind = upsearch::LayerKind::Dense;
  s.c_in = c_in;
  s.c_out = c_out;
  s.kernel = 0;
  return s;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace testutil
