#include "upsearch/pruning.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <numeric>
#include <string>

#include "upsearch/errors.hpp"

namespace upsearch {

namespace {

// Rounding rule used throughout: half away from zero (std::llround).
long round_away(double x) { return std::llround(x); }

void check_ratio(double ratio) {
  ratio_index(ratio);  // throws when outside the allowed set
}

PruningMask all_true(std::size_t n, PruningType t, double requested) {
  PruningMask m;
  m.keep.assign(n, 1);
  m.ptype = t;
  m.requested_ratio = requested;
  m.achieved_ratio = 0.0;
  return m;
}

void finish(PruningMask& m) {
  m.achieved_ratio = static_cast<double>(m.zeros()) / static_cast<double>(m.keep.size());
}

int kernels_per_filter(const LayerSpec& spec) {
  return spec.kind == LayerKind::DepthwiseConv2d ? 1 : spec.c_in;
}

std::uint16_t top4_mask(const double* kernel) {
  std::array<int, 9> idx;
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    return std::abs(kernel[a]) > std::abs(kernel[b]);
  });
  std::uint16_t mask = 0;
  for (int j = 0; j < 4; ++j) mask = static_cast<std::uint16_t>(mask | (1u << idx[j]));
  return mask;
}

}  // namespace

std::size_t PruningMask::zeros() const {
  return static_cast<std::size_t>(std::count(keep.begin(), keep.end(), 0));
}

BlockSpec make_block_spec(int c_in, int c_out, int b_in, int b_out) {
  auto fit = [](int b, int c) {
    if (c <= 0) throw ShapeError("block spec needs positive channel counts");
    b = std::min(b, c);
    while (c % b != 0) --b;
    return b;
  };
  return {fit(b_in, c_in), fit(b_out, c_out)};
}

PatternLibrary build_pattern_library(const LayerSpec& spec,
                                     const std::vector<double>& w,
                                     int max_patterns) {
  if (spec.kernel != 3)
    throw ShapeError("pattern library requires a 3x3 layer, got kernel " +
                     std::to_string(spec.kernel));
  std::size_t nker = w.size() / 9;
  std::map<std::uint16_t, int> counts;
  for (std::size_t k = 0; k < nker; ++k) ++counts[top4_mask(w.data() + k * 9)];

  std::vector<std::pair<std::uint16_t, int>> order(counts.begin(), counts.end());
  std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  PatternLibrary lib;
  for (const auto& [mask, count] : order) {
    (void)count;
    if (static_cast<int>(lib.masks.size()) == max_patterns) break;
    lib.masks.push_back(mask);
  }
  return lib;
}

PruningMask project_filter(const LayerSpec& spec, const std::vector<double>& w,
                           double ratio) {
  check_ratio(ratio);
  int c_out = spec.c_out;
  if (c_out <= 0 || w.size() % c_out != 0)
    throw ShapeError("filter projection: tensor does not split into " +
                     std::to_string(c_out) + " filters");
  if (ratio == 0.0) return all_true(w.size(), PruningType::Filter, ratio);

  std::size_t per = w.size() / c_out;
  int n_pruned = static_cast<int>(round_away(ratio * c_out));
  if (n_pruned >= c_out) throw ShapeError("cannot prune all filters");

  std::vector<double> sq(c_out, 0.0);
  for (int f = 0; f < c_out; ++f)
    for (std::size_t j = 0; j < per; ++j) sq[f] += w[f * per + j] * w[f * per + j];
  std::vector<int> order(c_out);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return sq[a] < sq[b]; });

  PruningMask m = all_true(w.size(), PruningType::Filter, ratio);
  for (int j = 0; j < n_pruned; ++j)
    std::fill_n(m.keep.begin() + order[j] * per, per, std::uint8_t{0});
  finish(m);
  return m;
}

PruningMask project_pattern(const LayerSpec& spec, const std::vector<double>& w,
                            double ratio, const PatternLibrary& lib) {
  check_ratio(ratio);
  if (spec.kernel != 3)
    throw ShapeError("pattern pruning requires 3x3 kernels, got kernel " +
                     std::to_string(spec.kernel));
  if (lib.masks.empty()) throw ShapeError("pattern library is empty");
  if (ratio == 0.0) return all_true(w.size(), PruningType::Pattern, ratio);

  std::size_t nker = w.size() / 9;
  int per_filter = kernels_per_filter(spec);

  // Pattern stage: snap each kernel to its best-overlap library mask.
  std::vector<std::uint16_t> chosen(nker);
  for (std::size_t k = 0; k < nker; ++k) {
    std::uint16_t own = top4_mask(w.data() + k * 9);
    int best = 0, best_overlap = -1;
    for (std::size_t j = 0; j < lib.masks.size(); ++j) {
      int overlap = std::popcount(static_cast<unsigned>(own & lib.masks[j]));
      if (overlap > best_overlap) {
        best_overlap = overlap;
        best = static_cast<int>(j);
      }
    }
    chosen[k] = lib.masks[best];
  }

  // Connectivity stage: zero whole kernels, weakest surviving energy first,
  // never emptying an output filter.
  std::vector<double> masked_sq(nker, 0.0);
  for (std::size_t k = 0; k < nker; ++k)
    for (int c = 0; c < 9; ++c)
      if (chosen[k] & (1u << c)) masked_sq[k] += w[k * 9 + c] * w[k * 9 + c];
  std::vector<std::size_t> order(nker);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return masked_sq[a] < masked_sq[b];
  });

  double target = std::max(ratio, 5.0 / 9.0);
  std::vector<std::uint8_t> dead(nker, 0);
  std::vector<int> survivors(spec.c_out, per_filter);
  std::size_t pruned = 5 * nker;
  const double total = static_cast<double>(w.size());
  for (std::size_t k : order) {
    if (static_cast<double>(pruned) / total >= target) break;
    int filter = static_cast<int>(k) / per_filter;
    if (survivors[filter] == 1) continue;
    dead[k] = 1;
    --survivors[filter];
    pruned += 4;
  }

  PruningMask m = all_true(w.size(), PruningType::Pattern, ratio);
  for (std::size_t k = 0; k < nker; ++k)
    for (int c = 0; c < 9; ++c)
      m.keep[k * 9 + c] = (!dead[k] && (chosen[k] & (1u << c))) ? 1 : 0;
  finish(m);
  return m;
}

PruningMask project_block(const LayerSpec& spec, const std::vector<double>& w,
                          double ratio, const BlockSpec& bs) {
  check_ratio(ratio);
  if (spec.kind != LayerKind::Conv2d && spec.kind != LayerKind::DepthwiseConv2d)
    throw ShapeError("block pruning applies to convolutions only");
  int kk = spec.kernel * spec.kernel;
  int c_in = kernels_per_filter(spec);
  if (c_in % bs.b_in != 0 || spec.c_out % bs.b_out != 0)
    throw ShapeError("block spec does not divide the channel extents");

  int keep_k = std::max(1L, round_away((1.0 - ratio) * kk));
  if (keep_k >= kk) return all_true(w.size(), PruningType::Block, ratio);

  int rows_per = spec.c_out / bs.b_out;  // output channels per block
  int cols_per = c_in / bs.b_in;         // input channels per block

  PruningMask m = all_true(w.size(), PruningType::Block, ratio);
  for (int bo = 0; bo < bs.b_out; ++bo)
    for (int bi = 0; bi < bs.b_in; ++bi) {
      std::vector<double> score(kk, 0.0);
      for (int o = bo * rows_per; o < (bo + 1) * rows_per; ++o)
        for (int i = bi * cols_per; i < (bi + 1) * cols_per; ++i)
          for (int c = 0; c < kk; ++c) {
            double v = w[(static_cast<std::size_t>(o) * c_in + i) * kk + c];
            score[c] += v * v;
          }
      std::vector<int> order(kk);
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(),
                       [&](int a, int b) { return score[a] > score[b]; });
      std::vector<std::uint8_t> cell(kk, 0);
      for (int j = 0; j < keep_k; ++j) cell[order[j]] = 1;
      for (int o = bo * rows_per; o < (bo + 1) * rows_per; ++o)
        for (int i = bi * cols_per; i < (bi + 1) * cols_per; ++i)
          for (int c = 0; c < kk; ++c)
            m.keep[(static_cast<std::size_t>(o) * c_in + i) * kk + c] = cell[c];
    }
  finish(m);
  return m;
}

PruningMask project(const LayerSpec& spec, const std::vector<double>& w,
                    PruningType ptype, double ratio) {
  switch (ptype) {
    case PruningType::Filter:
      return project_filter(spec, w, ratio);
    case PruningType::Pattern:
      return project_pattern(spec, w, ratio, build_pattern_library(spec, w));
    case PruningType::Block:
      return project_block(spec, w, ratio,
                           make_block_spec(kernels_per_filter(spec), spec.c_out));
  }
  throw ShapeError("unknown pruning type");
}

void apply_mask(std::vector<double>& w, const PruningMask& mask) {
  if (w.size() != mask.keep.size())
    throw ShapeError("mask size " + std::to_string(mask.keep.size()) +
                     " does not match tensor size " + std::to_string(w.size()));
  for (std::size_t j = 0; j < w.size(); ++j)
    if (!mask.keep[j]) w[j] = 0.0;
}

std::vector<int> pruned_layers_of_slot(const ModelGraph& graph, int slot,
                                       PruningType ptype) {
  std::vector<int> ids = graph.layers_of_slot(slot);
  if (ids.size() == 1) return ids;
  int dw = -1, pw = -1;
  for (int id : ids) {
    if (graph.layer(id).kind == LayerKind::DepthwiseConv2d)
      dw = id;
    else if (graph.layer(id).kind == LayerKind::Conv2d)
      pw = id;
  }
  if (ids.size() != 2 || dw < 0 || pw < 0)
    throw ShapeError("slot " + std::to_string(slot) +
                     " is neither a single layer nor a depthwise pair");
  switch (ptype) {
    case PruningType::Filter:
      return {pw};
    case PruningType::Pattern:
      return {dw};
    case PruningType::Block:
      return {dw, pw};
  }
  throw ShapeError("unknown pruning type");
}

SparsityReport sparsity_report(const ModelGraph& graph,
                               const std::map<int, PruningMask>& masks) {
  SparsityReport report;
  std::size_t zeros = 0, total = 0;
  for (const auto& [id, mask] : masks) {
    if (!graph.has_layer(id))
      throw ShapeError("mask references unknown layer " + std::to_string(id));
    std::size_t z = mask.zeros();
    report.per_layer[id] =
        static_cast<double>(z) / static_cast<double>(mask.keep.size());
    zeros += z;
    total += mask.keep.size();
  }
  report.overall = total == 0 ? 0.0
                              : static_cast<double>(zeros) / static_cast<double>(total);
  return report;
}

namespace {

struct SlotAction {
  int layer_id;
  PruningType ptype;
  double ratio;
};

std::vector<SlotAction> touched_layers(const ModelGraph& graph,
                                       const UnifiedScheme& scheme) {
  std::vector<int> slots = graph.scheme_slots();
  if (scheme.per_layer.size() != slots.size())
    throw ShapeError("scheme has " + std::to_string(scheme.per_layer.size()) +
                     " layer actions for " + std::to_string(slots.size()) +
                     " slots");
  std::vector<SlotAction> out;
  for (std::size_t si = 0; si < slots.size(); ++si) {
    const LayerActions& act = scheme.per_layer[si];
    for (int id : pruned_layers_of_slot(graph, slots[si], act.ptype))
      out.push_back({id, act.ptype, act.ratio});
  }
  return out;
}

void check_finite(const ModelWeights& weights) {
  for (const auto& [id, lw] : weights.layers)
    for (double v : lw.w)
      if (!std::isfinite(v))
        throw NumericalError("non-finite weight in layer " + std::to_string(id) +
                             " during ADMM pruning");
}

}  // namespace

std::map<int, PruningMask> magnitude_prune(const ModelGraph& graph,
                                           ModelWeights& weights,
                                           const UnifiedScheme& scheme) {
  if (scheme.method != PruningMethod::Magnitude)
    throw ConfigError("magnitude_prune requires the magnitude method");
  std::map<int, PruningMask> masks;
  for (const SlotAction& a : touched_layers(graph, scheme)) {
    const LayerSpec& spec = graph.layer(a.layer_id);
    PruningMask m = project(spec, weights.at(a.layer_id).w, a.ptype, a.ratio);
    apply_mask(weights.at(a.layer_id).w, m);
    masks.emplace(a.layer_id, std::move(m));
  }
  return masks;
}

std::map<int, PruningMask> admm_prune(const ModelGraph& graph,
                                      ModelWeights& weights,
                                      const UnifiedScheme& scheme,
                                      const AdmmConfig& cfg,
                                      const WStep& w_step) {
  if (scheme.method != PruningMethod::Admm)
    throw ConfigError("admm_prune requires the ADMM method");
  if (cfg.rho <= 0.0) throw ConfigError("ADMM rho must be positive");

  std::vector<SlotAction> touched = touched_layers(graph, scheme);
  std::map<int, std::vector<double>> z, u;
  for (const SlotAction& a : touched) {
    const std::vector<double>& w = weights.at(a.layer_id).w;
    PruningMask m = project(graph.layer(a.layer_id), w, a.ptype, a.ratio);
    std::vector<double> zl = w;
    apply_mask(zl, m);
    z[a.layer_id] = std::move(zl);
    u[a.layer_id] = std::vector<double>(w.size(), 0.0);
  }

  for (int epoch = 0; epoch < cfg.prune_epochs; ++epoch) {
    w_step(weights, z, u);
    check_finite(weights);
    for (const SlotAction& a : touched) {
      const std::vector<double>& w = weights.at(a.layer_id).w;
      std::vector<double>& ul = u[a.layer_id];
      std::vector<double> wu(w.size());
      for (std::size_t j = 0; j < w.size(); ++j) wu[j] = w[j] + ul[j];
      PruningMask m = project(graph.layer(a.layer_id), wu, a.ptype, a.ratio);
      apply_mask(wu, m);
      std::vector<double>& zl = z[a.layer_id];
      zl = std::move(wu);
      for (std::size_t j = 0; j < w.size(); ++j) ul[j] += w[j] - zl[j];
    }
  }

  // Final projection of W + U, hard-applied; with zero rounds U is still 0
  // and this is exactly the magnitude mask.
  std::map<int, PruningMask> masks;
  for (const SlotAction& a : touched) {
    std::vector<double>& w = weights.at(a.layer_id).w;
    const std::vector<double>& ul = u[a.layer_id];
    std::vector<double> wu(w.size());
    for (std::size_t j = 0; j < w.size(); ++j) wu[j] = w[j] + ul[j];
    PruningMask m = project(graph.layer(a.layer_id), wu, a.ptype, a.ratio);
    apply_mask(w, m);
    masks.emplace(a.layer_id, std::move(m));
  }
  return masks;
}

}  // namespace upsearch
