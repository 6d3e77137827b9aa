#include "upsearch/latency_lab.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <mutex>
#include <numeric>
#include <string>

#include "upsearch/errors.hpp"
#include "upsearch/rng.hpp"

namespace upsearch {

namespace {

int index_in(const std::array<int, 4>& set, int v) {
  for (int j = 0; j < 4; ++j)
    if (set[j] == v) return j;
  return -1;
}

// C[M][N] += A[M][K] * B[K][N] with a compile-time reduction unroll and an
// output-column tile for cache blocking. C must be zeroed by the caller.
template <int U>
void gemm_panel(const double* a, const double* b, double* c, int m, int k, int n,
                int tile) {
  for (int j0 = 0; j0 < n; j0 += tile) {
    const int jend = std::min(j0 + tile, n);
    for (int row = 0; row < m; ++row) {
      const double* ar = a + static_cast<std::size_t>(row) * k;
      double* cr = c + static_cast<std::size_t>(row) * n;
      int kk = 0;
      for (; kk + U <= k; kk += U)
        for (int j = j0; j < jend; ++j) {
          double acc = 0.0;
          for (int u = 0; u < U; ++u)
            acc += ar[kk + u] * b[static_cast<std::size_t>(kk + u) * n + j];
          cr[j] += acc;
        }
      for (; kk < k; ++kk)
        for (int j = j0; j < jend; ++j)
          cr[j] += ar[kk] * b[static_cast<std::size_t>(kk) * n + j];
    }
  }
}

void gemm(const double* a, const double* b, double* c, int m, int k, int n,
          const TuningParams& p) {
  std::fill(c, c + static_cast<std::size_t>(m) * n, 0.0);
  switch (p.unroll) {
    case 1: gemm_panel<1>(a, b, c, m, k, n, p.tile); break;
    case 2: gemm_panel<2>(a, b, c, m, k, n, p.tile); break;
    case 4: gemm_panel<4>(a, b, c, m, k, n, p.tile); break;
    case 8: gemm_panel<8>(a, b, c, m, k, n, p.tile); break;
    default: throw ConfigError("unroll factor must be one of {1, 2, 4, 8}");
  }
}

// Patch matrix of a same-padded convolution: [c_in * k * k][oh * ow].
void im2col(const double* in, int c, int h, int w, int k, int stride,
            int oh, int ow, std::vector<double>& col) {
  const int pad = (k - 1) / 2;
  col.assign(static_cast<std::size_t>(c) * k * k * oh * ow, 0.0);
  for (int ch = 0; ch < c; ++ch)
    for (int r = 0; r < k; ++r)
      for (int cc = 0; cc < k; ++cc) {
        double* dst =
            col.data() +
            ((static_cast<std::size_t>(ch) * k + r) * k + cc) * oh * ow;
        for (int y = 0; y < oh; ++y) {
          const int sy = y * stride + r - pad;
          if (sy < 0 || sy >= h) continue;
          for (int x = 0; x < ow; ++x) {
            const int sx = x * stride + cc - pad;
            if (sx >= 0 && sx < w)
              dst[y * ow + x] = in[(static_cast<std::size_t>(ch) * h + sy) * w + sx];
          }
        }
      }
}

// Zero-padded copy with a (k-1)/2 border.
std::vector<double> pad_input(const double* in, int c, int h, int w, int pad) {
  const int ph = h + 2 * pad, pw = w + 2 * pad;
  std::vector<double> out(static_cast<std::size_t>(c) * ph * pw, 0.0);
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      std::copy(in + (static_cast<std::size_t>(ch) * h + y) * w,
                in + (static_cast<std::size_t>(ch) * h + y) * w + w,
                out.begin() + (static_cast<std::size_t>(ch) * ph + y + pad) * pw + pad);
  return out;
}

struct OutDims {
  int oh, ow;
};

OutDims out_dims(const LayerSpec& spec) {
  TensorShape s = output_shape(spec);
  return {s.height, s.width};
}

}  // namespace

void check_params(const TuningParams& p) {
  if (index_in(kTileSizes, p.tile) < 0)
    throw ConfigError("tile size must be one of {8, 16, 32, 64}");
  if (index_in(kUnrollFactors, p.unroll) < 0)
    throw ConfigError("unroll factor must be one of {1, 2, 4, 8}");
}

void conv_dense_exec(const LayerSpec& spec, const double* in,
                     const std::vector<double>& w, double* out,
                     const TuningParams& p) {
  const TensorShape& is = spec.input_shape;
  if (spec.kind == LayerKind::Dense) {
    gemm(w.data(), in, out, spec.c_out, spec.c_in, 1, p);
    return;
  }
  auto [oh, ow] = out_dims(spec);
  static thread_local std::vector<double> col;
  if (spec.kind == LayerKind::DepthwiseConv2d) {
    im2col(in, spec.c_in, is.height, is.width, spec.kernel, spec.stride, oh, ow, col);
    const int kk = spec.kernel * spec.kernel;
    for (int ch = 0; ch < spec.c_out; ++ch)
      gemm(w.data() + static_cast<std::size_t>(ch) * kk,
           col.data() + static_cast<std::size_t>(ch) * kk * oh * ow,
           out + static_cast<std::size_t>(ch) * oh * ow, 1, kk, oh * ow, p);
    return;
  }
  im2col(in, spec.c_in, is.height, is.width, spec.kernel, spec.stride, oh, ow, col);
  gemm(w.data(), col.data(), out, spec.c_out,
       spec.c_in * spec.kernel * spec.kernel, oh * ow, p);
}

void conv_filter_exec(const LayerSpec& spec, const double* in,
                      const FilterSparse& fs, double* out, const TuningParams& p) {
  const TensorShape& is = spec.input_shape;
  auto [oh, ow] = out_dims(spec);
  std::fill(out, out + static_cast<std::size_t>(spec.c_out) * oh * ow, 0.0);
  if (fs.kept.empty()) return;
  if (spec.kind == LayerKind::Dense) {
    std::vector<double> rows(fs.kept.size());
    gemm(fs.payload.data(), in, rows.data(), static_cast<int>(fs.kept.size()),
         spec.c_in, 1, p);
    for (std::size_t j = 0; j < fs.kept.size(); ++j) out[fs.kept[j]] = rows[j];
    return;
  }
  static thread_local std::vector<double> col;
  im2col(in, spec.c_in, is.height, is.width, spec.kernel, spec.stride, oh, ow, col);
  if (spec.kind == LayerKind::DepthwiseConv2d) {
    const int kk = spec.kernel * spec.kernel;
    for (std::size_t j = 0; j < fs.kept.size(); ++j)
      gemm(fs.payload.data() + j * kk,
           col.data() + static_cast<std::size_t>(fs.kept[j]) * kk * oh * ow,
           out + static_cast<std::size_t>(fs.kept[j]) * oh * ow, 1, kk, oh * ow,
           p);
    return;
  }
  const int k2 = spec.c_in * spec.kernel * spec.kernel;
  std::vector<double> rows(fs.kept.size() * static_cast<std::size_t>(oh) * ow);
  gemm(fs.payload.data(), col.data(), rows.data(),
       static_cast<int>(fs.kept.size()), k2, oh * ow, p);
  for (std::size_t j = 0; j < fs.kept.size(); ++j)
    std::copy(rows.begin() + j * oh * ow, rows.begin() + (j + 1) * oh * ow,
              out + static_cast<std::size_t>(fs.kept[j]) * oh * ow);
}

void conv_pattern_exec(const LayerSpec& spec, const double* in,
                       const PatternSparse& ps, double* out, const TuningParams& p) {
  const TensorShape& is = spec.input_shape;
  auto [oh, ow] = out_dims(spec);
  const int pad = 1, stride = spec.stride;
  const int kpf = spec.kind == LayerKind::DepthwiseConv2d ? 1 : spec.c_in;
  std::fill(out, out + static_cast<std::size_t>(spec.c_out) * oh * ow, 0.0);
  std::vector<double> padded = pad_input(in, spec.c_in, is.height, is.width, pad);
  const int pw = is.width + 2 * pad;

  // cell offsets per library pattern
  std::vector<std::array<int, 4>> offs(ps.library.size());
  for (std::size_t j = 0; j < ps.library.size(); ++j) {
    int at = 0;
    for (int c = 0; c < 9; ++c)
      if (ps.library[j] & (1u << c)) offs[j][at++] = (c / 3) * pw + (c % 3);
  }

  // kernels grouped by pattern id so one offset set stays hot per run
  for (std::size_t id = 0; id < ps.library.size(); ++id) {
    const std::array<int, 4>& o4 = offs[id];
    for (std::size_t j = 0; j < ps.kept.size(); ++j) {
      if (static_cast<std::size_t>(ps.pattern_ids[j]) != id) continue;
      const int kker = ps.kept[j];
      const int o = kker / kpf;
      const int i = spec.kind == LayerKind::DepthwiseConv2d ? o : kker % kpf;
      const double* w4 = ps.payload.data() + 4 * j;
      double* orow = out + static_cast<std::size_t>(o) * oh * ow;
      const double* base = padded.data() + static_cast<std::size_t>(i) *
                                               (is.height + 2 * pad) * pw;
      for (int y = 0; y < oh; ++y) {
        const double* prow = base + static_cast<std::size_t>(y) * stride * pw;
        for (int x0 = 0; x0 < ow; x0 += p.tile) {
          const int xend = std::min(x0 + p.tile, ow);
          for (int x = x0; x < xend; ++x) {
            const double* px = prow + x * stride;
            orow[y * ow + x] += w4[0] * px[o4[0]] + w4[1] * px[o4[1]] +
                                w4[2] * px[o4[2]] + w4[3] * px[o4[3]];
          }
        }
      }
    }
  }
}

namespace {

// One kernel's contribution with a compile-time cell count, so the inner
// loop fully unrolls and the cost per kept cell stays flat across masks.
template <int NC>
void accum_cells(const double* base, int oh, int ow, int stride, int pw,
                 const int* off, const double* vals, double* orow) {
  for (int y = 0; y < oh; ++y) {
    const double* prow = base + static_cast<std::size_t>(y) * stride * pw;
    for (int x = 0; x < ow; ++x) {
      const double* px = prow + x * stride;
      double acc = 0.0;
      for (int j = 0; j < NC; ++j) acc += vals[j] * px[off[j]];
      orow[y * ow + x] += acc;
    }
  }
}

void accum_cells_n(int n, const double* base, int oh, int ow, int stride, int pw,
                   const int* off, const double* vals, double* orow) {
  switch (n) {
    case 1: accum_cells<1>(base, oh, ow, stride, pw, off, vals, orow); break;
    case 2: accum_cells<2>(base, oh, ow, stride, pw, off, vals, orow); break;
    case 3: accum_cells<3>(base, oh, ow, stride, pw, off, vals, orow); break;
    case 4: accum_cells<4>(base, oh, ow, stride, pw, off, vals, orow); break;
    case 5: accum_cells<5>(base, oh, ow, stride, pw, off, vals, orow); break;
    case 6: accum_cells<6>(base, oh, ow, stride, pw, off, vals, orow); break;
    case 7: accum_cells<7>(base, oh, ow, stride, pw, off, vals, orow); break;
    case 8: accum_cells<8>(base, oh, ow, stride, pw, off, vals, orow); break;
    case 9: accum_cells<9>(base, oh, ow, stride, pw, off, vals, orow); break;
    default: break;  // empty mask contributes nothing
  }
}

}  // namespace

void conv_block_exec(const LayerSpec& spec, const double* in,
                     const BlockSparse& bs, double* out, const TuningParams&) {
  const TensorShape& is = spec.input_shape;
  auto [oh, ow] = out_dims(spec);
  const int pad = (spec.kernel - 1) / 2, stride = spec.stride;
  const int kpf = spec.kind == LayerKind::DepthwiseConv2d ? 1 : spec.c_in;
  const int cells = spec.kernel * spec.kernel;
  const int rows = spec.c_out / bs.spec.b_out, cols = kpf / bs.spec.b_in;
  std::fill(out, out + static_cast<std::size_t>(spec.c_out) * oh * ow, 0.0);
  std::vector<double> padded = pad_input(in, spec.c_in, is.height, is.width, pad);
  const int pw = is.width + 2 * pad, ph = is.height + 2 * pad;

  std::size_t at = 0, blk = 0;
  std::vector<int> off;
  for (int bo = 0; bo < bs.spec.b_out; ++bo)
    for (int bi = 0; bi < bs.spec.b_in; ++bi, ++blk) {
      const std::uint16_t shared = bs.cell_masks[blk];
      off.clear();
      for (int c = 0; c < cells; ++c)
        if (shared & (1u << c))
          off.push_back((c / spec.kernel) * pw + (c % spec.kernel));
      for (int o = bo * rows; o < (bo + 1) * rows; ++o)
        for (int i = bi * cols; i < (bi + 1) * cols; ++i) {
          const int in_ch = spec.kind == LayerKind::DepthwiseConv2d ? o : i;
          const double* vals = bs.payload.data() + at;
          at += off.size();
          accum_cells_n(static_cast<int>(off.size()),
                        padded.data() + static_cast<std::size_t>(in_ch) * ph * pw,
                        oh, ow, stride, pw, off.data(), vals,
                        out + static_cast<std::size_t>(o) * oh * ow);
        }
    }
}

void conv_winograd_exec(const LayerSpec& spec, const double* in,
                        const WinogradKernel<double>& wk, double* out) {
  if (spec.kind != LayerKind::Conv2d || !winograd_eligible(spec))
    throw ShapeError("winograd path requires a stride-1 3x3 convolution");
  const TensorShape& is = spec.input_shape;
  std::vector<double> padded = pad_input(in, spec.c_in, is.height, is.width, 1);
  winograd_conv(padded.data(), spec.c_in, is.height + 2, is.width + 2, wk, out);
}

namespace {

// Per-channel F(2x2, 3x3) for depthwise stages; transforms are precomputed
// so timed runs pay only the data path.
std::vector<WinogradKernel<double>> dw_transforms(const std::vector<double>& w,
                                                  int channels) {
  std::vector<WinogradKernel<double>> per(channels);
  for (int ch = 0; ch < channels; ++ch)
    per[ch] =
        transform_winograd_kernel(w.data() + static_cast<std::size_t>(ch) * 9, 1, 1);
  return per;
}

void dw_winograd(const LayerSpec& spec, const double* in,
                 const std::vector<WinogradKernel<double>>& per, double* out) {
  const TensorShape& is = spec.input_shape;
  std::vector<double> padded = pad_input(in, spec.c_in, is.height, is.width, 1);
  const int ph = is.height + 2, pwd = is.width + 2;
  for (int ch = 0; ch < spec.c_out; ++ch)
    winograd_conv(padded.data() + static_cast<std::size_t>(ch) * ph * pwd, 1, ph,
                  pwd, per[ch],
                  out + static_cast<std::size_t>(ch) * is.height * is.width);
}

}  // namespace

void run_layer(const LayerSpec& spec, const double* in,
               const std::vector<double>& dense_w, const SparseWeights* sparse,
               bool winograd, const TuningParams& p, double* out) {
  check_params(p);
  if (winograd) {
    std::vector<double> w = sparse ? decode(*sparse) : dense_w;
    if (spec.kind == LayerKind::DepthwiseConv2d) {
      dw_winograd(spec, in, dw_transforms(w, spec.c_out), out);
      return;
    }
    WinogradKernel<double> wk =
        transform_winograd_kernel(w.data(), spec.c_out, spec.c_in);
    conv_winograd_exec(spec, in, wk, out);
    return;
  }
  if (!sparse) {
    conv_dense_exec(spec, in, dense_w, out, p);
    return;
  }
  switch (sparse->ptype) {
    case PruningType::Filter:
      conv_filter_exec(spec, in, std::get<FilterSparse>(sparse->data), out, p);
      return;
    case PruningType::Pattern:
      conv_pattern_exec(spec, in, std::get<PatternSparse>(sparse->data), out, p);
      return;
    case PruningType::Block:
      conv_block_exec(spec, in, std::get<BlockSparse>(sparse->data), out, p);
      return;
  }
  throw ShapeError("unknown sparse format");
}

LatencyStats stats_from_durations(std::vector<double> ms, double tick_ms) {
  if (ms.empty()) throw ConfigError("no durations to summarize");
  std::sort(ms.begin(), ms.end());
  auto quantile = [&](double q) {
    const double h = q * (static_cast<double>(ms.size()) - 1.0);
    const std::size_t lo = static_cast<std::size_t>(h);
    const std::size_t hi = std::min(lo + 1, ms.size() - 1);
    return ms[lo] + (h - static_cast<double>(lo)) * (ms[hi] - ms[lo]);
  };
  LatencyStats stats;
  stats.median_ms = quantile(0.5);
  stats.iqr_ms = quantile(0.75) - quantile(0.25);
  stats.repetitions = static_cast<int>(ms.size());
  if (tick_ms > 0.0 && stats.median_ms < 100.0 * tick_ms)
    throw NumericalError(
        "timer resolution insufficient for this workload; increase the "
        "problem size");
  return stats;
}

LatencyStats microbench(const std::function<void()>& fn, int repetitions,
                        int warmup) {
  if (repetitions < 30)
    throw ConfigError("microbench needs at least 30 repetitions");
  static std::mutex gate;  // measurements are globally exclusive
  std::lock_guard<std::mutex> lock(gate);
  for (int j = 0; j < warmup; ++j) fn();
  std::vector<double> ms(repetitions);
  using clock = std::chrono::steady_clock;
  for (int r = 0; r < repetitions; ++r) {
    auto t0 = clock::now();
    fn();
    auto t1 = clock::now();
    ms[r] = std::chrono::duration<double, std::milli>(t1 - t0).count();
  }
  const double tick_ms =
      1e3 * static_cast<double>(clock::period::num) / clock::period::den;
  return stats_from_durations(std::move(ms), tick_ms);
}

LatencyStats bench_layer(const LayerSpec& spec, const std::vector<double>& dense_w,
                         const SparseWeights* sparse, bool winograd,
                         const TuningParams& p, int repetitions,
                         std::uint64_t seed) {
  check_params(p);
  const TensorShape& is = spec.input_shape;
  std::size_t in_n = spec.kind == LayerKind::Dense
                         ? static_cast<std::size_t>(spec.c_in)
                         : static_cast<std::size_t>(is.channels) * is.height * is.width;
  Rng rng(seed);
  std::vector<double> in(in_n);
  for (auto& v : in) v = rng.uniform(-1.0, 1.0);
  TensorShape os = output_shape(spec);
  std::vector<double> out(static_cast<std::size_t>(os.channels) * os.height * os.width);

  if (winograd && spec.kind == LayerKind::Conv2d) {
    std::vector<double> w = sparse ? decode(*sparse) : dense_w;
    WinogradKernel<double> wk =
        transform_winograd_kernel(w.data(), spec.c_out, spec.c_in);
    return microbench(
        [&] { conv_winograd_exec(spec, in.data(), wk, out.data()); }, repetitions);
  }
  if (winograd && spec.kind == LayerKind::DepthwiseConv2d) {
    std::vector<double> w = sparse ? decode(*sparse) : dense_w;
    std::vector<WinogradKernel<double>> per = dw_transforms(w, spec.c_out);
    return microbench([&] { dw_winograd(spec, in.data(), per, out.data()); },
                      repetitions);
  }
  return microbench(
      [&] { run_layer(spec, in.data(), dense_w, sparse, winograd, p, out.data()); },
      repetitions);
}

TuningParams ga_tune(const std::function<double(const TuningParams&)>& cost,
                     const GaConfig& cfg) {
  if (cfg.population < 2) throw ConfigError("GA population must be at least 2");
  if (cfg.generations < 1) throw ConfigError("GA needs at least one generation");
  Rng rng(cfg.seed);

  struct Point {
    int ti, ui;
  };
  std::array<std::array<double, 4>, 4> memo;
  std::array<std::array<bool, 4>, 4> seen{};
  auto eval = [&](const Point& pt) {
    if (!seen[pt.ti][pt.ui]) {
      memo[pt.ti][pt.ui] = cost({kTileSizes[pt.ti], kUnrollFactors[pt.ui]});
      seen[pt.ti][pt.ui] = true;
    }
    return memo[pt.ti][pt.ui];
  };

  auto pick4 = [&] { return static_cast<int>(rng.integer(4)); };
  // Seed with distinct points (a shuffled prefix of the 16-point space) so a
  // small population does not waste slots on duplicates; populations of 16 or
  // more start exhaustive.
  std::vector<int> deck(16);
  std::iota(deck.begin(), deck.end(), 0);
  rng.shuffle(deck);
  std::vector<Point> pop;
  for (int j = 0; j < std::min(cfg.population, 16); ++j)
    pop.push_back({deck[j] / 4, deck[j] % 4});
  while (static_cast<int>(pop.size()) < cfg.population)
    pop.push_back({pick4(), pick4()});

  Point best{};
  double best_cost = std::numeric_limits<double>::infinity();
  auto score_pop = [&](std::vector<double>& fit) {
    fit.resize(pop.size());
    for (std::size_t j = 0; j < pop.size(); ++j) {
      fit[j] = eval(pop[j]);
      if (fit[j] < best_cost) {
        best_cost = fit[j];
        best = pop[j];
      }
    }
  };
  std::vector<double> fit;
  score_pop(fit);

  for (int gen = 1; gen < cfg.generations; ++gen) {
    auto tournament = [&]() -> const Point& {
      std::size_t winner = rng.integer(pop.size());
      for (int t = 1; t < cfg.tournament; ++t) {
        std::size_t other = rng.integer(pop.size());
        if (fit[other] < fit[winner]) winner = other;
      }
      return pop[winner];
    };
    std::vector<Point> next;
    for (int e = 0; e < cfg.elitism; ++e) next.push_back(best);
    while (static_cast<int>(next.size()) < cfg.population) {
      Point a = tournament(), b = tournament();
      Point child = a;
      if (rng.uniform() < cfg.crossover_p) child = {a.ti, b.ui};  // single point
      if (rng.uniform() < cfg.mutation_p) child.ti = pick4();
      if (rng.uniform() < cfg.mutation_p) child.ui = pick4();
      next.push_back(child);
    }
    pop = std::move(next);
    score_pop(fit);
  }
  return {kTileSizes[best.ti], kUnrollFactors[best.ui]};
}

}  // namespace upsearch
