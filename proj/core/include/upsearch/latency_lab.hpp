#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <vector>

#include "upsearch/model_ir.hpp"
#include "upsearch/sparse_format.hpp"
#include "upsearch/winograd.hpp"

namespace upsearch {

// Compiler-style execution parameters explored by the tuner.
struct TuningParams {
  int tile = 32;   // output-pixel block per GEMM pass
  int unroll = 4;  // reduction-loop unroll factor

  bool operator==(const TuningParams&) const = default;
};

inline constexpr std::array<int, 4> kTileSizes{8, 16, 32, 64};
inline constexpr std::array<int, 4> kUnrollFactors{1, 2, 4, 8};

// ConfigError when a value is outside the allowed sets.
void check_params(const TuningParams& p);

// Same-padding convolution executors on row-major [c][h][w] activations;
// out is shaped output_shape(spec). The sparse variants execute the compact
// formats directly, never materializing the dense tensor.
void conv_dense_exec(const LayerSpec& spec, const double* in,
                     const std::vector<double>& w, double* out,
                     const TuningParams& p);
void conv_filter_exec(const LayerSpec& spec, const double* in,
                      const FilterSparse& fs, double* out, const TuningParams& p);
void conv_pattern_exec(const LayerSpec& spec, const double* in,
                       const PatternSparse& ps, double* out, const TuningParams& p);
void conv_block_exec(const LayerSpec& spec, const double* in,
                     const BlockSparse& bs, double* out, const TuningParams& p);

// Stride-1 3x3 path through the F(2x2, 3x3) transform; the kernel transform
// is precomputed by the caller so repeated runs time only the data path.
void conv_winograd_exec(const LayerSpec& spec, const double* in,
                        const WinogradKernel<double>& wk, double* out);

// Dispatch on (sparse, winograd): dense when sparse is null, transform path
// when winograd is set (kernel transform included, so prefer
// conv_winograd_exec inside timing loops).
void run_layer(const LayerSpec& spec, const double* in,
               const std::vector<double>& dense_w, const SparseWeights* sparse,
               bool winograd, const TuningParams& p, double* out);

struct LatencyStats {
  double median_ms = 0.0;
  double iqr_ms = 0.0;
  int repetitions = 0;
};

// Median/IQR of repeated fn() wall times after warmup runs. Measurements are
// globally exclusive (one at a time). ConfigError when repetitions < 30;
// NumericalError when the median is under 100 timer ticks, i.e. the workload
// is too small for the clock to resolve.
LatencyStats microbench(const std::function<void()>& fn, int repetitions = 30,
                        int warmup = 3);

// Statistics seam: quartiles by linear interpolation on the sorted sample.
// The tick guard applies when tick_ms > 0.
LatencyStats stats_from_durations(std::vector<double> ms, double tick_ms = 0.0);

// Benchmarks one layer configuration end to end; activations are filled
// deterministically from seed.
LatencyStats bench_layer(const LayerSpec& spec, const std::vector<double>& dense_w,
                         const SparseWeights* sparse, bool winograd,
                         const TuningParams& p, int repetitions = 30,
                         std::uint64_t seed = 1);

struct GaConfig {
  int population = 8;
  int generations = 10;
  double crossover_p = 0.7;
  double mutation_p = 0.1;
  int tournament = 2;
  int elitism = 1;
  std::uint64_t seed = 0;
};

// Genetic tuner over the 16-point TuningParams space. cost is any callable:
// median latency in production, synthetic surfaces in tests. Costs are
// memoized per point, the best individual survives each generation, and the
// best point ever evaluated is returned, so the result is never worse than
// the best of the initial population. A population of 16 or more enumerates
// the whole space up front, making a single generation exhaustive.
TuningParams ga_tune(const std::function<double(const TuningParams&)>& cost,
                     const GaConfig& cfg);

}  // namespace upsearch
