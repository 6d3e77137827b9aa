#pragma once

#include <vector>

#include "upsearch/model_ir.hpp"

namespace upsearch {

// Valid (unpadded) convolution primitives used for equivalence checks and for
// the fast 3x3 path. Layouts are row-major: input [c_in][h][w], kernels
// [c_out][c_in][k][k], output [c_out][oh][ow] with oh = (h - k) / stride + 1.

template <typename T>
void direct_conv(const T* in, int c_in, int h, int w, const T* kern, int c_out, int ksize,
                 int stride, T* out);

// F(2x2, 3x3) Winograd convolution, stride 1. Produces 2x2 output tiles from
// 4x4 input tiles with 16 elementwise products where the direct method needs
// 36 multiplies; inputs whose output extent is odd are zero-padded on the
// bottom/right and the excess is cropped, so results match direct_conv on the
// whole valid region.
//
// Kernel transforms are precomputed once per layer and reused across calls;
// u is laid out [16][c_out][c_in].
template <typename T>
struct WinogradKernel {
  int c_out = 0;
  int c_in = 0;
  std::vector<T> u;
};

template <typename T>
WinogradKernel<T> transform_winograd_kernel(const T* kern, int c_out, int c_in);

template <typename T>
void winograd_conv(const T* in, int c_in, int h, int w, const WinogradKernel<T>& wk, T* out);

// Convenience overload transforming the kernel on the fly.
template <typename T>
void winograd_conv(const T* in, int c_in, int h, int w, const T* kern, int c_out, T* out);

// Multiply-count ratio of direct vs Winograd per output tile (36 / 16). The
// input/output transforms are extra additions, reported separately so callers
// do not mistake the ratio for an end-to-end speedup.
struct WinogradCost {
  double arithmetic_ratio = 0.0;  // direct multiplies / winograd multiplies
  int direct_mults_per_tile = 0;
  int winograd_mults_per_tile = 0;
};

// Eligibility: a 3x3 stride-1 convolution stage (plain or depthwise). Throws
// ShapeError otherwise.
WinogradCost arithmetic_ratio(const LayerSpec& spec);
bool winograd_eligible(const LayerSpec& spec);

// Number of 2x2 output tiles for a given valid-conv output extent.
long long winograd_tile_count(int out_h, int out_w);

}  // namespace upsearch
