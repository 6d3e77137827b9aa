#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "upsearch/model_ir.hpp"
#include "upsearch/pruning.hpp"

namespace upsearch {

// Compact storage for structurally pruned tensors. Every variant drops the
// structural zeros entirely; decode restores the masked dense tensor
// bit-exactly.

struct FilterSparse {
  std::vector<std::int32_t> kept;  // surviving filter indices, ascending
  std::vector<double> payload;     // their dense rows, concatenated
};

struct PatternSparse {
  std::vector<std::uint16_t> library;     // distinct cell masks, ascending value
  std::vector<std::int32_t> kept;         // surviving kernel indices, ascending
  std::vector<std::uint8_t> pattern_ids;  // per kept kernel: index into library
  std::vector<double> payload;            // 4 values per kept kernel, cell-ascending
};

struct BlockSparse {
  BlockSpec spec;
  std::vector<std::uint16_t> cell_masks;  // per block: k*k bits, blocks row-major
  std::vector<double> payload;  // kept cells per kernel; kernels in block order
};

struct SparseWeights {
  PruningType ptype = PruningType::Filter;
  LayerKind kind = LayerKind::Conv2d;
  int c_out = 0;
  int c_in = 0;    // kernels per filter: 1 for depthwise, else input channels
  int kernel = 0;  // square kernel extent; 1 for dense (fully connected) rows
  std::variant<FilterSparse, PatternSparse, BlockSparse> data;
};

// Encodes masked weights into the compact format for the mask's ptype.
// Audits the mask's structural constraint first and throws ShapeError on a
// mask/ptype mismatch. Block encoding uses the layer's default block spec;
// encode_block accepts a custom one.
SparseWeights encode(const LayerSpec& spec, const std::vector<double>& w,
                     const PruningMask& mask);
SparseWeights encode_block(const LayerSpec& spec, const std::vector<double>& w,
                           const PruningMask& mask, const BlockSpec& bs);

// Masked dense tensor, bit-exact.
std::vector<double> decode(const SparseWeights& s);

// Bytes of the stored arrays (payload + indices + masks), excluding the
// fixed-size header. This is the memory-traffic feature of the cost model.
std::size_t encoded_bytes(const SparseWeights& s);

// Format size implied by a mask alone; equals encoded_bytes of any encoding
// under that mask.
std::size_t encoded_bytes_from_mask(const LayerSpec& spec, const PruningMask& mask);

// Versioned little-endian binary file; bit-exact round trip.
void save_sparse(const SparseWeights& s, const std::string& path);
SparseWeights load_sparse(const std::string& path);

// Row permutation that groups equal sparsity signatures together. The
// signature of a row reads its mask with column 0 as the least significant
// bit; rows sort by (signature value ascending, original index), so the sort
// is stable. Groups are maximal runs of equal signature.
struct ReorderPlan {
  std::vector<int> perm;         // new position -> original row
  std::vector<int> inverse;      // original row -> new position
  std::vector<int> group_start;  // first new position of each signature run
};

ReorderPlan reorder(const std::vector<std::vector<std::uint8_t>>& row_masks);

// Convenience: signatures from the nonzero structure of a row-major matrix.
ReorderPlan reorder_dense(const std::vector<double>& m, int rows, int cols);

// Gathers rows of a row-major matrix into plan order.
std::vector<double> permute_rows(const std::vector<double>& m, int rows, int cols,
                                 const ReorderPlan& plan);

}  // namespace upsearch
