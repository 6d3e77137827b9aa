#include "upsearch/sparse_format.hpp"

#include <algorithm>
#include <bit>
#include <fstream>
#include <numeric>
#include <string>

#include "upsearch/binio.hpp"
#include "upsearch/errors.hpp"

namespace upsearch {

namespace {

constexpr char kMagic[5] = "UPSW";
constexpr std::uint32_t kVersion = 1;

struct Layout {
  int c_out;
  int kpf;    // kernels per filter
  int cells;  // kernel * kernel
};

Layout layout_of(const LayerSpec& spec) {
  switch (spec.kind) {
    case LayerKind::Conv2d:
      return {spec.c_out, spec.c_in, spec.kernel * spec.kernel};
    case LayerKind::DepthwiseConv2d:
      return {spec.c_out, 1, spec.kernel * spec.kernel};
    case LayerKind::Dense:
      return {spec.c_out, spec.c_in, 1};
    default:
      throw ShapeError("layer kind carries no prunable weights");
  }
}

std::uint16_t kernel_bits(const PruningMask& mask, std::size_t k, int cells) {
  std::uint16_t bits = 0;
  for (int c = 0; c < cells; ++c)
    if (mask.keep[k * cells + c]) bits = static_cast<std::uint16_t>(bits | (1u << c));
  return bits;
}

void check_sizes(const Layout& lay, const std::vector<double>& w,
                 const PruningMask& mask) {
  std::size_t n = static_cast<std::size_t>(lay.c_out) * lay.kpf * lay.cells;
  if (w.size() != n || mask.keep.size() != n)
    throw ShapeError("weights/mask size does not match the layer layout");
}

FilterSparse encode_filter(const Layout& lay, const std::vector<double>& w,
                           const PruningMask& mask) {
  std::size_t per = static_cast<std::size_t>(lay.kpf) * lay.cells;
  FilterSparse out;
  for (int f = 0; f < lay.c_out; ++f) {
    for (std::size_t j = 0; j < per; ++j)
      if (mask.keep[f * per + j] != mask.keep[f * per])
        throw ShapeError("filter mask is not uniform within filter " +
                         std::to_string(f));
    if (mask.keep[f * per]) {
      out.kept.push_back(f);
      out.payload.insert(out.payload.end(), w.begin() + f * per,
                         w.begin() + (f + 1) * per);
    }
  }
  return out;
}

PatternSparse encode_pattern(const Layout& lay, const std::vector<double>& w,
                             const PruningMask& mask) {
  if (lay.cells != 9)
    throw ShapeError("pattern format requires 3x3 kernels");
  std::size_t nker = static_cast<std::size_t>(lay.c_out) * lay.kpf;
  PatternSparse out;
  std::vector<std::uint16_t> bits(nker);
  for (std::size_t k = 0; k < nker; ++k) {
    bits[k] = kernel_bits(mask, k, 9);
    int pop = std::popcount(static_cast<unsigned>(bits[k]));
    if (pop != 0 && pop != 4)
      throw ShapeError("pattern mask keeps " + std::to_string(pop) +
                       " cells in kernel " + std::to_string(k));
    if (pop == 4) out.library.push_back(bits[k]);
  }
  std::sort(out.library.begin(), out.library.end());
  out.library.erase(std::unique(out.library.begin(), out.library.end()),
                    out.library.end());
  for (std::size_t k = 0; k < nker; ++k) {
    if (bits[k] == 0) continue;
    out.kept.push_back(static_cast<std::int32_t>(k));
    auto it = std::lower_bound(out.library.begin(), out.library.end(), bits[k]);
    out.pattern_ids.push_back(
        static_cast<std::uint8_t>(it - out.library.begin()));
    for (int c = 0; c < 9; ++c)
      if (bits[k] & (1u << c)) out.payload.push_back(w[k * 9 + c]);
  }
  return out;
}

BlockSparse encode_block_impl(const Layout& lay, const std::vector<double>& w,
                              const PruningMask& mask, const BlockSpec& bs) {
  if (bs.b_in <= 0 || bs.b_out <= 0 || lay.kpf % bs.b_in != 0 ||
      lay.c_out % bs.b_out != 0)
    throw ShapeError("block spec does not divide the channel extents");
  int rows = lay.c_out / bs.b_out, cols = lay.kpf / bs.b_in;
  BlockSparse out;
  out.spec = bs;
  for (int bo = 0; bo < bs.b_out; ++bo)
    for (int bi = 0; bi < bs.b_in; ++bi) {
      std::size_t first =
          static_cast<std::size_t>(bo) * rows * lay.kpf + bi * cols;
      std::uint16_t shared = kernel_bits(mask, first, lay.cells);
      for (int o = bo * rows; o < (bo + 1) * rows; ++o)
        for (int i = bi * cols; i < (bi + 1) * cols; ++i)
          if (kernel_bits(mask, static_cast<std::size_t>(o) * lay.kpf + i,
                          lay.cells) != shared)
            throw ShapeError("block mask differs inside block (" +
                             std::to_string(bo) + ", " + std::to_string(bi) + ")");
      out.cell_masks.push_back(shared);
      for (int o = bo * rows; o < (bo + 1) * rows; ++o)
        for (int i = bi * cols; i < (bi + 1) * cols; ++i)
          for (int c = 0; c < lay.cells; ++c)
            if (shared & (1u << c))
              out.payload.push_back(
                  w[(static_cast<std::size_t>(o) * lay.kpf + i) * lay.cells + c]);
    }
  return out;
}

}  // namespace

SparseWeights encode(const LayerSpec& spec, const std::vector<double>& w,
                     const PruningMask& mask) {
  if (mask.ptype == PruningType::Block) {
    Layout lay = layout_of(spec);
    return encode_block(spec, w, mask, make_block_spec(lay.kpf, lay.c_out));
  }
  Layout lay = layout_of(spec);
  check_sizes(lay, w, mask);
  SparseWeights s;
  s.ptype = mask.ptype;
  s.kind = spec.kind;
  s.c_out = lay.c_out;
  s.c_in = lay.kpf;
  s.kernel = spec.kind == LayerKind::Dense ? 1 : spec.kernel;
  if (mask.ptype == PruningType::Filter)
    s.data = encode_filter(lay, w, mask);
  else
    s.data = encode_pattern(lay, w, mask);
  return s;
}

SparseWeights encode_block(const LayerSpec& spec, const std::vector<double>& w,
                           const PruningMask& mask, const BlockSpec& bs) {
  if (mask.ptype != PruningType::Block)
    throw ShapeError("encode_block needs a block mask");
  if (spec.kind == LayerKind::Dense)
    throw ShapeError("block format applies to convolutions only");
  Layout lay = layout_of(spec);
  check_sizes(lay, w, mask);
  SparseWeights s;
  s.ptype = PruningType::Block;
  s.kind = spec.kind;
  s.c_out = lay.c_out;
  s.c_in = lay.kpf;
  s.kernel = spec.kernel;
  s.data = encode_block_impl(lay, w, mask, bs);
  return s;
}

std::vector<double> decode(const SparseWeights& s) {
  int cells = s.kernel * s.kernel;
  std::size_t per = static_cast<std::size_t>(s.c_in) * cells;
  std::vector<double> w(static_cast<std::size_t>(s.c_out) * per, 0.0);
  if (const auto* f = std::get_if<FilterSparse>(&s.data)) {
    for (std::size_t j = 0; j < f->kept.size(); ++j)
      std::copy(f->payload.begin() + j * per, f->payload.begin() + (j + 1) * per,
                w.begin() + f->kept[j] * per);
  } else if (const auto* p = std::get_if<PatternSparse>(&s.data)) {
    std::size_t at = 0;
    for (std::size_t j = 0; j < p->kept.size(); ++j) {
      std::uint16_t bits = p->library[p->pattern_ids[j]];
      for (int c = 0; c < 9; ++c)
        if (bits & (1u << c))
          w[static_cast<std::size_t>(p->kept[j]) * 9 + c] = p->payload[at++];
    }
  } else {
    const auto& b = std::get<BlockSparse>(s.data);
    int rows = s.c_out / b.spec.b_out, cols = s.c_in / b.spec.b_in;
    std::size_t at = 0, blk = 0;
    for (int bo = 0; bo < b.spec.b_out; ++bo)
      for (int bi = 0; bi < b.spec.b_in; ++bi, ++blk) {
        std::uint16_t shared = b.cell_masks[blk];
        for (int o = bo * rows; o < (bo + 1) * rows; ++o)
          for (int i = bi * cols; i < (bi + 1) * cols; ++i)
            for (int c = 0; c < cells; ++c)
              if (shared & (1u << c))
                w[(static_cast<std::size_t>(o) * s.c_in + i) * cells + c] =
                    b.payload[at++];
      }
  }
  return w;
}

std::size_t encoded_bytes(const SparseWeights& s) {
  if (const auto* f = std::get_if<FilterSparse>(&s.data))
    return 4 * f->kept.size() + 8 * f->payload.size();
  if (const auto* p = std::get_if<PatternSparse>(&s.data))
    return 2 * p->library.size() + 4 * p->kept.size() + p->pattern_ids.size() +
           8 * p->payload.size();
  const auto& b = std::get<BlockSparse>(s.data);
  return 8 + 2 * b.cell_masks.size() + 8 * b.payload.size();
}

std::size_t encoded_bytes_from_mask(const LayerSpec& spec, const PruningMask& mask) {
  std::vector<double> zeros(mask.keep.size(), 0.0);
  return encoded_bytes(encode(spec, zeros, mask));
}

void save_sparse(const SparseWeights& s, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  write_magic(out, kMagic, kVersion);
  write_u32(out, static_cast<std::uint32_t>(s.ptype));
  write_u32(out, static_cast<std::uint32_t>(s.kind));
  write_u32(out, static_cast<std::uint32_t>(s.c_out));
  write_u32(out, static_cast<std::uint32_t>(s.c_in));
  write_u32(out, static_cast<std::uint32_t>(s.kernel));
  if (const auto* f = std::get_if<FilterSparse>(&s.data)) {
    write_u64(out, f->kept.size());
    for (std::int32_t v : f->kept) write_i32(out, v);
    write_f64_vec(out, f->payload);
  } else if (const auto* p = std::get_if<PatternSparse>(&s.data)) {
    write_u64(out, p->library.size());
    for (std::uint16_t v : p->library) write_u32(out, v);
    write_u64(out, p->kept.size());
    for (std::int32_t v : p->kept) write_i32(out, v);
    for (std::uint8_t v : p->pattern_ids) write_u32(out, v);
    write_f64_vec(out, p->payload);
  } else {
    const auto& b = std::get<BlockSparse>(s.data);
    write_u32(out, static_cast<std::uint32_t>(b.spec.b_in));
    write_u32(out, static_cast<std::uint32_t>(b.spec.b_out));
    write_u64(out, b.cell_masks.size());
    for (std::uint16_t v : b.cell_masks) write_u32(out, v);
    write_f64_vec(out, b.payload);
  }
  if (!out) throw IoError("short write to " + path);
}

SparseWeights load_sparse(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  if (read_magic(in, kMagic) != kVersion)
    throw IoError("unsupported version in " + path);
  SparseWeights s;
  s.ptype = static_cast<PruningType>(read_u32(in));
  s.kind = static_cast<LayerKind>(read_u32(in));
  s.c_out = static_cast<int>(read_u32(in));
  s.c_in = static_cast<int>(read_u32(in));
  s.kernel = static_cast<int>(read_u32(in));
  if (s.ptype == PruningType::Filter) {
    FilterSparse f;
    std::uint64_t n = read_u64(in);
    f.kept.resize(n);
    for (auto& v : f.kept) v = read_i32(in);
    f.payload = read_f64_vec(in);
    s.data = std::move(f);
  } else if (s.ptype == PruningType::Pattern) {
    PatternSparse p;
    std::uint64_t nlib = read_u64(in);
    p.library.resize(nlib);
    for (auto& v : p.library) v = static_cast<std::uint16_t>(read_u32(in));
    std::uint64_t n = read_u64(in);
    p.kept.resize(n);
    for (auto& v : p.kept) v = read_i32(in);
    p.pattern_ids.resize(n);
    for (auto& v : p.pattern_ids) v = static_cast<std::uint8_t>(read_u32(in));
    p.payload = read_f64_vec(in);
    s.data = std::move(p);
  } else {
    BlockSparse b;
    b.spec.b_in = static_cast<int>(read_u32(in));
    b.spec.b_out = static_cast<int>(read_u32(in));
    std::uint64_t n = read_u64(in);
    b.cell_masks.resize(n);
    for (auto& v : b.cell_masks) v = static_cast<std::uint16_t>(read_u32(in));
    b.payload = read_f64_vec(in);
    s.data = std::move(b);
  }
  return s;
}

ReorderPlan reorder(const std::vector<std::vector<std::uint8_t>>& row_masks) {
  int rows = static_cast<int>(row_masks.size());
  std::size_t max_cols = 0;
  for (const auto& r : row_masks) max_cols = std::max(max_cols, r.size());
  std::size_t words = (max_cols + 63) / 64;

  // signature value: column j contributes 2^j
  std::vector<std::vector<std::uint64_t>> sig(rows,
                                              std::vector<std::uint64_t>(words, 0));
  for (int r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < row_masks[r].size(); ++j)
      if (row_masks[r][j]) sig[r][j / 64] |= std::uint64_t{1} << (j % 64);

  auto less = [&](int a, int b) {
    for (std::size_t wrd = words; wrd-- > 0;) {
      if (sig[a][wrd] != sig[b][wrd]) return sig[a][wrd] < sig[b][wrd];
    }
    return false;
  };

  ReorderPlan plan;
  plan.perm.resize(rows);
  std::iota(plan.perm.begin(), plan.perm.end(), 0);
  std::stable_sort(plan.perm.begin(), plan.perm.end(), less);
  plan.inverse.resize(rows);
  for (int p = 0; p < rows; ++p) plan.inverse[plan.perm[p]] = p;
  for (int p = 0; p < rows; ++p)
    if (p == 0 || sig[plan.perm[p]] != sig[plan.perm[p - 1]])
      plan.group_start.push_back(p);
  return plan;
}

ReorderPlan reorder_dense(const std::vector<double>& m, int rows, int cols) {
  std::vector<std::vector<std::uint8_t>> masks(rows, std::vector<std::uint8_t>(cols));
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      masks[r][c] = m[static_cast<std::size_t>(r) * cols + c] != 0.0 ? 1 : 0;
  return reorder(masks);
}

std::vector<double> permute_rows(const std::vector<double>& m, int rows, int cols,
                                 const ReorderPlan& plan) {
  if (static_cast<int>(plan.perm.size()) != rows)
    throw ShapeError("plan row count does not match the matrix");
  std::vector<double> out(m.size());
  for (int p = 0; p < rows; ++p)
    std::copy(m.begin() + static_cast<std::size_t>(plan.perm[p]) * cols,
              m.begin() + static_cast<std::size_t>(plan.perm[p] + 1) * cols,
              out.begin() + static_cast<std::size_t>(p) * cols);
  return out;
}

}  // namespace upsearch
