#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>

#include "helpers.hpp"
#include "upsearch/pruning.hpp"
#include "upsearch/rng.hpp"
#include "upsearch/sparse_format.hpp"

using namespace upsearch;

namespace {

LayerSpec conv_spec(int c_in, int c_out, int kernel, int stride = 1) {
  LayerSpec s = testutil::conv(c_in, c_out, kernel, stride);
  s.id = 0;
  s.input_shape = {c_in, 8, 8};
  return s;
}

LayerSpec dw_spec(int c, int stride = 1) {
  LayerSpec s;
  s.id = 0;
  s.kind = LayerKind::DepthwiseConv2d;
  s.c_in = c;
  s.c_out = c;
  s.kernel = 3;
  s.stride = stride;
  s.input_shape = {c, 8, 8};
  return s;
}

std::vector<double> random_weights(const LayerSpec& s, Rng& rng) {
  std::size_t n = static_cast<std::size_t>(s.c_out) *
                  (s.kind == LayerKind::DepthwiseConv2d ? 1 : s.c_in) *
                  std::max(1, s.kernel) * std::max(1, s.kernel);
  if (s.kind == LayerKind::Dense) n = static_cast<std::size_t>(s.c_out) * s.c_in;
  std::vector<double> w(n);
  for (auto& v : w) v = rng.normal();
  return w;
}

}  // namespace

TEST_CASE("filter encoding keeps surviving rows verbatim") {
  LayerSpec s = conv_spec(2, 4, 3);
  Rng rng(11);
  std::vector<double> w = random_weights(s, rng);

  PruningMask mask = project(s, w, PruningType::Filter, 0.5);
  std::vector<double> masked = w;
  apply_mask(masked, mask);
  SparseWeights sw = encode(s, masked, mask);

  const auto& fs = std::get<FilterSparse>(sw.data);
  REQUIRE(fs.kept.size() == 2);
  CHECK(std::is_sorted(fs.kept.begin(), fs.kept.end()));
  REQUIRE(fs.payload.size() == 2u * 2 * 9);
  for (std::size_t j = 0; j < fs.kept.size(); ++j)
    for (int e = 0; e < 18; ++e)
      CHECK(fs.payload[j * 18 + e] ==
            masked[static_cast<std::size_t>(fs.kept[j]) * 18 + e]);
  CHECK(sw.c_out == 4);
  CHECK(sw.c_in == 2);
  CHECK(sw.kernel == 3);
}

TEST_CASE("filter encoding applies to fully connected rows") {
  LayerSpec s;
  s.id = 0;
  s.kind = LayerKind::Dense;
  s.c_in = 6;
  s.c_out = 5;
  s.input_shape = {6, 1, 1};
  Rng rng(12);
  std::vector<double> w = random_weights(s, rng);

  PruningMask mask = project(s, w, PruningType::Filter, 0.5);
  std::vector<double> masked = w;
  apply_mask(masked, mask);
  SparseWeights sw = encode(s, masked, mask);
  const auto& fs = std::get<FilterSparse>(sw.data);
  CHECK(fs.kept.size() == 2);  // round(0.5 * 5) = 3 rows pruned
  CHECK(decode(sw) == masked);
}

TEST_CASE("all three formats round trip random masks bit-exactly") {
  Rng rng(101);
  std::vector<LayerSpec> shapes = {conv_spec(3, 6, 3), conv_spec(4, 8, 3),
                                   conv_spec(8, 4, 1), dw_spec(6),
                                   conv_spec(16, 8, 3)};
  int done = 0;
  for (int iter = 0; iter < 1000; ++iter) {
    const LayerSpec& s = shapes[iter % shapes.size()];
    double ratio = kPruningRatios[1 + rng.integer(5)];
    PruningType pt = static_cast<PruningType>(rng.integer(3));
    if (pt == PruningType::Pattern && s.kernel != 3) pt = PruningType::Filter;
    // projecting away every filter is rejected by design; stay below that
    if (pt == PruningType::Filter &&
        std::llround(ratio * s.c_out) >= s.c_out)
      ratio = 0.5;

    std::vector<double> w = random_weights(s, rng);
    PruningMask mask = project(s, w, pt, ratio);
    std::vector<double> masked = w;
    apply_mask(masked, mask);

    SparseWeights sw = encode(s, masked, mask);
    CHECK(decode(sw) == masked);
    CHECK(encoded_bytes(sw) == encoded_bytes_from_mask(s, mask));
    ++done;
  }
  CHECK(done == 1000);
}

TEST_CASE("encoded byte counts follow the documented layout") {
  LayerSpec s = conv_spec(2, 4, 3);
  Rng rng(21);
  std::vector<double> w = random_weights(s, rng);

  SUBCASE("filter: 4 per index, 8 per payload entry") {
    PruningMask mask = project(s, w, PruningType::Filter, 0.5);
    apply_mask(w, mask);
    SparseWeights sw = encode(s, w, mask);
    const auto& fs = std::get<FilterSparse>(sw.data);
    CHECK(encoded_bytes(sw) == 4 * fs.kept.size() + 8 * fs.payload.size());
  }
  SUBCASE("pattern: library, kept, ids, payload") {
    PruningMask mask = project(s, w, PruningType::Pattern, 0.5);
    apply_mask(w, mask);
    SparseWeights sw = encode(s, w, mask);
    const auto& ps = std::get<PatternSparse>(sw.data);
    CHECK(encoded_bytes(sw) == 2 * ps.library.size() + 4 * ps.kept.size() +
                                   ps.pattern_ids.size() + 8 * ps.payload.size());
    CHECK(ps.payload.size() == 4 * ps.kept.size());
  }
  SUBCASE("block: spec pair, per-block masks, payload") {
    PruningMask mask = project(s, w, PruningType::Block, 0.5);
    apply_mask(w, mask);
    SparseWeights sw = encode(s, w, mask);
    const auto& bs = std::get<BlockSparse>(sw.data);
    CHECK(encoded_bytes(sw) ==
          8 + 2 * bs.cell_masks.size() + 8 * bs.payload.size());
  }
}

TEST_CASE("pattern encoding: sorted unique library, ids resolve masks") {
  LayerSpec s = conv_spec(2, 3, 3);
  // Two distinct patterns: top-left square for even kernels, bottom-right
  // square for odd kernels. Magnitudes pick exactly those cells.
  std::vector<double> w(3 * 2 * 9, 0.01);
  for (int ker = 0; ker < 6; ++ker) {
    const std::array<int, 4> cells = (ker % 2 == 0)
                                         ? std::array<int, 4>{0, 1, 3, 4}
                                         : std::array<int, 4>{4, 5, 7, 8};
    for (int c : cells) w[static_cast<std::size_t>(ker) * 9 + c] = 1.0 + ker;
  }
  // ratio 0.3 sits under the 5/9 per-kernel floor, so no kernel is zeroed
  PruningMask mask = project(s, w, PruningType::Pattern, 0.3);
  std::vector<double> masked = w;
  apply_mask(masked, mask);
  SparseWeights sw = encode(s, masked, mask);
  const auto& ps = std::get<PatternSparse>(sw.data);

  REQUIRE(ps.library.size() == 2);
  CHECK(std::is_sorted(ps.library.begin(), ps.library.end()));
  const std::uint16_t even_mask = (1 << 0) | (1 << 1) | (1 << 3) | (1 << 4);
  const std::uint16_t odd_mask = (1 << 4) | (1 << 5) | (1 << 7) | (1 << 8);
  CHECK(ps.library[0] == std::min(even_mask, odd_mask));
  CHECK(ps.library[1] == std::max(even_mask, odd_mask));
  REQUIRE(ps.kept.size() == 6);
  for (std::size_t j = 0; j < ps.kept.size(); ++j) {
    std::uint16_t expect = (ps.kept[j] % 2 == 0) ? even_mask : odd_mask;
    CHECK(ps.library[ps.pattern_ids[j]] == expect);
  }
  CHECK(decode(sw) == masked);
}

TEST_CASE("mask and format kind must agree") {
  LayerSpec s = conv_spec(2, 4, 3);
  Rng rng(31);
  std::vector<double> w = random_weights(s, rng);

  PruningMask fmask = project(s, w, PruningType::Filter, 0.5);
  PruningMask pmask = project(s, w, PruningType::Pattern, 0.5);

  std::vector<double> wf = w, wp = w;
  apply_mask(wf, fmask);
  apply_mask(wp, pmask);

  PruningMask lying = fmask;
  lying.ptype = PruningType::Pattern;
  CHECK_THROWS_AS(encode(s, wf, lying), ShapeError);

  PruningMask lying2 = pmask;
  lying2.ptype = PruningType::Filter;
  CHECK_THROWS_AS(encode(s, wp, lying2), ShapeError);

  PruningMask wrong_size = fmask;
  wrong_size.keep.pop_back();
  CHECK_THROWS_AS(encode(s, wf, wrong_size), ShapeError);

  PruningMask bmask = project(s, w, PruningType::Block, 0.5);
  std::vector<double> wb = w;
  apply_mask(wb, bmask);
  CHECK_THROWS_AS(encode_block(s, wb, bmask, BlockSpec{3, 4}), ShapeError);
}

TEST_CASE("save and load round trip every variant bit-exactly") {
  Rng rng(41);
  LayerSpec s = conv_spec(4, 8, 3);
  std::vector<double> w = random_weights(s, rng);

  for (PruningType pt :
       {PruningType::Filter, PruningType::Pattern, PruningType::Block}) {
    PruningMask mask = project(s, w, pt, 0.7);
    std::vector<double> masked = w;
    apply_mask(masked, mask);
    SparseWeights sw = encode(s, masked, mask);

    std::string path = "sparse_rt_" + to_string(pt) + ".bin";
    save_sparse(sw, path);
    SparseWeights back = load_sparse(path);
    std::remove(path.c_str());

    CHECK(back.ptype == sw.ptype);
    CHECK(back.kind == sw.kind);
    CHECK(back.c_out == sw.c_out);
    CHECK(back.c_in == sw.c_in);
    CHECK(back.kernel == sw.kernel);
    CHECK(decode(back) == decode(sw));
  }
}

TEST_CASE("loading a non-sparse file is an io error") {
  const char* path = "sparse_bad.bin";
  {
    std::ofstream out(path, std::ios::binary);
    out << "not a sparse weights file";
  }
  CHECK_THROWS_AS(load_sparse(path), IoError);
  std::remove(path);
}

TEST_CASE("reorder sorts rows by signature value, stably") {
  SUBCASE("documented example: [101, 011, 101] -> perm {0, 2, 1}") {
    std::vector<std::vector<std::uint8_t>> rows = {
        {1, 0, 1}, {0, 1, 1}, {1, 0, 1}};
    ReorderPlan plan = reorder(rows);
    CHECK(plan.perm == std::vector<int>{0, 2, 1});
    CHECK(plan.inverse == std::vector<int>{0, 2, 1});
    CHECK(plan.group_start == std::vector<int>{0, 2});
  }
  SUBCASE("already grouped input is the identity") {
    std::vector<std::vector<std::uint8_t>> rows = {
        {1, 0, 0}, {1, 0, 0}, {0, 1, 0}, {0, 1, 0}};
    ReorderPlan plan = reorder(rows);
    CHECK(plan.perm == std::vector<int>{0, 1, 2, 3});
    CHECK(plan.group_start == std::vector<int>{0, 2});
  }
  SUBCASE("signatures wider than one machine word still order correctly") {
    // Rows agree on the first 64 columns; only column 70 separates them,
    // so the ordering is decided in the second signature word.
    std::vector<std::vector<std::uint8_t>> rows(3, std::vector<std::uint8_t>(72, 0));
    rows[0][70] = 1;
    rows[1][3] = 1;
    rows[1][70] = 1;
    rows[2][70] = 1;
    ReorderPlan plan = reorder(rows);
    // all rows tie in the high word (bit 70); row 1's extra low-word bit 3
    // makes it the largest signature, so it sorts last
    CHECK(plan.perm == std::vector<int>{0, 2, 1});
    CHECK(plan.group_start == std::vector<int>{0, 2});
  }
}

TEST_CASE("reorder plan is a permutation and inverse really inverts") {
  Rng rng(55);
  std::vector<std::vector<std::uint8_t>> rows(37, std::vector<std::uint8_t>(19));
  for (auto& r : rows)
    for (auto& b : r) b = rng.integer(2) ? 1 : 0;
  ReorderPlan plan = reorder(rows);

  std::set<int> seen(plan.perm.begin(), plan.perm.end());
  CHECK(seen.size() == rows.size());
  for (int orig = 0; orig < 37; ++orig) CHECK(plan.perm[plan.inverse[orig]] == orig);

  // signatures ascend over the permuted order
  auto sig_of = [&](int r) {
    std::uint64_t sig = 0;
    for (int c = 0; c < 19; ++c)
      if (rows[r][c]) sig |= (1ull << c);
    return sig;
  };
  for (std::size_t j = 1; j < plan.perm.size(); ++j) {
    CHECK(sig_of(plan.perm[j - 1]) <= sig_of(plan.perm[j]));
    if (sig_of(plan.perm[j - 1]) == sig_of(plan.perm[j]))
      CHECK(plan.perm[j - 1] < plan.perm[j]);  // stable within a group
  }
  CHECK(plan.group_start[0] == 0);
}

TEST_CASE("permuted matvec equals direct matvec under the plan") {
  Rng rng(66);
  const int rows = 24, cols = 10;
  std::vector<double> m(static_cast<std::size_t>(rows) * cols);
  for (auto& v : m) v = rng.integer(3) == 0 ? 0.0 : rng.normal();
  std::vector<double> x(cols);
  for (auto& v : x) v = rng.normal();

  ReorderPlan plan = reorder_dense(m, rows, cols);
  std::vector<double> pm = permute_rows(m, rows, cols, plan);

  auto matvec = [&](const std::vector<double>& a) {
    std::vector<double> y(rows, 0.0);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c)
        y[r] += a[static_cast<std::size_t>(r) * cols + c] * x[c];
    return y;
  };
  std::vector<double> direct = matvec(m);
  std::vector<double> permuted = matvec(pm);
  for (int r = 0; r < rows; ++r) CHECK(permuted[r] == direct[plan.perm[r]]);
}

TEST_CASE("block payload covers exactly the shared kept cells per kernel") {
  LayerSpec s = conv_spec(4, 4, 3);
  Rng rng(77);
  std::vector<double> w = random_weights(s, rng);
  PruningMask mask = project(s, w, PruningType::Block, 0.5);
  std::vector<double> masked = w;
  apply_mask(masked, mask);
  SparseWeights sw = encode(s, masked, mask);
  const auto& bs = std::get<BlockSparse>(sw.data);

  std::size_t expect = 0;
  for (std::uint16_t m : bs.cell_masks) {
    int pc = 0;
    for (int b = 0; b < 9; ++b)
      if (m & (1 << b)) ++pc;
    int per_block = (4 / bs.spec.b_out) * (4 / bs.spec.b_in);
    expect += static_cast<std::size_t>(pc) * per_block;
  }
  CHECK(bs.payload.size() == expect);
  CHECK(bs.cell_masks.size() ==
        static_cast<std::size_t>(bs.spec.b_in) * bs.spec.b_out);
  CHECK(decode(sw) == masked);
}
