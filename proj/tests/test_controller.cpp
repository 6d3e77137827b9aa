#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cmath>
#include <future>
#include <sstream>

#include "helpers.hpp"
#include "upsearch/controller.hpp"
#include "upsearch/errors.hpp"
#include "upsearch/scheme.hpp"

using namespace upsearch;
using namespace testutil;

namespace {

// Single-class space with no masking; the smallest policy playground.
TokenSpace toy_space(int vocab, int n_positions = 1) {
  TokenSpace sp;
  sp.class_vocabs = {vocab};
  for (int q = 0; q < n_positions; ++q)
    sp.positions.push_back({0, vocab, -1});
  return sp;
}

ControllerConfig small_cfg(int hidden) {
  ControllerConfig cfg;
  cfg.hidden_size = hidden;
  return cfg;
}

double linf(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

// Exact expected reward of a single-position policy via enumeration.
double exact_objective(const ControllerState& st, const TokenSpace& sp,
                       const std::vector<double>& rewards) {
  double j = 0.0;
  for (int t = 0; t < static_cast<int>(rewards.size()); ++t) {
    std::vector<double> lp = sequence_log_probs(st, sp, {t});
    j += std::exp(lp[0]) * rewards[t];
  }
  return j;
}

ModelGraph three_slot_graph() {
  // Slot 0: stride-1 3x3 (winograd capable); slot 1: stride-2; slot 2: 1x1.
  return chain_graph({conv(8, 8, 3, 1), bn(8), relu(8), conv(8, 16, 3, 2),
                      conv(16, 16, 1, 1)},
                     {8, 8, 8});
}

}  // namespace

TEST_CASE("parameter vector layout and uniform init") {
  ControllerConfig cfg;  // frozen defaults: hidden 49, 2 layers, range 0.1
  std::vector<int> vocabs(kClassVocab.begin(), kClassVocab.end());
  int vocab_sum = 0;
  for (int v : vocabs) vocab_sum += v;
  const int h = cfg.hidden_size;
  // start embedding + per-class embeddings + 2x LSTM (Wx, Wh, b) + heads
  const int expected = h + vocab_sum * h +
                       cfg.num_layers * (4 * h * h + 4 * h * h + 4 * h) +
                       vocab_sum * h + vocab_sum;
  CHECK(controller_param_count(cfg, vocabs) == expected);

  ControllerState st = init_controller(cfg, vocabs, 42);
  CHECK(st.theta.size() == static_cast<std::size_t>(expected));
  CHECK(st.adam_m.size() == st.theta.size());
  CHECK(st.adam_v.size() == st.theta.size());
  CHECK(st.step == 0);
  CHECK_FALSE(st.baseline_initialized);
  double lo = 1e9, hi = -1e9;
  for (double w : st.theta) {
    lo = std::min(lo, w);
    hi = std::max(hi, w);
  }
  CHECK(lo >= -cfg.init_range);
  CHECK(hi <= cfg.init_range);
  CHECK(hi - lo > 0.15);  // actually spread over the range, not constant

  ControllerState again = init_controller(cfg, vocabs, 42);
  CHECK(again.theta == st.theta);
  ControllerState other = init_controller(cfg, vocabs, 43);
  CHECK(other.theta != st.theta);
}

TEST_CASE("reward formula spot values") {
  ControllerConfig cfg;
  cfg.alpha = 0.01;
  cfg.latency_threshold_ms = 100.0;
  Reward r1 = compute_reward(0.76, 97.0, cfg);
  CHECK(r1.value == 0.76);  // under threshold: penalty exactly zero
  CHECK(r1.provenance == RewardProvenance::Measured);
  Reward r2 = compute_reward(0.74, 108.0, cfg);
  CHECK(r2.value == doctest::Approx(0.66).epsilon(1e-12));
  Reward r3 = compute_reward(0.50, 100.0, cfg);
  CHECK(r3.value == 0.50);  // boundary: max(0, 0) = 0
}

TEST_CASE("sampling is deterministic per seed and varies across seeds") {
  ModelGraph g = three_slot_graph();
  TokenSpace sp = build_token_space(g);
  ControllerState st = init_controller(
      small_cfg(12), std::vector<int>(kClassVocab.begin(), kClassVocab.end()), 5);

  SampledSequence a = sample_tokens(st, sp, 11);
  SampledSequence b = sample_tokens(st, sp, 11);
  CHECK(a.tokens == b.tokens);
  CHECK(a.log_probs == b.log_probs);

  bool saw_different = false;
  for (std::uint64_t seed = 0; seed < 50 && !saw_different; ++seed)
    saw_different = sample_tokens(st, sp, seed).tokens != a.tokens;
  CHECK(saw_different);
}

TEST_CASE("zero parameters sample uniformly over an unmasked vocabulary") {
  TokenSpace sp = toy_space(3);
  ControllerState st = init_controller(small_cfg(8), {3}, 1);
  std::fill(st.theta.begin(), st.theta.end(), 0.0);

  std::array<int, 3> counts{};
  const int draws = 30000;
  for (int seed = 0; seed < draws; ++seed)
    counts[static_cast<std::size_t>(
        sample_tokens(st, sp, static_cast<std::uint64_t>(seed)).tokens[0])]++;
  for (int t = 0; t < 3; ++t) {
    double freq = static_cast<double>(counts[static_cast<std::size_t>(t)]) / draws;
    CHECK(freq == doctest::Approx(1.0 / 3.0).epsilon(0.06));  // +-0.02 absolute
    CHECK(std::abs(freq - 1.0 / 3.0) <= 0.02);
  }
}

TEST_CASE("per-step distributions normalize and masked tokens have probability zero") {
  ModelGraph g = three_slot_graph();
  TokenSpace sp = build_token_space(g);
  ControllerState st = init_controller(
      small_cfg(10), std::vector<int>(kClassVocab.begin(), kClassVocab.end()), 7);

  // A valid base sequence: method 0; slot 0 keeps 3x3; slots 1-2 pick 1x1.
  std::vector<int> base = {0, 1, 1, 1, 2, 0, 0, 0, 1, 0, 0, 2, 3};
  REQUIRE(static_cast<int>(base.size()) == sp.size());
  REQUIRE(validate(detokenize(base), g).empty());

  for (int q = 0; q < sp.size(); ++q) {
    std::vector<int> prefix(base.begin(), base.begin() + q);
    std::vector<std::uint8_t> mask = sp.valid_mask(q, prefix);
    double total = 0.0;
    for (int t = 0; t < sp.positions[static_cast<std::size_t>(q)].vocab; ++t) {
      std::vector<int> toks = base;
      toks[static_cast<std::size_t>(q)] = t;
      double p = std::exp(sequence_log_probs(st, sp, toks)[static_cast<std::size_t>(q)]);
      if (mask[static_cast<std::size_t>(t)])
        total += p;
      else
        CHECK(p == 0.0);  // additive -1e9 underflows to an exact zero
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-10));
  }

  // Slot 2 sampled a 1x1 kernel in base; Pattern there must be impossible.
  std::vector<int> pat = base;
  pat[11] = static_cast<int>(PruningType::Pattern);
  CHECK(std::exp(sequence_log_probs(st, sp, pat)[11]) == 0.0);
}

TEST_CASE("sampled log-probs match recomputation and sum to the total") {
  ModelGraph g = three_slot_graph();
  TokenSpace sp = build_token_space(g);
  ControllerState st = init_controller(
      small_cfg(9), std::vector<int>(kClassVocab.begin(), kClassVocab.end()), 19);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    SampledSequence s = sample_tokens(st, sp, seed);
    std::vector<double> again = sequence_log_probs(st, sp, s.tokens);
    CHECK(max_abs_diff(s.log_probs, again) < 1e-12);
    double sum = 0.0;
    for (double lp : s.log_probs) sum += lp;
    CHECK(s.total_log_prob == doctest::Approx(sum).epsilon(1e-12));
  }
}

TEST_CASE("masking soundness: every sampled scheme validates, 10^4 seeds") {
  ModelGraph g = three_slot_graph();
  ControllerState st = init_controller(
      small_cfg(10), std::vector<int>(kClassVocab.begin(), kClassVocab.end()), 3);
  int violations = 0;
  for (std::uint64_t seed = 0; seed < 10000; ++seed) {
    auto [scheme, seq] = sample(st, g, seed);
    if (!validate(scheme, g).empty()) ++violations;
    if (detokenize(seq.tokens) != scheme) ++violations;
  }
  CHECK(violations == 0);
}

TEST_CASE("policy gradient matches finite differences on the two-action toy") {
  TokenSpace sp = toy_space(2);
  ControllerState st = init_controller(small_cfg(8), {2}, 21);

  // rewards (1, 0), baseline 0: J(theta) = p_0. Exact gradient is the
  // score-function form p_0 * d log p_0.
  const std::vector<double> rewards = {1.0, 0.0};
  const double p0 = std::exp(sequence_log_probs(st, sp, {0})[0]);
  std::vector<double> analytic = policy_gradient(st, sp, {{{0}, p0 * 1.0}});

  const double h = 1e-5;
  std::vector<double> fd(st.theta.size());
  for (std::size_t i = 0; i < st.theta.size(); ++i) {
    const double keep = st.theta[i];
    st.theta[i] = keep + h;
    const double jp = exact_objective(st, sp, rewards);
    st.theta[i] = keep - h;
    const double jm = exact_objective(st, sp, rewards);
    st.theta[i] = keep;
    fd[i] = (jp - jm) / (2.0 * h);
  }
  CHECK(max_abs_diff(fd, analytic) <= 1e-6 * linf(analytic));
}

TEST_CASE("backprop through time matches finite differences on the real space") {
  ModelGraph g = three_slot_graph();
  TokenSpace sp = build_token_space(g);
  ControllerState st = init_controller(
      small_cfg(6), std::vector<int>(kClassVocab.begin(), kClassVocab.end()), 13);

  std::vector<int> tok_a = sample_tokens(st, sp, 2).tokens;
  std::vector<int> tok_b = sample_tokens(st, sp, 4).tokens;
  REQUIRE(tok_a != tok_b);
  std::vector<WeightedSequence> batch = {{tok_a, 0.7}, {tok_b, -0.3}};
  std::vector<double> analytic = policy_gradient(st, sp, batch);

  auto objective = [&] {
    double l = 0.0;
    for (const WeightedSequence& ws : batch)
      for (double lp : sequence_log_probs(st, sp, ws.tokens)) l += ws.weight * lp;
    return l;
  };
  const double h = 1e-5;
  std::vector<double> fd(st.theta.size());
  for (std::size_t i = 0; i < st.theta.size(); ++i) {
    const double keep = st.theta[i];
    st.theta[i] = keep + h;
    const double jp = objective();
    st.theta[i] = keep - h;
    const double jm = objective();
    st.theta[i] = keep;
    fd[i] = (jp - jm) / (2.0 * h);
  }
  CHECK(max_abs_diff(fd, analytic) <= 1e-6 * linf(analytic));
}

TEST_CASE("Monte-Carlo policy gradient agrees with the exact gradient within 2%") {
  TokenSpace sp = toy_space(2);
  ControllerState st = init_controller(small_cfg(8), {2}, 31);
  const double p0 = std::exp(sequence_log_probs(st, sp, {0})[0]);
  std::vector<double> exact = policy_gradient(st, sp, {{{0}, p0}});

  // Reward 1 for action 0, else 0: the estimator reduces to
  // (count_0 / N) * d log p_0, accumulated here by frequency.
  const int n = 100000;
  int count0 = 0;
  for (int seed = 0; seed < n; ++seed)
    if (sample_tokens(st, sp, static_cast<std::uint64_t>(seed)).tokens[0] == 0)
      ++count0;
  std::vector<double> mc =
      policy_gradient(st, sp, {{{0}, static_cast<double>(count0) / n}});

  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < exact.size(); ++i) {
    num += (mc[i] - exact[i]) * (mc[i] - exact[i]);
    den += exact[i] * exact[i];
  }
  CHECK(std::sqrt(num) <= 0.02 * std::sqrt(den));
}

TEST_CASE("zero advantage leaves parameters bit-identical") {
  TokenSpace sp = toy_space(3, 2);
  ControllerState st = init_controller(small_cfg(8), {3}, 17);
  std::vector<double> before = st.theta;

  std::vector<BatchEntry> batch;
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    SampledSequence s = sample_tokens(st, sp, seed);
    Reward r;
    r.value = 0.37;
    batch.push_back({s.tokens, s.log_probs, r});
  }
  reinforce_update(st, sp, batch);
  CHECK(st.theta == before);  // baseline seeds to the batch mean
  CHECK(st.baseline == 0.37);
  CHECK(st.baseline_initialized);
  CHECK(st.step == 1);

  // Rewards still equal to the baseline: moments stay zero, still exact.
  reinforce_update(st, sp, batch);
  CHECK(st.theta == before);
  CHECK(st.step == 2);
}

TEST_CASE("baseline follows the EMA update") {
  TokenSpace sp = toy_space(2);
  ControllerConfig cfg = small_cfg(8);
  cfg.ema_decay = 0.9;
  ControllerState st = init_controller(cfg, {2}, 23);

  auto batch_with_values = [&](std::vector<double> values) {
    std::vector<BatchEntry> batch;
    for (std::size_t k = 0; k < values.size(); ++k) {
      SampledSequence s = sample_tokens(st, sp, k);
      Reward r;
      r.value = values[k];
      batch.push_back({s.tokens, s.log_probs, r});
    }
    return batch;
  };

  reinforce_update(st, sp, batch_with_values({0.4, 0.6}));  // seeds b = 0.5
  CHECK(st.baseline == doctest::Approx(0.5).epsilon(1e-12));
  reinforce_update(st, sp, batch_with_values({0.6, 0.8}));  // mean 0.7
  CHECK(st.baseline == doctest::Approx(0.9 * 0.5 + 0.1 * 0.7).epsilon(1e-12));
  CHECK(st.baseline == doctest::Approx(0.52).epsilon(1e-12));
}

TEST_CASE("REINFORCE shifts probability toward the rewarded action") {
  TokenSpace sp = toy_space(2);
  ControllerConfig cfg = small_cfg(8);
  cfg.learning_rate = 0.02;  // test-scale step size; direction is the claim
  ControllerState st = init_controller(cfg, {2}, 29);
  const double p0_before = std::exp(sequence_log_probs(st, sp, {0})[0]);

  std::uint64_t seed = 1000;
  for (int step = 0; step < 80; ++step) {
    std::vector<BatchEntry> batch;
    for (int k = 0; k < 10; ++k) {
      SampledSequence s = sample_tokens(st, sp, seed++);
      Reward r;
      r.value = s.tokens[0] == 0 ? 1.0 : 0.0;
      batch.push_back({s.tokens, s.log_probs, r});
    }
    reinforce_update(st, sp, batch);
  }
  const double p0_after = std::exp(sequence_log_probs(st, sp, {0})[0]);
  CHECK(p0_after > p0_before);
  CHECK(p0_after > 0.8);
}

TEST_CASE("gradient clipping seam") {
  std::vector<double> v = {3.0, 4.0};
  CHECK(clip_global_norm(v, 5.0) == doctest::Approx(5.0));
  CHECK(v[0] == 3.0);  // at the bound: untouched
  std::vector<double> w = {6.0, 8.0};
  CHECK(clip_global_norm(w, 5.0) == doctest::Approx(10.0));
  CHECK(w[0] == doctest::Approx(3.0));
  CHECK(w[1] == doctest::Approx(4.0));
  std::vector<double> z = {0.0, 0.0};
  CHECK(clip_global_norm(z, 5.0) == 0.0);
  CHECK(z[0] == 0.0);
}

TEST_CASE("checkpoint round trip restores bit-identical state and sampling") {
  ModelGraph g = three_slot_graph();
  TokenSpace sp = build_token_space(g);
  ControllerState st = init_controller(
      ControllerConfig{}, std::vector<int>(kClassVocab.begin(), kClassVocab.end()), 9);

  std::vector<BatchEntry> batch;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    SampledSequence s = sample_tokens(st, sp, seed);
    Reward r;
    r.value = 0.1 + 0.3 * static_cast<double>(seed);
    batch.push_back({s.tokens, s.log_probs, r});
  }
  reinforce_update(st, sp, batch);

  std::ostringstream os;
  save_controller(st, os);
  std::istringstream is(os.str());
  ControllerState back = load_controller(is);

  CHECK(back.theta == st.theta);
  CHECK(back.adam_m == st.adam_m);
  CHECK(back.adam_v == st.adam_v);
  CHECK(back.baseline == st.baseline);
  CHECK(back.baseline_initialized == st.baseline_initialized);
  CHECK(back.step == st.step);
  CHECK(back.class_vocabs == st.class_vocabs);
  CHECK(back.cfg.learning_rate == st.cfg.learning_rate);
  CHECK(back.cfg.ema_decay == st.cfg.ema_decay);

  SampledSequence s1 = sample_tokens(st, sp, 77);
  SampledSequence s2 = sample_tokens(back, sp, 77);
  CHECK(s1.tokens == s2.tokens);
  CHECK(s1.log_probs == s2.log_probs);

  CHECK_THROWS_AS(load_controller("/nonexistent/checkpoint.bin"), IoError);
  std::istringstream junk(std::string("NOPE") + std::string(64, '\0'));
  CHECK_THROWS_AS(load_controller(junk), IoError);
}

TEST_CASE("config and input validation") {
  std::vector<int> vocabs = {3};
  ControllerConfig bad = small_cfg(8);
  bad.batch = 0;
  CHECK_THROWS_AS(init_controller(bad, vocabs, 1), ConfigError);
  bad = small_cfg(8);
  bad.ema_decay = 1.0;
  CHECK_THROWS_AS(init_controller(bad, vocabs, 1), ConfigError);
  bad = small_cfg(0);
  CHECK_THROWS_AS(init_controller(bad, vocabs, 1), ConfigError);
  bad = small_cfg(8);
  bad.latency_threshold_ms = 0.0;
  CHECK_THROWS_AS(init_controller(bad, vocabs, 1), ConfigError);
  bad = small_cfg(8);
  bad.alpha = -0.1;
  CHECK_THROWS_AS(init_controller(bad, vocabs, 1), ConfigError);
  CHECK_THROWS_AS(init_controller(small_cfg(8), {}, 1), ConfigError);
  CHECK_THROWS_AS(init_controller(small_cfg(8), {3, 0}, 1), ConfigError);

  TokenSpace sp = toy_space(3);
  ControllerState st = init_controller(small_cfg(8), {3}, 1);

  CHECK_THROWS_AS(reinforce_update(st, sp, {}), ConfigError);
  SampledSequence s = sample_tokens(st, sp, 0);
  Reward nan_r;
  nan_r.value = std::nan("");
  CHECK_THROWS_AS(reinforce_update(st, sp, {{s.tokens, s.log_probs, nan_r}}),
                  NumericalError);

  TokenSpace wrong = toy_space(2);
  CHECK_THROWS_AS(sample_tokens(st, wrong, 0), ShapeError);
  CHECK_THROWS_AS(sequence_log_probs(st, sp, {0, 1}), ShapeError);
  CHECK_THROWS_AS(sequence_log_probs(st, sp, {5}), ShapeError);

  TokenSpace blocked = toy_space(3);
  blocked.custom_mask = [](int, const std::vector<int>&) {
    return std::vector<std::uint8_t>{0, 0, 0};
  };
  CHECK_THROWS_AS(sample_tokens(st, blocked, 0), ConfigError);
}

TEST_CASE("concurrent sampling from a shared snapshot is deterministic") {
  ModelGraph g = three_slot_graph();
  TokenSpace sp = build_token_space(g);
  ControllerState st = init_controller(
      small_cfg(10), std::vector<int>(kClassVocab.begin(), kClassVocab.end()), 37);
  auto run = [&](std::uint64_t seed) { return sample_tokens(st, sp, seed).tokens; };
  auto fa = std::async(std::launch::async, run, 123);
  auto fb = std::async(std::launch::async, run, 123);
  std::vector<int> a = fa.get(), b = fb.get();
  CHECK(a == b);
  CHECK(a == run(123));
}
