#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "helpers.hpp"
#include "upsearch/errors.hpp"
#include "upsearch/search.hpp"
#include "upsearch/trainer.hpp"

using namespace upsearch;
using namespace testutil;

namespace {

ControllerState fresh_controller(const std::vector<int>& vocabs,
                                 std::uint64_t seed) {
  return init_controller(ControllerConfig{}, vocabs, seed);
}

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct TempFile {
  std::string path;
  explicit TempFile(const std::string& name) : path("/tmp/upsearch_" + name) {
    std::remove(path.c_str());
  }
  ~TempFile() { std::remove(path.c_str()); }
};

// Independent enumeration of the synthetic space: five explicit loops, no
// shared odometer logic with argmax().
std::pair<double, std::vector<int>> oracle_best(const SyntheticObjective& obj) {
  double best = -1.0;
  std::vector<int> arg;
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 4; ++b)
      for (int c = 0; c < 6; ++c)
        for (int d = 0; d < 3; ++d)
          for (int e = 0; e < 5; ++e) {
            const double v = obj.value({a, b, c, d, e});
            if (v > best) {
              best = v;
              arg = {a, b, c, d, e};
            }
          }
  return {best, arg};
}

}  // namespace

TEST_CASE("token path graphs coincide with scheme graphs on real spaces") {
  ModelGraph g = desk_model({3, 12, 12}, 8);
  TokenSpace space = build_token_space(g);
  ControllerState ctl = fresh_controller(space.class_vocabs, 3);

  for (std::uint64_t s = 0; s < 25; ++s) {
    SampledSequence seq = sample_tokens(ctl, space, s);
    UnifiedScheme scheme = detokenize(seq.tokens);
    CHECK(tokens_to_graph(space, seq.tokens) == to_graph(scheme));
  }
  CHECK_THROWS_AS(tokens_to_graph(space, {0, 1}), ShapeError);
}

TEST_CASE("synthetic objective: 720 schemes, exhaustive argmax, seeded") {
  SyntheticObjective obj = make_synthetic_objective(11);
  CHECK(obj.space.count_valid() == 720);

  auto [want_best, want_arg] = oracle_best(obj);
  CHECK(obj.argmax() == want_arg);
  CHECK(obj.optimum() == want_best);
  CHECK(want_best > 0.0);
  CHECK(want_best < 1.0);

  SyntheticObjective again = make_synthetic_objective(11);
  CHECK(again.value({1, 2, 3, 0, 4}) == obj.value({1, 2, 3, 0, 4}));
  SyntheticObjective other = make_synthetic_objective(12);
  CHECK(other.value({1, 2, 3, 0, 4}) != obj.value({1, 2, 3, 0, 4}));

  CHECK_THROWS_AS(obj.value({0, 0}), ShapeError);
}

TEST_CASE("single-worker searches reproduce the run log byte for byte") {
  SyntheticObjective obj = make_synthetic_objective(4);
  ControllerConfig rcfg;
  Evaluator eval = make_synthetic_evaluator(obj, rcfg);

  TempFile log_a("det_a.jsonl"), log_b("det_b.jsonl");
  SearchConfig cfg;
  cfg.steps = 4;
  cfg.samples_per_step = 8;
  cfg.measured_per_step = 3;
  cfg.workers = 1;
  cfg.seed = 99;
  cfg.config_echo = "{\"mode\":\"synthetic\"}";

  cfg.run_log_path = log_a.path;
  ControllerState ca = fresh_controller(obj.space.class_vocabs, 7);
  SearchResult ra = search(ca, obj.space, cfg, eval);

  cfg.run_log_path = log_b.path;
  ControllerState cb = fresh_controller(obj.space.class_vocabs, 7);
  SearchResult rb = search(cb, obj.space, cfg, eval);

  CHECK(slurp(log_a.path) == slurp(log_b.path));
  CHECK(ra.log == rb.log);
  CHECK(ra.best == rb.best);

  // Wall times are scrubbed in single-worker mode; the log is config-pure.
  for (const EvalRecord& r : ra.log) CHECK(r.wall_time_s == 0.0);

  // Shape: per step, 3 measured then 5 surrogate records.
  CHECK(ra.log.size() == 4u * 8u);
  CHECK(ra.measured == 12);
  int measured_seen = 0;
  for (const EvalRecord& r : ra.log) {
    if (r.provenance == RewardProvenance::Measured) {
      ++measured_seen;
      CHECK(r.reward == obj.value(r.tokens));  // reward identity, exactly
    } else {
      CHECK(r.accuracy == 0.0);
    }
  }
  CHECK(measured_seen == 12);

  RunLog parsed = read_run_log(log_a.path);
  CHECK(parsed.records == ra.log);
  CHECK(parsed.header_json.find("\"seed\":99") != std::string::npos);
  CHECK(parsed.header_json.find("synthetic") != std::string::npos);
}

TEST_CASE("baseline tokens are evaluated first; 0 steps returns just them") {
  SyntheticObjective obj = make_synthetic_objective(5);
  ControllerConfig rcfg;
  Evaluator eval = make_synthetic_evaluator(obj, rcfg);

  SearchConfig cfg;
  cfg.steps = 0;
  cfg.workers = 1;
  cfg.baseline_tokens = {1, 0, 2, 1, 3};

  ControllerState ctl = fresh_controller(obj.space.class_vocabs, 2);
  SearchResult res = search(ctl, obj.space, cfg, eval);
  REQUIRE(res.log.size() == 1);
  CHECK(res.log[0].tokens == cfg.baseline_tokens);
  CHECK(res.best.tokens == cfg.baseline_tokens);
  CHECK(res.best.reward == obj.value(cfg.baseline_tokens));
  CHECK(res.measured == 1);
  CHECK(res.best_tuned == res.best);

  // The baseline is not a policy sample: no update happened.
  CHECK(ctl.step == 0);

  SearchConfig none;
  none.steps = 0;
  CHECK_THROWS_AS(search(ctl, obj.space, none, eval), ConfigError);
}

TEST_CASE("worker failures become sentinels and the search continues") {
  SyntheticObjective obj = make_synthetic_objective(6);
  ControllerConfig rcfg;
  Evaluator inner = make_synthetic_evaluator(obj, rcfg);
  Evaluator flaky = [&](const std::vector<int>& tokens, std::uint64_t seed) {
    if (tokens[2] == 0) throw NumericalError("injected failure");
    return inner(tokens, seed);
  };

  SearchConfig cfg;
  cfg.steps = 6;
  cfg.samples_per_step = 10;
  cfg.measured_per_step = 10;
  cfg.workers = 1;
  cfg.seed = 13;

  ControllerState ctl = fresh_controller(obj.space.class_vocabs, 13);
  SearchResult res = search(ctl, obj.space, cfg, flaky);

  int failures = 0;
  for (const EvalRecord& r : res.log) {
    if (!r.failed) continue;
    ++failures;
    CHECK(r.reward == -1.0);
    CHECK(r.note == "injected failure");
    CHECK(r.provenance == RewardProvenance::Measured);
    CHECK(r.tokens[2] == 0);
  }
  CHECK(failures > 0);  // vocab 6 at position 2: ~1/6 of samples
  CHECK(res.log.size() == 60);
  CHECK(!res.best.failed);
  CHECK(res.best.tokens[2] != 0);
}

TEST_CASE("policy baseline rises between step 5 and step 50") {
  int passed = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    SyntheticObjective obj = make_synthetic_objective(100 + seed);
    ControllerConfig rcfg;
    Evaluator eval = make_synthetic_evaluator(obj, rcfg);

    SearchConfig cfg;
    cfg.steps = 50;
    cfg.samples_per_step = 20;
    cfg.measured_per_step = 20;  // pure policy search, no surrogate rewards
    cfg.workers = 1;
    cfg.seed = seed;

    double at5 = 0.0, at50 = 0.0;
    cfg.on_step = [&](int step, const ControllerState& state) {
      if (step == 5) at5 = state.baseline;
      if (step == 50) at50 = state.baseline;
    };

    // The production learning rate is sized for hundreds of steps; learning
    // must outrun EMA noise inside 50 for the trend to be a signal.
    ControllerConfig cc;
    cc.learning_rate = 5e-3;
    ControllerState ctl = init_controller(cc, obj.space.class_vocabs, seed * 17);
    search(ctl, obj.space, cfg, eval);
    CHECK(ctl.step == 50);
    if (at50 >= at5) ++passed;
  }
  CHECK(passed >= 4);
}

TEST_CASE("bo-guided search finds the synthetic optimum within 2%") {
  SyntheticObjective obj = make_synthetic_objective(21);
  ControllerConfig rcfg;
  Evaluator eval = make_synthetic_evaluator(obj, rcfg);

  SearchConfig cfg;
  cfg.steps = 30;
  cfg.samples_per_step = 40;
  cfg.measured_per_step = 10;  // 300 evaluations, well under the 500 budget
  cfg.workers = 1;
  cfg.seed = 30;

  ControllerState ctl = fresh_controller(obj.space.class_vocabs, 30);
  SearchResult res = search(ctl, obj.space, cfg, eval);
  CHECK(res.measured == 300);
  CHECK(res.best.reward >= 0.98 * obj.optimum());
}

TEST_CASE("finalize runs once on the best record") {
  SyntheticObjective obj = make_synthetic_objective(8);
  ControllerConfig rcfg;
  Evaluator eval = make_synthetic_evaluator(obj, rcfg);

  SearchConfig cfg;
  cfg.steps = 2;
  cfg.samples_per_step = 6;
  cfg.measured_per_step = 6;
  cfg.workers = 1;
  cfg.seed = 77;

  int calls = 0;
  auto finalize = [&](const EvalRecord& best) {
    ++calls;
    EvalRecord tuned = best;
    tuned.note = "tuned";
    return tuned;
  };

  ControllerState ctl = fresh_controller(obj.space.class_vocabs, 77);
  SearchResult res = search(ctl, obj.space, cfg, eval, finalize);
  CHECK(calls == 1);
  CHECK(res.best_tuned.note == "tuned");
  CHECK(res.best_tuned.tokens == res.best.tokens);
}

TEST_CASE("config validation") {
  SyntheticObjective obj = make_synthetic_objective(9);
  ControllerConfig rcfg;
  Evaluator eval = make_synthetic_evaluator(obj, rcfg);
  ControllerState ctl = fresh_controller(obj.space.class_vocabs, 9);

  SearchConfig cfg;
  cfg.steps = -1;
  CHECK_THROWS_AS(search(ctl, obj.space, cfg, eval), ConfigError);
  cfg = SearchConfig{};
  cfg.measured_per_step = cfg.samples_per_step + 1;
  CHECK_THROWS_AS(search(ctl, obj.space, cfg, eval), ConfigError);
  cfg = SearchConfig{};
  cfg.samples_per_step = 0;
  CHECK_THROWS_AS(search(ctl, obj.space, cfg, eval), ConfigError);
  cfg = SearchConfig{};
  cfg.workers = -2;
  CHECK_THROWS_AS(search(ctl, obj.space, cfg, eval), ConfigError);
  cfg = SearchConfig{};
  cfg.steps = 1;
  cfg.config_echo = "not json";
  cfg.run_log_path = "/tmp/upsearch_badecho.jsonl";
  CHECK_THROWS_AS(search(ctl, obj.space, cfg, eval), ConfigError);
  std::remove("/tmp/upsearch_badecho.jsonl");
  cfg = SearchConfig{};
  CHECK_THROWS_AS(search(ctl, obj.space, cfg, nullptr), ConfigError);

  CHECK_THROWS_AS(read_run_log("/tmp/upsearch_missing_log.jsonl"), IoError);
  TempFile headerless("headerless.jsonl");
  {
    std::ofstream out(headerless.path);
    out << record_to_json(EvalRecord{}) << "\n";
  }
  CHECK_THROWS_AS(read_run_log(headerless.path), IoError);
}

TEST_CASE("real-space smoke run writes scheme observations") {
  ModelGraph g = chain_graph({conv(3, 6, 3, 2, false), bn(6), relu(6),
                              conv(6, 8, 3, 2), bn(8), relu(8), dense(72, 8)},
                             {3, 12, 12});
  Dataset data = make_synthetic_dataset(120, 30, 19, 12);
  Rng rng(4);
  ModelWeights w0 = init_weights(g, rng);
  TrainConfig warm;
  warm.learning_rate = 3e-3;
  ModelWeights base = train(g, w0, data, warm, 8, nullptr, 6).weights;

  CostModel cm;
  for (int p = 0; p < 3; ++p)
    for (int wi = 0; wi < 2; ++wi) {
      cm.arms[static_cast<std::size_t>(p)][static_cast<std::size_t>(wi)] =
          CostArm{true, {0.05, 2e-7, 1.5e-9, 0.0}, 1.0, 50};
    }

  TrainConfig tcfg;
  tcfg.learning_rate = 1e-3;
  ControllerConfig rcfg;
  TokenSpace space = build_token_space(g);

  Evaluator eval = [&](const std::vector<int>& tokens, std::uint64_t seed) {
    return evaluate_scheme(detokenize(tokens), g, base, data, tcfg, rcfg, cm,
                           seed);
  };

  TempFile run_log("real_run.jsonl"), obs_log("real_obs.jsonl");
  SearchConfig cfg;
  cfg.steps = 1;
  cfg.samples_per_step = 2;
  cfg.measured_per_step = 1;
  cfg.workers = 1;
  cfg.seed = 5;
  cfg.run_log_path = run_log.path;
  cfg.observation_log_path = obs_log.path;
  cfg.baseline_tokens = tokenize(UnifiedScheme{
      PruningMethod::Magnitude, {LayerActions{}}});

  ControllerState ctl = fresh_controller(space.class_vocabs, 5);
  SearchResult res = search(ctl, space, cfg, eval);

  CHECK(res.measured == 2);  // baseline + one selected sample
  CHECK(res.log.size() == 3);
  CHECK(!res.best.failed);
  CHECK(res.best.has_scheme);

  std::vector<ObservationRecord> obs = read_observations(obs_log.path);
  CHECK(obs.size() == 2);
  CHECK(validate(obs[0].scheme, g).empty());
  RunLog parsed = read_run_log(run_log.path);
  CHECK(parsed.records.size() == 3);
}
