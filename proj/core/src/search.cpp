#include "upsearch/search.hpp"

#include <atomic>
#include <fstream>
#include <mutex>
#include <numeric>
#include <thread>

#include <nlohmann/json.hpp>

#include "upsearch/errors.hpp"
#include "upsearch/rng.hpp"

namespace upsearch {
namespace {

using nlohmann::json;

void check_search_config(const SearchConfig& cfg) {
  if (cfg.steps < 0) throw ConfigError("search steps must be non-negative");
  if (cfg.samples_per_step < 1)
    throw ConfigError("samples_per_step must be at least 1");
  if (cfg.measured_per_step < 1 ||
      cfg.measured_per_step > cfg.samples_per_step)
    throw ConfigError("measured_per_step must be in [1, samples_per_step]");
  if (cfg.workers < 0) throw ConfigError("workers must be non-negative");
  if (!(cfg.gp_noise_var >= 0.0))
    throw ConfigError("gp_noise_var must be non-negative");
  if (cfg.steps == 0 && cfg.baseline_tokens.empty())
    throw ConfigError("a 0-step search needs baseline tokens to report");
}

EvalRecord sentinel_record(std::vector<int> tokens, const std::string& why) {
  EvalRecord r;
  r.tokens = std::move(tokens);
  r.failed = true;
  r.reward = -1.0;
  r.provenance = RewardProvenance::Measured;
  r.note = why;
  return r;
}

// Non-failed beats failed; then higher reward; ties keep the incumbent.
bool improves(const EvalRecord& r, const EvalRecord& best, bool has_best) {
  if (!has_best) return true;
  if (r.failed != best.failed) return !r.failed;
  return r.reward > best.reward;
}

}  // namespace

SchemeGraph tokens_to_graph(const TokenSpace& space,
                            const std::vector<int>& tokens) {
  if (tokens.size() != static_cast<std::size_t>(space.size()))
    throw ShapeError("token count does not match the space");
  SchemeGraph g;
  g.labels.reserve(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i)
    g.labels.push_back(
        scheme_node_label(space.positions[i].class_id, tokens[i]));
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i)
    g.edges.emplace_back(static_cast<int>(i), static_cast<int>(i) + 1);
  return g;
}

SearchResult search(ControllerState& controller, const TokenSpace& space,
                    const SearchConfig& cfg, const Evaluator& evaluate,
                    const std::function<EvalRecord(const EvalRecord&)>&
                        finalize) {
  check_search_config(cfg);
  if (!evaluate) throw ConfigError("search needs an evaluator");

  const int k = cfg.samples_per_step;
  const int b = cfg.measured_per_step;
  const int workers =
      cfg.workers > 0
          ? cfg.workers
          : std::max(1, static_cast<int>(std::thread::hardware_concurrency()) -
                            1);
  const bool single = workers == 1;

  std::ofstream log_out;
  if (!cfg.run_log_path.empty()) {
    log_out.open(cfg.run_log_path, std::ios::trunc);
    if (!log_out) throw IoError("cannot write run log: " + cfg.run_log_path);
    json header;
    header["type"] = "header";
    header["version"] = 1;
    header["seed"] = cfg.seed;
    header["steps"] = cfg.steps;
    header["k"] = k;
    header["b"] = b;
    header["workers"] = workers;
    if (cfg.config_echo.empty()) {
      header["config"] = nullptr;
    } else {
      try {
        header["config"] = json::parse(cfg.config_echo);
      } catch (const json::exception& e) {
        throw ConfigError(std::string("config_echo is not valid JSON: ") +
                          e.what());
      }
    }
    log_out << header.dump() << "\n";
    log_out.flush();
  }

  SearchResult res;
  auto append = [&](const EvalRecord& r) {
    if (log_out.is_open()) {
      log_out << record_to_json(r) << "\n";
      log_out.flush();
    }
    res.log.push_back(r);
  };

  Rng master(cfg.seed);
  bool has_best = false;

  std::vector<SchemeGraph> obs_graphs;
  std::vector<double> obs_rewards;
  GpSurrogate gp;  // prior until the first refit

  auto take_measured = [&](EvalRecord r) {
    if (single) r.wall_time_s = 0.0;
    ++res.measured;
    obs_graphs.push_back(tokens_to_graph(space, r.tokens));
    obs_rewards.push_back(r.reward);
    if (!cfg.observation_log_path.empty() && r.has_scheme) {
      ObservationRecord obs;
      obs.scheme = r.scheme;
      obs.reward = {r.accuracy, r.latency_ms, r.reward, r.provenance};
      append_observation(cfg.observation_log_path, obs);
    }
    if (improves(r, res.best, has_best)) {
      res.best = r;
      has_best = true;
    }
    append(r);
  };

  auto run_one = [&](const std::vector<int>& tokens,
                     std::uint64_t seed) -> EvalRecord {
    EvalRecord r;
    try {
      r = evaluate(tokens, seed);
    } catch (const std::exception& e) {
      r = sentinel_record(tokens, e.what());
    }
    r.tokens = tokens;
    r.provenance = RewardProvenance::Measured;
    return r;
  };

  if (!cfg.baseline_tokens.empty())
    take_measured(run_one(cfg.baseline_tokens, master.raw()));

  for (int step = 1; step <= cfg.steps; ++step) {
    std::vector<SampledSequence> seqs;
    std::vector<SchemeGraph> pool;
    seqs.reserve(static_cast<std::size_t>(k));
    pool.reserve(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) {
      seqs.push_back(sample_tokens(controller, space, master.raw()));
      pool.push_back(tokens_to_graph(space, seqs.back().tokens));
    }

    // Pick the measurement batch. With b == k there is nothing to rank, so
    // sampling order is kept and the surrogate never gets a say.
    std::vector<int> selected;
    std::vector<std::pair<int, Reward>> surrogate;
    if (b == k) {
      selected.resize(static_cast<std::size_t>(k));
      std::iota(selected.begin(), selected.end(), 0);
    } else {
      SelectionResult sel =
          select_batch(gp, pool, b, has_best ? res.best.reward : 0.0);
      selected = std::move(sel.selected);
      surrogate = std::move(sel.surrogate);
    }

    std::vector<std::uint64_t> eval_seeds(selected.size());
    for (std::uint64_t& s : eval_seeds) s = master.raw();

    std::vector<EvalRecord> measured(selected.size());
    if (single || selected.size() == 1) {
      for (std::size_t i = 0; i < selected.size(); ++i) {
        measured[i] = run_one(seqs[static_cast<std::size_t>(selected[i])].tokens,
                              eval_seeds[i]);
        take_measured(measured[i]);
      }
    } else {
      std::atomic<std::size_t> cursor{0};
      std::mutex mu;
      std::vector<std::size_t> completion;
      auto drain = [&] {
        for (;;) {
          const std::size_t i = cursor.fetch_add(1);
          if (i >= selected.size()) return;
          EvalRecord r = run_one(
              seqs[static_cast<std::size_t>(selected[i])].tokens, eval_seeds[i]);
          std::lock_guard<std::mutex> lock(mu);
          measured[i] = std::move(r);
          completion.push_back(i);
        }
      };
      std::vector<std::thread> threads;
      const std::size_t nthreads =
          std::min<std::size_t>(static_cast<std::size_t>(workers),
                                selected.size());
      threads.reserve(nthreads);
      for (std::size_t t = 0; t < nthreads; ++t) threads.emplace_back(drain);
      for (std::thread& t : threads) t.join();
      // Records land in the log in completion order; updates below use the
      // deterministic slot order.
      for (std::size_t i : completion) take_measured(measured[i]);
    }

    for (const auto& [idx, rew] : surrogate) {
      EvalRecord r;
      r.tokens = seqs[static_cast<std::size_t>(idx)].tokens;
      r.accuracy = rew.accuracy;
      r.latency_ms = rew.latency_ms;
      r.reward = rew.value;
      r.provenance = RewardProvenance::Surrogate;
      append(r);
    }

    // One policy update covering every sample, measured or not.
    std::vector<BatchEntry> batch(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) {
      batch[static_cast<std::size_t>(i)].tokens = seqs[static_cast<std::size_t>(i)].tokens;
      batch[static_cast<std::size_t>(i)].log_probs =
          seqs[static_cast<std::size_t>(i)].log_probs;
    }
    for (std::size_t i = 0; i < selected.size(); ++i) {
      const EvalRecord& r = measured[i];
      batch[static_cast<std::size_t>(selected[i])].reward = {
          r.accuracy, r.latency_ms, r.reward, RewardProvenance::Measured};
    }
    for (const auto& [idx, rew] : surrogate)
      batch[static_cast<std::size_t>(idx)].reward = rew;
    reinforce_update(controller, space, batch);

    // With b == k the surrogate is never consulted, so skip the refit (the
    // gram grows quadratically in the number of measured records).
    if (b < k) gp = gp_fit(obs_graphs, obs_rewards, cfg.gp_noise_var, cfg.wl);

    if (cfg.on_step) cfg.on_step(step, controller);
  }

  if (!has_best) throw NumericalError("search produced no measured records");
  res.best_tuned = (finalize && !res.best.failed) ? finalize(res.best) : res.best;
  return res;
}

RunLog read_run_log(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read run log: " + path);
  std::string line;
  if (!std::getline(in, line)) throw IoError("run log is empty: " + path);
  try {
    json header = json::parse(line);
    if (header.at("type").get<std::string>() != "header")
      throw IoError("run log does not start with a header: " + path);
  } catch (const json::exception& e) {
    throw IoError(std::string("bad run log header: ") + e.what());
  }
  RunLog log;
  log.header_json = line;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      log.records.push_back(record_from_json(line));
    } catch (const IoError& e) {
      throw IoError("run log line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return log;
}

double SyntheticObjective::value(const std::vector<int>& tokens) const {
  if (tokens.size() != unary.size())
    throw ShapeError("token count does not match the objective");
  double total = 0.0;
  for (std::size_t q = 0; q < tokens.size(); ++q)
    total += unary[q].at(static_cast<std::size_t>(tokens[q]));
  for (std::size_t q = 0; q + 1 < tokens.size(); ++q) {
    const std::size_t next_vocab = unary[q + 1].size();
    total += pairwise[q].at(static_cast<std::size_t>(tokens[q]) * next_vocab +
                            static_cast<std::size_t>(tokens[q + 1]));
  }
  // 5 unary terms in [0,1) plus 4 pairwise in [0,0.5) keep this inside [0,1).
  return total / 7.0;
}

std::vector<int> SyntheticObjective::argmax() const {
  std::vector<int> tokens(unary.size(), 0);
  std::vector<int> best_tokens;
  double best = -1.0;
  // Mixed-radix odometer over every valid assignment.
  for (;;) {
    const double v = value(tokens);
    if (v > best) {
      best = v;
      best_tokens = tokens;
    }
    std::size_t q = 0;
    while (q < tokens.size()) {
      if (++tokens[q] < static_cast<int>(unary[q].size())) break;
      tokens[q] = 0;
      ++q;
    }
    if (q == tokens.size()) break;
  }
  return best_tokens;
}

SyntheticObjective make_synthetic_objective(std::uint64_t seed) {
  SyntheticObjective obj;
  const std::vector<int> vocabs = {2, 4, 6, 3, 5};  // 720 schemes
  for (std::size_t q = 0; q < vocabs.size(); ++q) {
    TokenSpace::Position p;
    p.class_id = static_cast<int>(q);
    p.vocab = vocabs[q];
    p.layer = -1;  // unmasked: every token is always valid
    obj.space.positions.push_back(p);
  }
  obj.space.class_vocabs = vocabs;

  Rng rng(seed);
  obj.unary.resize(vocabs.size());
  for (std::size_t q = 0; q < vocabs.size(); ++q) {
    obj.unary[q].resize(static_cast<std::size_t>(vocabs[q]));
    for (double& u : obj.unary[q]) u = rng.uniform();
  }
  obj.pairwise.resize(vocabs.size() - 1);
  for (std::size_t q = 0; q + 1 < vocabs.size(); ++q) {
    obj.pairwise[q].resize(static_cast<std::size_t>(vocabs[q] * vocabs[q + 1]));
    for (double& u : obj.pairwise[q]) u = rng.uniform(0.0, 0.5);
  }
  return obj;
}

Evaluator make_synthetic_evaluator(const SyntheticObjective& obj,
                                   const ControllerConfig& rcfg) {
  return [obj, rcfg](const std::vector<int>& tokens, std::uint64_t) {
    EvalRecord rec;
    rec.tokens = tokens;
    rec.accuracy = obj.value(tokens);
    rec.latency_ms = rcfg.latency_threshold_ms;  // penalty term exactly zero
    const Reward r = compute_reward(rec.accuracy, rec.latency_ms, rcfg);
    rec.reward = r.value;
    rec.provenance = r.provenance;
    return rec;
  };
}

}  // namespace upsearch
