#include "upsearch/evaluate.hpp"

#include <chrono>
#include <future>
#include <map>

#include <nlohmann/json.hpp>

#include "upsearch/errors.hpp"
#include "upsearch/pruning.hpp"
#include "upsearch/rng.hpp"

namespace upsearch {
namespace {

using nlohmann::json;

ReplacementTarget target_of(KernelChoice k) {
  switch (k) {
    case KernelChoice::Conv1x1: return ReplacementTarget::Conv1x1;
    case KernelChoice::Conv3x3: return ReplacementTarget::Conv3x3;
    case KernelChoice::Dw3x3Then1x1: return ReplacementTarget::DepthwisePair;
  }
  throw ConfigError("unknown kernel choice");
}

}  // namespace

std::string record_to_json(const EvalRecord& rec) {
  json doc;
  doc["tokens"] = rec.tokens;
  if (rec.has_scheme)
    doc["scheme"] = json::parse(scheme_to_json(rec.scheme));
  else
    doc["scheme"] = nullptr;
  doc["accuracy"] = rec.accuracy;
  doc["latency_ms"] = rec.latency_ms;
  doc["measured_ms"] = rec.measured_ms;
  doc["reward"] = rec.reward;
  doc["provenance"] =
      rec.provenance == RewardProvenance::Measured ? "measured" : "surrogate";
  doc["sparsity"] = rec.sparsity;
  doc["wall_time_s"] = rec.wall_time_s;
  doc["failed"] = rec.failed;
  doc["note"] = rec.note;
  return doc.dump();
}

EvalRecord record_from_json(const std::string& line) {
  try {
    json doc = json::parse(line);
    EvalRecord rec;
    rec.tokens = doc.at("tokens").get<std::vector<int>>();
    if (!doc.at("scheme").is_null()) {
      rec.scheme = scheme_from_json(doc.at("scheme").dump());
      rec.has_scheme = true;
    }
    rec.accuracy = doc.at("accuracy").get<double>();
    rec.latency_ms = doc.at("latency_ms").get<double>();
    rec.measured_ms = doc.at("measured_ms").get<double>();
    rec.reward = doc.at("reward").get<double>();
    const std::string prov = doc.at("provenance").get<std::string>();
    if (prov == "measured")
      rec.provenance = RewardProvenance::Measured;
    else if (prov == "surrogate")
      rec.provenance = RewardProvenance::Surrogate;
    else
      throw IoError("unknown provenance '" + prov + "'");
    rec.sparsity = doc.at("sparsity").get<double>();
    rec.wall_time_s = doc.at("wall_time_s").get<double>();
    rec.failed = doc.at("failed").get<bool>();
    rec.note = doc.at("note").get<std::string>();
    return rec;
  } catch (const json::exception& e) {
    throw IoError(std::string("bad eval record: ") + e.what());
  }
}

EvalRecord evaluate_scheme(const UnifiedScheme& scheme, const ModelGraph& graph,
                           const ModelWeights& base_weights, const Dataset& data,
                           const TrainConfig& tcfg, const ControllerConfig& rcfg,
                           const CostModel& cm, std::uint64_t seed,
                           ModelWeights* tuned_out, ModelGraph* graph_out) {
  const auto t0 = std::chrono::steady_clock::now();
  EvalRecord rec;
  rec.scheme = scheme;
  rec.has_scheme = true;
  try {
    const std::vector<std::string> violations = validate(scheme, graph);
    if (!violations.empty())
      throw ConfigError("invalid scheme: " + violations.front());
    check_train_config(tcfg);

    // Stage 1: intra-kernel replacements, then a short fine-tune so the new
    // kernels settle before pruning decisions are made.
    ModelGraph g = graph;
    ModelWeights w = base_weights;
    const std::vector<int> slots = g.scheme_slots();
    for (std::size_t i = 0; i < slots.size(); ++i) {
      const std::vector<int> ids = g.layers_of_slot(slots[i]);
      const LayerSpec& before = g.layer(ids.front());
      const ReplacementTarget target = target_of(scheme.per_layer[i].kernel);
      if (target == ReplacementTarget::Conv3x3 &&
          before.kind == LayerKind::Conv2d && before.kernel == 3)
        continue;  // already the base kernel
      ReplaceResult rr = replace_kernel(g, w, ids.front(), target);
      g = std::move(rr.graph);
      w = std::move(rr.weights);
    }
    w = train(g, w, data, tcfg, tcfg.replace_finetune_epochs, nullptr, seed)
            .weights;

    // Stage 2: prune. The ADMM primal step reuses the training loop through
    // the gradient hook, with optimizer state persisting across rounds.
    std::map<int, PruningMask> masks;
    if (scheme.method == PruningMethod::Magnitude) {
      masks = magnitude_prune(g, w, scheme);
    } else {
      AdmmConfig acfg;
      acfg.finetune_epochs = tcfg.prune_finetune_epochs;
      AdamState opt = init_adam(g, w);
      Rng wrng(seed ^ 0x9e3779b97f4a7c15ull);
      int round = 0;
      WStep wstep = [&](ModelWeights& ww,
                        const std::map<int, std::vector<double>>& z,
                        const std::map<int, std::vector<double>>& u) {
        GradHook hook = [&](int id, const std::vector<double>& wl,
                            std::vector<double>& gw) {
          auto zi = z.find(id);
          if (zi == z.end()) return;
          const std::vector<double>& ul = u.at(id);
          for (std::size_t j = 0; j < wl.size(); ++j)
            gw[j] += acfg.rho * (wl[j] - zi->second[j] + ul[j]);
        };
        train_epoch(g, ww, opt, data, tcfg, wrng, nullptr, hook, ++round);
      };
      masks = admm_prune(g, w, scheme, acfg, wstep);
    }

    // Stage 3: masked fine-tune, with the latency estimate running alongside
    // it (the estimate only needs the graph and masks, both fixed by now).
    auto latency = std::async(std::launch::async,
                              [&] { return estimate(g, scheme, masks, cm); });
    w = train(g, w, data, tcfg, tcfg.prune_finetune_epochs, &masks, seed + 1)
            .weights;
    const LatencyEstimate est = latency.get();

    rec.accuracy = accuracy(g, w, data, data.test);
    rec.latency_ms = est.total_ms;
    const Reward r = compute_reward(rec.accuracy, rec.latency_ms, rcfg);
    rec.reward = r.value;
    rec.provenance = r.provenance;
    rec.sparsity = sparsity_report(g, masks).overall;
    if (tuned_out) *tuned_out = std::move(w);
    if (graph_out) *graph_out = std::move(g);
  } catch (const std::exception& e) {
    rec.failed = true;
    rec.reward = -1.0;
    rec.accuracy = 0.0;
    rec.latency_ms = 0.0;
    rec.provenance = RewardProvenance::Measured;
    rec.note = e.what();
  }
  rec.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  return rec;
}

}  // namespace upsearch
