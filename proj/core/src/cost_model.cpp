#include "upsearch/cost_model.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "upsearch/latency_lab.hpp"
#include "upsearch/rng.hpp"
#include "upsearch/sparse_format.hpp"
#include "upsearch/winograd.hpp"

namespace upsearch {

std::vector<double> nnls(const std::vector<double>& a, int rows, int cols,
                         const std::vector<double>& b, double tol) {
  if (rows <= 0 || cols <= 0 ||
      a.size() != static_cast<std::size_t>(rows) * cols ||
      b.size() != static_cast<std::size_t>(rows))
    throw ShapeError("nnls: matrix and vector sizes disagree");

  Eigen::MatrixXd A = Eigen::Map<const Eigen::Matrix<
      double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(a.data(), rows,
                                                                cols);
  Eigen::VectorXd y = Eigen::Map<const Eigen::VectorXd>(b.data(), rows);

  Eigen::VectorXd x = Eigen::VectorXd::Zero(cols);
  std::vector<bool> passive(cols, false);
  Eigen::VectorXd w = A.transpose() * (y - A * x);

  auto solve_passive = [&](Eigen::VectorXd& z) {
    std::vector<int> idx;
    for (int j = 0; j < cols; ++j)
      if (passive[j]) idx.push_back(j);
    Eigen::MatrixXd Ap(rows, idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k) Ap.col(k) = A.col(idx[k]);
    Eigen::VectorXd zp = Ap.colPivHouseholderQr().solve(y);
    z = Eigen::VectorXd::Zero(cols);
    for (std::size_t k = 0; k < idx.size(); ++k) z[idx[k]] = zp[k];
  };

  const int max_iter = 3 * cols * (cols + 1);
  for (int iter = 0; iter < max_iter; ++iter) {
    int best = -1;
    double best_w = tol;
    for (int j = 0; j < cols; ++j)
      if (!passive[j] && w[j] > best_w) {
        best_w = w[j];
        best = j;
      }
    if (best < 0) {
      std::vector<double> out(cols);
      for (int j = 0; j < cols; ++j) out[j] = x[j];
      return out;
    }
    passive[best] = true;

    for (int inner = 0; inner < max_iter; ++inner) {
      Eigen::VectorXd z;
      solve_passive(z);
      bool feasible = true;
      for (int j = 0; j < cols; ++j)
        if (passive[j] && z[j] <= tol) feasible = false;
      if (feasible) {
        x = z;
        break;
      }
      double alpha = 1.0;
      for (int j = 0; j < cols; ++j)
        if (passive[j] && z[j] <= tol && x[j] > z[j])
          alpha = std::min(alpha, x[j] / (x[j] - z[j]));
      x += alpha * (z - x);
      for (int j = 0; j < cols; ++j)
        if (passive[j] && x[j] <= tol) {
          passive[j] = false;
          x[j] = 0.0;
        }
    }
    w = A.transpose() * (y - A * x);
  }
  throw NumericalError("nnls failed to converge");
}

const CostArm& CostModel::arm(PruningType ptype, bool winograd) const {
  return arms[static_cast<int>(ptype)][winograd ? 1 : 0];
}

CostArm& CostModel::arm(PruningType ptype, bool winograd) {
  return arms[static_cast<int>(ptype)][winograd ? 1 : 0];
}

std::uint64_t dense_weight_count(const LayerSpec& spec) {
  switch (spec.kind) {
    case LayerKind::Conv2d:
      return static_cast<std::uint64_t>(spec.c_out) * spec.c_in * spec.kernel *
             spec.kernel;
    case LayerKind::DepthwiseConv2d:
      return static_cast<std::uint64_t>(spec.c_out) * spec.kernel * spec.kernel;
    case LayerKind::Dense:
      return static_cast<std::uint64_t>(spec.c_out) * spec.c_in;
    default:
      return 0;
  }
}

std::uint64_t dense_weight_bytes(const LayerSpec& spec) {
  return 8 * dense_weight_count(spec);
}

std::array<double, 4> cost_features(const LayerSpec& spec,
                                    std::uint64_t kept_entries,
                                    std::uint64_t sparse_bytes, bool winograd) {
  TensorShape os = output_shape(spec);
  const double act_bytes =
      8.0 * (static_cast<double>(spec.input_shape.numel()) +
             static_cast<double>(os.numel()));
  const double out_px = static_cast<double>(os.height) * os.width;
  double macs = static_cast<double>(kept_entries) * out_px;
  double tiles = 0.0;
  if (winograd) {
    macs *= 16.0 / 36.0;
    tiles = static_cast<double>(winograd_tile_count(os.height, os.width)) *
            (spec.c_in + spec.c_out);
  }
  return {1.0, static_cast<double>(sparse_bytes) + act_bytes, macs, tiles};
}

namespace {

std::string arm_name(PruningType ptype, bool winograd) {
  return to_string(ptype) + (winograd ? "/winograd" : "/direct");
}

struct ArmBucket {
  std::vector<const LatencySample*> rows;
};

}  // namespace

std::vector<LatencySample> collect_latency_samples(
    const std::vector<LayerSpec>& layers, const std::vector<double>& ratios,
    int repetitions, std::uint64_t seed) {
  std::vector<LatencySample> out;
  Rng rng(seed);
  // Spin briefly so the first measured configs don't absorb the CPU's
  // idle-to-active frequency ramp.
  const auto warm_until =
      std::chrono::steady_clock::now() + std::chrono::milliseconds(150);
  volatile double sink = 0.0;
  while (std::chrono::steady_clock::now() < warm_until) sink = sink + 1.0;
  for (const LayerSpec& spec : layers) {
    if (spec.kind == LayerKind::BatchNorm || spec.kind == LayerKind::ReLU)
      continue;
    std::vector<double> w(dense_weight_count(spec));
    for (auto& v : w) v = rng.uniform(-1.0, 1.0);

    for (PruningType ptype :
         {PruningType::Filter, PruningType::Pattern, PruningType::Block}) {
      if (ptype == PruningType::Pattern && spec.kernel != 3) continue;
      if (ptype != PruningType::Filter && spec.kind == LayerKind::Dense)
        continue;
      for (double ratio : ratios) {
        PruningMask mask = project(spec, w, ptype, ratio);
        const bool trivial = mask.zeros() == 0;
        SparseWeights sw;
        if (!trivial) {
          std::vector<double> masked = w;
          apply_mask(masked, mask);
          sw = encode(spec, masked, mask);
        }
        for (bool wino : {false, true}) {
          if (wino && !winograd_eligible(spec)) continue;
          LatencySample s;
          s.spec = spec;
          s.ptype = ptype;
          s.winograd = wino;
          s.kept_entries = trivial
                               ? dense_weight_count(spec)
                               : dense_weight_count(spec) - mask.zeros();
          s.sparse_bytes = trivial ? dense_weight_bytes(spec)
                                   : encoded_bytes_from_mask(spec, mask);
          LatencyStats st =
              bench_layer(spec, w, trivial ? nullptr : &sw, wino,
                          TuningParams{}, repetitions, rng.raw());
          s.measured_ms = st.median_ms;
          out.push_back(std::move(s));
        }
      }
    }
  }
  return out;
}

CostModel calibrate(const std::vector<LatencySample>& samples, double holdout,
                    std::uint64_t seed) {
  if (samples.size() < 20)
    throw ConfigError("calibration needs at least 20 latency samples, got " +
                      std::to_string(samples.size()));
  if (!(holdout > 0.0 && holdout < 1.0))
    throw ConfigError("holdout fraction must lie in (0, 1)");

  std::array<std::array<ArmBucket, 2>, 3> buckets;
  for (const LatencySample& s : samples)
    buckets[static_cast<int>(s.ptype)][s.winograd ? 1 : 0].rows.push_back(&s);

  CostModel cm;
  cm.total_samples = static_cast<int>(samples.size());
  double pooled_res = 0.0, pooled_tot = 0.0, pooled_mean = 0.0;
  std::vector<std::pair<double, double>> pooled;  // (measured, predicted)

  for (int pt = 0; pt < 3; ++pt)
    for (int wf = 0; wf < 2; ++wf) {
      const auto& rows = buckets[pt][wf].rows;
      CostArm& arm = cm.arms[pt][wf];
      arm.samples = static_cast<int>(rows.size());
      if (rows.size() < 8) continue;

      std::vector<int> order(rows.size());
      std::iota(order.begin(), order.end(), 0);
      Rng rng(seed + static_cast<std::uint64_t>(pt) * 2 + wf);
      rng.shuffle(order);
      const int n_hold = std::max(
          1, static_cast<int>(std::llround(holdout * static_cast<double>(rows.size()))));
      const int n_train = static_cast<int>(rows.size()) - n_hold;

      std::vector<double> design;
      std::vector<double> target;
      design.reserve(static_cast<std::size_t>(n_train) * 4);
      for (int j = 0; j < n_train; ++j) {
        const LatencySample& s = *rows[order[j]];
        auto f = cost_features(s.spec, s.kept_entries, s.sparse_bytes,
                               s.winograd);
        design.insert(design.end(), f.begin(), f.end());
        target.push_back(s.measured_ms);
      }

      // Rank over active features only: the tile column is identically zero
      // off the winograd path and must not count against the arm.
      Eigen::MatrixXd X =
          Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                         Eigen::RowMajor>>(design.data(),
                                                           n_train, 4);
      int active = 0;
      for (int c = 0; c < 4; ++c)
        if (X.col(c).cwiseAbs().maxCoeff() > 0.0) ++active;
      Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
      qr.setThreshold(1e-10);
      if (qr.rank() < active)
        throw ConfigError("latency arm " + arm_name(static_cast<PruningType>(pt), wf == 1) +
                          " has a rank-deficient calibration design; vary the "
                          "layer shapes and ratios");

      auto coef = nnls(design, n_train, 4, target);
      std::copy(coef.begin(), coef.end(), arm.c.begin());
      arm.calibrated = true;

      double res = 0.0, tot = 0.0, mean = 0.0;
      for (int j = n_train; j < static_cast<int>(rows.size()); ++j)
        mean += rows[order[j]]->measured_ms;
      mean /= n_hold;
      for (int j = n_train; j < static_cast<int>(rows.size()); ++j) {
        const LatencySample& s = *rows[order[j]];
        auto f = cost_features(s.spec, s.kept_entries, s.sparse_bytes,
                               s.winograd);
        double pred = 0.0;
        for (int c = 0; c < 4; ++c) pred += arm.c[c] * f[c];
        res += (pred - s.measured_ms) * (pred - s.measured_ms);
        tot += (s.measured_ms - mean) * (s.measured_ms - mean);
        pooled.emplace_back(s.measured_ms, pred);
      }
      arm.r2 = tot > 0.0 ? 1.0 - res / tot : (res < 1e-18 ? 1.0 : 0.0);
    }

  if (!pooled.empty()) {
    for (auto& [m, p] : pooled) pooled_mean += m;
    pooled_mean /= static_cast<double>(pooled.size());
    for (auto& [m, p] : pooled) {
      pooled_res += (p - m) * (p - m);
      pooled_tot += (m - pooled_mean) * (m - pooled_mean);
    }
    cm.pooled_r2 = pooled_tot > 0.0 ? 1.0 - pooled_res / pooled_tot
                                    : (pooled_res < 1e-18 ? 1.0 : 0.0);
  }
  return cm;
}

LatencyEstimate estimate(const ModelGraph& graph, const UnifiedScheme& scheme,
                         const std::map<int, PruningMask>& masks,
                         const CostModel& cm) {
  const std::vector<int> slots = graph.scheme_slots();
  if (scheme.per_layer.size() != slots.size())
    throw ShapeError("scheme covers " + std::to_string(scheme.per_layer.size()) +
                     " slots but the graph has " + std::to_string(slots.size()));

  LatencyEstimate est;
  for (const LayerSpec& layer : graph.layers) {
    if (layer.kind == LayerKind::BatchNorm || layer.kind == LayerKind::ReLU) {
      est.per_layer_ms[layer.id] = 0.0;
      continue;
    }
    PruningType ptype = PruningType::Filter;
    bool wino = false;
    if (layer.scheme_slot >= 0) {
      auto at = std::find(slots.begin(), slots.end(), layer.scheme_slot);
      const LayerActions& act =
          scheme.per_layer[static_cast<std::size_t>(at - slots.begin())];
      ptype = act.ptype;
      wino = act.winograd && winograd_eligible(layer);
    }

    std::uint64_t kept = dense_weight_count(layer);
    std::uint64_t bytes = dense_weight_bytes(layer);
    auto it = masks.find(layer.id);
    if (it != masks.end() && it->second.zeros() > 0) {
      kept -= it->second.zeros();
      bytes = encoded_bytes_from_mask(layer, it->second);
    }

    const CostArm& arm = cm.arm(ptype, wino);
    if (!arm.calibrated)
      throw ConfigError("latency arm " + arm_name(ptype, wino) +
                        " is not calibrated");
    auto f = cost_features(layer, kept, bytes, wino);
    double ms = 0.0;
    for (int c = 0; c < 4; ++c) ms += arm.c[c] * f[c];
    est.per_layer_ms[layer.id] = ms;
    est.total_ms += ms;
  }
  return est;
}

void save_cost_model(const CostModel& cm, const std::string& path) {
  nlohmann::json doc;
  doc["version"] = 1;
  doc["pooled_r2"] = cm.pooled_r2;
  doc["total_samples"] = cm.total_samples;
  doc["arms"] = nlohmann::json::array();
  for (int pt = 0; pt < 3; ++pt)
    for (int wf = 0; wf < 2; ++wf) {
      const CostArm& arm = cm.arms[pt][wf];
      nlohmann::json j;
      j["ptype"] = to_string(static_cast<PruningType>(pt));
      j["winograd"] = wf == 1;
      j["calibrated"] = arm.calibrated;
      j["coeffs"] = arm.c;
      j["r2"] = arm.r2;
      j["samples"] = arm.samples;
      doc["arms"].push_back(std::move(j));
    }
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << doc.dump(2) << "\n";
}

CostModel load_cost_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed cost model file " + path + ": " + e.what());
  }
  try {
    if (doc.at("version").get<int>() != 1)
      throw IoError("unsupported cost model version in " + path);
    CostModel cm;
    cm.pooled_r2 = doc.at("pooled_r2").get<double>();
    cm.total_samples = doc.at("total_samples").get<int>();
    for (const auto& j : doc.at("arms")) {
      PruningType pt = pruning_type_from_string(j.at("ptype").get<std::string>());
      CostArm& arm = cm.arm(pt, j.at("winograd").get<bool>());
      arm.calibrated = j.at("calibrated").get<bool>();
      auto coeffs = j.at("coeffs").get<std::vector<double>>();
      if (coeffs.size() != 4)
        throw IoError("cost model arm in " + path + " must have 4 coefficients");
      std::copy(coeffs.begin(), coeffs.end(), arm.c.begin());
      arm.r2 = j.at("r2").get<double>();
      arm.samples = j.at("samples").get<int>();
    }
    return cm;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("cost model file " + path + " is missing fields: " + e.what());
  }
}

}  // namespace upsearch
