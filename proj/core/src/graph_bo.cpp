#include "upsearch/graph_bo.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "upsearch/errors.hpp"

namespace upsearch {

int WlRelabeler::refine(int label, std::vector<int> successor_labels) {
  std::sort(successor_labels.begin(), successor_labels.end());
  auto key = std::make_pair(label, std::move(successor_labels));
  auto it = dict_.find(key);
  if (it != dict_.end()) return it->second;
  int id = next_++;
  dict_.emplace(std::move(key), id);
  return id;
}

namespace {

std::vector<double> effective_weights(const WLConfig& cfg) {
  if (cfg.max_iterations < 0)
    throw ConfigError("WL iteration count must be non-negative");
  const int n = cfg.max_iterations + 1;
  if (cfg.weights.empty())
    return std::vector<double>(n, 1.0 / static_cast<double>(n));
  if (static_cast<int>(cfg.weights.size()) != n)
    throw ConfigError("WL weights must have one entry per iteration level");
  for (double w : cfg.weights)
    if (!(w > 0.0)) throw ConfigError("WL weights must be positive");
  return cfg.weights;
}

double histogram_dot(const FeatureHistogram& a, const FeatureHistogram& b) {
  // Walk the smaller map; counts are small integers so the products are exact.
  const FeatureHistogram& lead = a.size() <= b.size() ? a : b;
  const FeatureHistogram& other = a.size() <= b.size() ? b : a;
  double dot = 0.0;
  for (const auto& [key, count] : lead) {
    auto it = other.find(key);
    if (it != other.end())
      dot += static_cast<double>(count) * static_cast<double>(it->second);
  }
  return dot;
}

}  // namespace

std::vector<FeatureHistogram> wl_features(const SchemeGraph& g, int iterations,
                                          WlRelabeler& labels) {
  if (iterations < 0)
    throw ConfigError("WL iteration count must be non-negative");
  const int n = static_cast<int>(g.labels.size());
  std::vector<std::vector<int>> successors(static_cast<std::size_t>(n));
  for (const auto& [from, to] : g.edges) {
    if (from < 0 || from >= n || to < 0 || to >= n)
      throw ShapeError("scheme graph edge references a missing node");
    successors[static_cast<std::size_t>(from)].push_back(to);
  }

  std::vector<FeatureHistogram> out;
  out.reserve(static_cast<std::size_t>(iterations) + 1);
  std::vector<int> current = g.labels;

  FeatureHistogram h0;
  for (int label : current) ++h0[label];
  out.push_back(std::move(h0));

  for (int h = 1; h <= iterations; ++h) {
    std::vector<int> next(static_cast<std::size_t>(n));
    for (int v = 0; v < n; ++v) {
      std::vector<int> succ;
      succ.reserve(successors[static_cast<std::size_t>(v)].size());
      for (int s : successors[static_cast<std::size_t>(v)])
        succ.push_back(current[static_cast<std::size_t>(s)]);
      next[static_cast<std::size_t>(v)] =
          labels.refine(current[static_cast<std::size_t>(v)], std::move(succ));
    }
    FeatureHistogram hist;
    for (int label : next) ++hist[label];
    out.push_back(std::move(hist));
    current = std::move(next);
  }
  return out;
}

double wl_kernel(const SchemeGraph& g1, const SchemeGraph& g2,
                 const WLConfig& cfg) {
  const std::vector<double> w = effective_weights(cfg);
  WlRelabeler shared;
  std::vector<FeatureHistogram> f1 = wl_features(g1, cfg.max_iterations, shared);
  std::vector<FeatureHistogram> f2 = wl_features(g2, cfg.max_iterations, shared);
  double k = 0.0;
  for (std::size_t h = 0; h < w.size(); ++h)
    k += w[h] * histogram_dot(f1[h], f2[h]);
  return k;
}

double wl_kernel_normalized(const SchemeGraph& g1, const SchemeGraph& g2,
                            const WLConfig& cfg) {
  const double k11 = wl_kernel(g1, g1, cfg);
  const double k22 = wl_kernel(g2, g2, cfg);
  if (!(k11 > 0.0) || !(k22 > 0.0))
    throw NumericalError("WL self-kernel must be positive to normalize");
  return wl_kernel(g1, g2, cfg) / std::sqrt(k11 * k22);
}

std::vector<std::vector<double>> wl_gram(const std::vector<SchemeGraph>& graphs,
                                         const WLConfig& cfg, bool normalized) {
  const int n = static_cast<int>(graphs.size());
  std::vector<std::vector<double>> k(static_cast<std::size_t>(n),
                                     std::vector<double>(static_cast<std::size_t>(n), 0.0));
  for (int i = 0; i < n; ++i)
    for (int j = i; j < n; ++j) {
      const double v = wl_kernel(graphs[static_cast<std::size_t>(i)],
                                 graphs[static_cast<std::size_t>(j)], cfg);
      k[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = v;
      k[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)] = v;
    }
  if (normalized) {
    for (int i = 0; i < n; ++i)
      if (!(k[static_cast<std::size_t>(i)][static_cast<std::size_t>(i)] > 0.0))
        throw NumericalError("WL self-kernel must be positive to normalize");
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        if (i == j) continue;
        k[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] /=
            std::sqrt(k[static_cast<std::size_t>(i)][static_cast<std::size_t>(i)] *
                      k[static_cast<std::size_t>(j)][static_cast<std::size_t>(j)]);
      }
    for (int i = 0; i < n; ++i)
      k[static_cast<std::size_t>(i)][static_cast<std::size_t>(i)] = 1.0;
  }
  return k;
}

namespace {

// In-place lower Cholesky; false on a non-positive pivot.
bool cholesky(std::vector<double>& a, int n) {
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j) {
      double sum = a[static_cast<std::size_t>(i) * n + j];
      for (int p = 0; p < j; ++p)
        sum -= a[static_cast<std::size_t>(i) * n + p] *
               a[static_cast<std::size_t>(j) * n + p];
      if (i == j) {
        if (!(sum > 0.0)) return false;
        a[static_cast<std::size_t>(i) * n + j] = std::sqrt(sum);
      } else {
        a[static_cast<std::size_t>(i) * n + j] =
            sum / a[static_cast<std::size_t>(j) * n + j];
      }
    }
    for (int j = i + 1; j < n; ++j) a[static_cast<std::size_t>(i) * n + j] = 0.0;
  }
  return true;
}

// Solves L x = b in place.
void forward_solve(const std::vector<double>& l, int n, std::vector<double>& b) {
  for (int i = 0; i < n; ++i) {
    double sum = b[static_cast<std::size_t>(i)];
    for (int j = 0; j < i; ++j)
      sum -= l[static_cast<std::size_t>(i) * n + j] * b[static_cast<std::size_t>(j)];
    b[static_cast<std::size_t>(i)] = sum / l[static_cast<std::size_t>(i) * n + i];
  }
}

// Solves L^T x = b in place.
void backward_solve(const std::vector<double>& l, int n, std::vector<double>& b) {
  for (int i = n - 1; i >= 0; --i) {
    double sum = b[static_cast<std::size_t>(i)];
    for (int j = i + 1; j < n; ++j)
      sum -= l[static_cast<std::size_t>(j) * n + i] * b[static_cast<std::size_t>(j)];
    b[static_cast<std::size_t>(i)] = sum / l[static_cast<std::size_t>(i) * n + i];
  }
}

}  // namespace

GpSurrogate gp_fit(const std::vector<SchemeGraph>& graphs,
                   const std::vector<double>& rewards, double noise_var,
                   const WLConfig& cfg) {
  if (graphs.empty()) throw ConfigError("GP fit needs at least one observation");
  if (graphs.size() != rewards.size())
    throw ShapeError("GP fit: one reward per graph required");
  if (noise_var < 0.0) throw ConfigError("GP noise variance must be non-negative");

  GpSurrogate gp;
  gp.wl = cfg;
  gp.noise_var = noise_var;
  gp.graphs = graphs;
  gp.rewards = rewards;

  const int n = static_cast<int>(graphs.size());
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  var /= static_cast<double>(n);
  gp.reward_mean = mean;
  gp.reward_std = std::max(std::sqrt(var), 1e-6);

  std::vector<std::vector<double>> gram = wl_gram(graphs, cfg, false);
  gp.self_kernel.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    gp.self_kernel[static_cast<std::size_t>(i)] =
        gram[static_cast<std::size_t>(i)][static_cast<std::size_t>(i)];
    if (!(gp.self_kernel[static_cast<std::size_t>(i)] > 0.0))
      throw NumericalError("WL self-kernel must be positive to normalize");
  }

  std::vector<double> khat(static_cast<std::size_t>(n) * n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      khat[static_cast<std::size_t>(i) * n + j] =
          gram[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] /
          std::sqrt(gp.self_kernel[static_cast<std::size_t>(i)] *
                    gp.self_kernel[static_cast<std::size_t>(j)]);

  // Factor K_hat + (noise + jitter) I, escalating jitter tenfold on failure.
  const double jitters[] = {0.0, 1e-6, 1e-5, 1e-4};
  bool done = false;
  for (double j : jitters) {
    gp.chol = khat;
    for (int i = 0; i < n; ++i)
      gp.chol[static_cast<std::size_t>(i) * n + i] += noise_var + j;
    if (cholesky(gp.chol, n)) {
      gp.jitter = j;
      done = true;
      break;
    }
  }
  if (!done)
    throw NumericalError(
        "GP Gram factorization failed even with 1e-4 diagonal jitter");

  gp.alpha.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    gp.alpha[static_cast<std::size_t>(i)] =
        (rewards[static_cast<std::size_t>(i)] - mean) / gp.reward_std;
  forward_solve(gp.chol, n, gp.alpha);
  backward_solve(gp.chol, n, gp.alpha);
  gp.fitted = true;
  return gp;
}

GpPrediction gp_predict(const GpSurrogate& gp, const SchemeGraph& g) {
  GpPrediction out;
  if (!gp.fitted) {
    out.mean = 0.0;
    out.variance = 1.0;  // prior: standardized scale, unit signal
    return out;
  }
  const int n = gp.count();
  const double kgg = wl_kernel(g, g, gp.wl);
  if (!(kgg > 0.0))
    throw NumericalError("WL self-kernel must be positive to normalize");

  std::vector<double> kvec(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    kvec[static_cast<std::size_t>(i)] =
        wl_kernel(g, gp.graphs[static_cast<std::size_t>(i)], gp.wl) /
        std::sqrt(kgg * gp.self_kernel[static_cast<std::size_t>(i)]);

  double mean_std = 0.0;
  for (int i = 0; i < n; ++i)
    mean_std += kvec[static_cast<std::size_t>(i)] * gp.alpha[static_cast<std::size_t>(i)];

  std::vector<double> v = kvec;
  forward_solve(gp.chol, n, v);
  double quad = 0.0;
  for (double x : v) quad += x * x;
  const double var_std = std::max(0.0, 1.0 - quad);

  out.mean = gp.reward_mean + gp.reward_std * mean_std;
  out.variance = var_std * gp.reward_std * gp.reward_std;
  return out;
}

double expected_improvement_value(double mu, double sigma, double best,
                                  double xi) {
  const double gap = mu - best - xi;
  if (!(sigma > 0.0)) return std::max(0.0, gap);
  const double z = gap / sigma;
  const double cdf = 0.5 * std::erfc(-z / std::sqrt(2.0));
  const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * M_PI);
  return std::max(0.0, gap * cdf + sigma * pdf);
}

double expected_improvement(const GpSurrogate& gp, const SchemeGraph& g,
                            double best_so_far) {
  const GpPrediction p = gp_predict(gp, g);
  return expected_improvement_value(p.mean, std::sqrt(p.variance), best_so_far,
                                    0.01);
}

std::vector<int> select_top_b(const std::vector<double>& ei,
                              const std::vector<double>& mu, int b) {
  if (ei.size() != mu.size())
    throw ShapeError("select_top_b: EI and mean vectors must align");
  if (b < 0 || b > static_cast<int>(ei.size()))
    throw ConfigError("selection size must lie within the pool");
  std::vector<int> order(ei.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int c) {
    const std::size_t i = static_cast<std::size_t>(a), j = static_cast<std::size_t>(c);
    if (ei[i] != ei[j]) return ei[i] > ei[j];
    if (mu[i] != mu[j]) return mu[i] > mu[j];
    return a < c;
  });
  order.resize(static_cast<std::size_t>(b));
  return order;
}

SelectionResult select_batch(const GpSurrogate& gp,
                             const std::vector<SchemeGraph>& pool, int b,
                             double best_so_far) {
  const int k = static_cast<int>(pool.size());
  if (b < 1 || b > k)
    throw ConfigError("selection size must lie in [1, pool size]");

  SelectionResult res;
  if (!gp.fitted) {
    // No observations yet: measure the first B and give the rest the prior
    // mean 0.
    res.prior_only = true;
    for (int i = 0; i < b; ++i) res.selected.push_back(i);
    for (int i = b; i < k; ++i) {
      Reward r;
      r.value = 0.0;
      r.provenance = RewardProvenance::Surrogate;
      res.surrogate.emplace_back(i, r);
    }
    return res;
  }

  std::vector<double> ei(static_cast<std::size_t>(k)), mu(static_cast<std::size_t>(k));
  std::vector<GpPrediction> pred(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) {
    pred[static_cast<std::size_t>(i)] = gp_predict(gp, pool[static_cast<std::size_t>(i)]);
    mu[static_cast<std::size_t>(i)] = pred[static_cast<std::size_t>(i)].mean;
    ei[static_cast<std::size_t>(i)] = expected_improvement_value(
        pred[static_cast<std::size_t>(i)].mean,
        std::sqrt(pred[static_cast<std::size_t>(i)].variance), best_so_far, 0.01);
  }
  res.selected = select_top_b(ei, mu, b);

  std::vector<std::uint8_t> chosen(static_cast<std::size_t>(k), 0);
  for (int i : res.selected) chosen[static_cast<std::size_t>(i)] = 1;
  for (int i = 0; i < k; ++i) {
    if (chosen[static_cast<std::size_t>(i)]) continue;
    Reward r;
    r.value = std::clamp(mu[static_cast<std::size_t>(i)], -1.0, 1.0);
    r.provenance = RewardProvenance::Surrogate;
    res.surrogate.emplace_back(i, r);
  }
  return res;
}

namespace {

std::string utc_now_iso8601() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

void append_observation(const std::string& path, ObservationRecord record) {
  if (record.timestamp.empty()) record.timestamp = utc_now_iso8601();
  nlohmann::json line;
  line["scheme"] = nlohmann::json::parse(scheme_to_json(record.scheme));
  line["accuracy"] = record.reward.accuracy;
  line["latency_ms"] = record.reward.latency_ms;
  line["reward"] = record.reward.value;
  line["provenance"] =
      record.reward.provenance == RewardProvenance::Measured ? "measured"
                                                             : "surrogate";
  line["timestamp"] = record.timestamp;

  std::ofstream os(path, std::ios::app);
  if (!os) throw IoError("cannot open observation log " + path);
  os << line.dump() << "\n";
  if (!os) throw IoError("failed appending to observation log " + path);
}

std::vector<ObservationRecord> read_observations(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open observation log " + path);
  std::vector<ObservationRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw IoError("observation log line " + std::to_string(lineno) +
                    " is not valid JSON: " + e.what());
    }
    try {
      ObservationRecord rec;
      rec.scheme = scheme_from_json(j.at("scheme").dump());
      rec.reward.accuracy = j.at("accuracy").get<double>();
      rec.reward.latency_ms = j.at("latency_ms").get<double>();
      rec.reward.value = j.at("reward").get<double>();
      const std::string prov = j.at("provenance").get<std::string>();
      if (prov == "measured")
        rec.reward.provenance = RewardProvenance::Measured;
      else if (prov == "surrogate")
        rec.reward.provenance = RewardProvenance::Surrogate;
      else
        throw IoError("unknown provenance " + prov);
      rec.timestamp = j.at("timestamp").get<std::string>();
      out.push_back(std::move(rec));
    } catch (const nlohmann::json::exception& e) {
      throw IoError("observation log line " + std::to_string(lineno) +
                    " is missing fields: " + e.what());
    }
  }
  return out;
}

}  // namespace upsearch
