#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "upsearch/controller.hpp"
#include "upsearch/scheme.hpp"

namespace upsearch {

// Weisfeiler-Lehman kernel configuration: H refinement iterations beyond the
// raw labels, one weight per iteration level. Empty weights mean uniform
// 1/(H+1).
struct WLConfig {
  int max_iterations = 2;
  std::vector<double> weights;
};

// Sparse per-iteration feature counts: refined label id -> multiplicity.
using FeatureHistogram = std::map<int, int>;

// Injective signature dictionary. Refinement ids are only comparable between
// histograms produced with the same relabeler instance, so callers comparing
// graphs must share one.
class WlRelabeler {
 public:
  // Signature = (own label, multiset of successor labels); first occurrence
  // allocates the next id.
  int refine(int label, std::vector<int> successor_labels);
  int size() const { return next_; }

 private:
  std::map<std::pair<int, std::vector<int>>, int> dict_;
  int next_ = 0;
};

// Histograms for iterations 0..H. Iteration 0 counts raw labels; iteration h
// counts ids of (label, successor multiset) signatures refined h times.
std::vector<FeatureHistogram> wl_features(const SchemeGraph& g, int iterations,
                                          WlRelabeler& labels);

// Weighted sum over iterations of the histogram dot products. Raw scale: the
// self-kernel of an n-node graph with distinct labels is n at H=0, w_0=1.
double wl_kernel(const SchemeGraph& g1, const SchemeGraph& g2,
                 const WLConfig& cfg);

// k(g1,g2) / sqrt(k(g1,g1) k(g2,g2)); 1 for identical graphs.
double wl_kernel_normalized(const SchemeGraph& g1, const SchemeGraph& g2,
                            const WLConfig& cfg);

// Full kernel matrix; normalized=true rescales rows/columns by self-kernels.
std::vector<std::vector<double>> wl_gram(const std::vector<SchemeGraph>& graphs,
                                         const WLConfig& cfg, bool normalized);

// Zero-mean GP over normalized WL kernels of scheme graphs, on standardized
// rewards. A default-constructed surrogate is the prior: mean 0, variance 1.
struct GpSurrogate {
  WLConfig wl;
  double noise_var = 1e-4;
  std::vector<SchemeGraph> graphs;
  std::vector<double> rewards;     // raw observed values
  double reward_mean = 0.0;
  double reward_std = 1.0;         // floored at 1e-6
  std::vector<double> self_kernel; // raw k(g_i, g_i), for normalization
  std::vector<double> chol;        // lower Cholesky of K_hat + (noise+jitter) I
  std::vector<double> alpha;       // (K_hat + (noise+jitter) I)^{-1} y_std
  double jitter = 0.0;             // extra diagonal needed for factorization
  bool fitted = false;

  int count() const { return static_cast<int>(graphs.size()); }
};

// Fits the surrogate; escalates diagonal jitter (1e-6, x10, up to 1e-4) when
// the factorization hits a non-positive pivot and throws NumericalError when
// even that fails. Requires at least one observation.
GpSurrogate gp_fit(const std::vector<SchemeGraph>& graphs,
                   const std::vector<double>& rewards, double noise_var,
                   const WLConfig& cfg);

struct GpPrediction {
  double mean = 0.0;      // de-standardized, raw reward units
  double variance = 0.0;  // raw reward units squared, clamped non-negative
};

// Posterior at a query graph; the prior (unfitted surrogate) returns mean 0,
// variance 1. Read-only and concurrent-safe on a fitted snapshot.
GpPrediction gp_predict(const GpSurrogate& gp, const SchemeGraph& g);

// Closed-form expected improvement for reward maximization:
//   z = (mu - best - xi) / sigma,  EI = (mu - best - xi) Phi(z) + sigma phi(z)
// and max(0, mu - best - xi) when sigma = 0.
double expected_improvement_value(double mu, double sigma, double best,
                                  double xi);

// EI of a query graph under the surrogate with the frozen offset xi = 0.01.
double expected_improvement(const GpSurrogate& gp, const SchemeGraph& g,
                            double best_so_far);

// Top-B indices by (EI desc, posterior mean desc, index asc).
std::vector<int> select_top_b(const std::vector<double>& ei,
                              const std::vector<double>& mu, int b);

struct SelectionResult {
  std::vector<int> selected;  // B pool indices for real evaluation
  std::vector<std::pair<int, Reward>> surrogate;  // the K-B others
  bool prior_only = false;    // empty surrogate: fell back to pool order
};

// Picks B schemes for measurement; the rest get Surrogate rewards equal to
// the posterior mean clamped to [-1, 1]. best_so_far is the incumbent reward
// (ignored when the surrogate is the prior). Deterministic.
SelectionResult select_batch(const GpSurrogate& gp,
                             const std::vector<SchemeGraph>& pool, int b,
                             double best_so_far);

// Append-only JSONL observation log; the GP is rebuilt from it on restart.
struct ObservationRecord {
  UnifiedScheme scheme;
  Reward reward;
  std::string timestamp;  // ISO 8601 UTC; stamped on append when empty
};

void append_observation(const std::string& path, ObservationRecord record);
std::vector<ObservationRecord> read_observations(const std::string& path);

}  // namespace upsearch
