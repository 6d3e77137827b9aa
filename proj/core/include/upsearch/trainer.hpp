#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <vector>

#include "upsearch/model_ir.hpp"
#include "upsearch/pruning.hpp"
#include "upsearch/rng.hpp"
#include "upsearch/weights.hpp"

namespace upsearch {

// One dataset split, sample-major: sample i occupies x[i * numel .. (i+1) * numel).
struct DataSplit {
  std::vector<double> x;
  std::vector<int> y;

  int count() const { return static_cast<int>(y.size()); }
};

// Small image-classification task. Validation is carved from the training
// pool, so the three splits are disjoint by construction.
struct Dataset {
  TensorShape input_shape;
  int num_classes = 0;
  DataSplit train, val, test;
};

// Deterministic synthetic task: oriented sinusoidal gratings. Class encodes
// (orientation in {0,45,90,135 deg}) x (dominant color channel in {0,2}),
// 8 classes, balanced round-robin. Phase, wavelength, and pixel noise are
// drawn from the seed; the same seed reproduces the dataset bit-exactly.
// 10% of the training pool (seeded shuffle) becomes the validation split.
Dataset make_synthetic_dataset(int train_count, int test_count,
                               std::uint64_t seed, int image_size = 12);

// Desk-scale chain: stem conv 3->16 (not prunable), then prunable 3x3 convs
// 16->32 s2, 32->32, 32->64 s2, 64->64, 64->128 s2, each with BatchNorm and
// ReLU, closed by a Dense head over the flattened final activation.
ModelGraph desk_model(TensorShape input, int num_classes);

struct TrainConfig {
  double learning_rate = 2e-4;
  double weight_decay = 1e-4;  // coupled L2 on conv/dense weights
  double beta1 = 0.8;          // the optimizer's momentum coefficient
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 32;
  int replace_finetune_epochs = 5;
  int prune_finetune_epochs = 10;
  int patience = 3;  // consecutive non-improving validation epochs
};

// Throws ConfigError unless every field above is positive.
void check_train_config(const TrainConfig& cfg);

// Eval-mode class logits (batch norm uses running statistics) for `count`
// samples starting at x, sample-major. Returns count * num_classes values.
std::vector<double> forward_eval(const ModelGraph& graph,
                                 const ModelWeights& weights,
                                 const TensorShape& input, const double* x,
                                 int count);

// Mean softmax cross-entropy of a split, eval mode.
double split_loss(const ModelGraph& graph, const ModelWeights& weights,
                  const Dataset& data, const DataSplit& split);

// Fraction of correctly classified samples, eval mode. Argmax ties resolve
// to the lowest class index.
double accuracy(const ModelGraph& graph, const ModelWeights& weights,
                const Dataset& data, const DataSplit& split);

// Per-layer parameter gradients; conv/dense fill w and bias, batch norm
// fills gamma and beta, other kinds carry no parameters.
struct LayerGrads {
  std::vector<double> w, bias, gamma, beta;
};

// Train-mode (batch-statistics) mean cross-entropy of one labeled batch; a
// non-null `grads` receives the backward pass's parameter gradients, without
// weight decay. Pure: running statistics stay untouched. This is the seam
// gradient verification tests drive; train_epoch composes it with the
// optimizer and the running-statistics update.
double batch_loss(const ModelGraph& graph, const ModelWeights& weights,
                  const TensorShape& input, const double* x, const int* y,
                  int count, std::map<int, LayerGrads>* grads = nullptr);

// Adam moment accumulators for every trainable tensor (conv/dense w and bias,
// batch-norm gamma and beta). Running statistics are not optimized.
struct AdamState {
  struct Moments {
    std::vector<double> m, v;
  };
  struct TensorState {
    Moments w, bias, gamma, beta;
  };
  std::map<int, TensorState> layers;
  std::int64_t step = 0;
};

AdamState init_adam(const ModelGraph& graph, const ModelWeights& weights);

// Optional extra weight-gradient term, applied to a layer's conv/dense kernel
// gradient before the optimizer step (the ADMM rho-penalty hooks in here).
using GradHook = std::function<void(int layer_id, const std::vector<double>& w,
                                    std::vector<double>& grad_w)>;

// One optimization pass over the training split in seeded shuffled batch
// order: forward (train-mode batch norm), backward, Adam step; entries masked
// by `masks` are re-zeroed after every step. Returns the mean training loss.
// Throws NumericalError with epoch/batch diagnostics on a non-finite loss.
double train_epoch(const ModelGraph& graph, ModelWeights& weights,
                   AdamState& opt, const Dataset& data, const TrainConfig& cfg,
                   Rng& rng, const std::map<int, PruningMask>* masks = nullptr,
                   const GradHook& hook = nullptr, int epoch_index = 0);

// Strict-improvement stopper: update() returns true once `patience`
// consecutive epochs failed to beat the best validation loss seen so far.
struct EarlyStopper {
  int patience = 3;
  double best = std::numeric_limits<double>::infinity();
  int best_epoch = 0;
  int stale = 0;

  bool update(int epoch, double val_loss);
};

struct TrainResult {
  ModelWeights weights;             // best-validation snapshot
  std::vector<double> val_losses;   // one entry per completed epoch
  std::vector<double> train_losses;
  int best_epoch = 0;               // 1-based; 0 = never improved
  bool early_stopped = false;
};

// Runs at most `epochs` epochs with early stopping on validation loss and
// returns the best-validation weights. Zero epochs returns the start weights
// untouched. Masked positions stay exactly zero in every snapshot.
TrainResult train(const ModelGraph& graph, const ModelWeights& start,
                  const Dataset& data, const TrainConfig& cfg, int epochs,
                  const std::map<int, PruningMask>* masks = nullptr,
                  std::uint64_t seed = 1);

}  // namespace upsearch
