#include "upsearch/trainer.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <string>

#include "upsearch/errors.hpp"

namespace upsearch {
namespace {

constexpr double kBnMomentum = 0.1;  // running = 0.9 * running + 0.1 * batch
constexpr double kTwoPi = 6.283185307179586476925286766559;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConst = Eigen::Map<const RowMat>;

// Batch activation, laid out [sample][channel][y][x].
struct Act {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<double> v;

  std::size_t per_sample() const {
    return static_cast<std::size_t>(c) * h * w;
  }
  double* sample(int i) { return v.data() + per_sample() * i; }
  const double* sample(int i) const { return v.data() + per_sample() * i; }
};

Act make_act(int n, const TensorShape& s) {
  Act a{n, s.channels, s.height, s.width, {}};
  a.v.assign(static_cast<std::size_t>(n) * s.numel(), 0.0);
  return a;
}

struct BnCache {
  std::vector<double> xhat;     // same layout as the activation
  std::vector<double> inv_std;  // per channel
};

struct ForwardCtx {
  std::map<int, Act> acts;                    // layer id -> output; -1 = input
  std::map<int, std::vector<double>> cols;    // conv id -> im2col matrix
  std::map<int, BnCache> bn;
};

std::size_t act_index(const Act& a, int n, int c, int y, int x) {
  return ((static_cast<std::size_t>(n) * a.c + c) * a.h + y) * a.w + x;
}

void conv_forward(const LayerSpec& s, const LayerWeights& lw, const Act& in,
                  Act& out, std::vector<double>* cols_keep) {
  const int k = s.kernel, pad = (k - 1) / 2;
  const int ohw = out.h * out.w;
  const int rows = s.c_in * k * k;
  const long cols_n = static_cast<long>(in.n) * ohw;
  std::vector<double> cols(static_cast<std::size_t>(rows) * cols_n, 0.0);
  for (int i = 0; i < s.c_in; ++i)
    for (int r = 0; r < k; ++r)
      for (int c = 0; c < k; ++c) {
        double* row = cols.data() + static_cast<std::size_t>((i * k + r) * k + c) * cols_n;
        for (int nn = 0; nn < in.n; ++nn)
          for (int y = 0; y < out.h; ++y) {
            const int yy = y * s.stride + r - pad;
            if (yy < 0 || yy >= in.h) continue;
            for (int x = 0; x < out.w; ++x) {
              const int xx = x * s.stride + c - pad;
              if (xx < 0 || xx >= in.w) continue;
              row[nn * ohw + y * out.w + x] = in.v[act_index(in, nn, i, yy, xx)];
            }
          }
      }

  MapConst wmat(lw.w.data(), s.c_out, rows);
  MapConst cmat(cols.data(), rows, cols_n);
  RowMat o = wmat * cmat;
  for (int nn = 0; nn < in.n; ++nn)
    for (int oc = 0; oc < s.c_out; ++oc) {
      const double b = lw.bias[static_cast<std::size_t>(oc)];
      double* dst = out.v.data() + act_index(out, nn, oc, 0, 0);
      const double* src = o.data() + static_cast<std::size_t>(oc) * cols_n + static_cast<std::size_t>(nn) * ohw;
      for (int p = 0; p < ohw; ++p) dst[p] = src[p] + b;
    }
  if (cols_keep) *cols_keep = std::move(cols);
}

void conv_backward(const LayerSpec& s, const LayerWeights& lw,
                   const std::vector<double>& cols, const Act& in,
                   const Act& dout, Act& din, std::vector<double>& gw,
                   std::vector<double>& gb) {
  const int k = s.kernel, pad = (k - 1) / 2;
  const int ohw = dout.h * dout.w;
  const int rows = s.c_in * k * k;
  const long cols_n = static_cast<long>(in.n) * ohw;

  RowMat dmat(s.c_out, cols_n);
  for (int nn = 0; nn < in.n; ++nn)
    for (int oc = 0; oc < s.c_out; ++oc)
      std::memcpy(dmat.data() + static_cast<std::size_t>(oc) * cols_n + static_cast<std::size_t>(nn) * ohw,
                  dout.v.data() + act_index(dout, nn, oc, 0, 0),
                  sizeof(double) * ohw);

  MapConst cmat(cols.data(), rows, cols_n);
  MapConst wmat(lw.w.data(), s.c_out, rows);
  RowMat dw = dmat * cmat.transpose();
  gw.assign(dw.data(), dw.data() + dw.size());
  gb.resize(static_cast<std::size_t>(s.c_out));
  for (int oc = 0; oc < s.c_out; ++oc) gb[static_cast<std::size_t>(oc)] = dmat.row(oc).sum();

  RowMat dcols = wmat.transpose() * dmat;
  for (int i = 0; i < s.c_in; ++i)
    for (int r = 0; r < k; ++r)
      for (int c = 0; c < k; ++c) {
        const double* row = dcols.data() + static_cast<std::size_t>((i * k + r) * k + c) * cols_n;
        for (int nn = 0; nn < in.n; ++nn)
          for (int y = 0; y < dout.h; ++y) {
            const int yy = y * s.stride + r - pad;
            if (yy < 0 || yy >= in.h) continue;
            for (int x = 0; x < dout.w; ++x) {
              const int xx = x * s.stride + c - pad;
              if (xx < 0 || xx >= in.w) continue;
              din.v[act_index(din, nn, i, yy, xx)] += row[nn * ohw + y * dout.w + x];
            }
          }
      }
}

void dw_forward(const LayerSpec& s, const LayerWeights& lw, const Act& in, Act& out) {
  const int k = s.kernel, pad = (k - 1) / 2;
  for (int nn = 0; nn < in.n; ++nn)
    for (int ch = 0; ch < s.c_out; ++ch)
      for (int y = 0; y < out.h; ++y)
        for (int x = 0; x < out.w; ++x) {
          double acc = lw.bias[static_cast<std::size_t>(ch)];
          for (int r = 0; r < k; ++r) {
            const int yy = y * s.stride + r - pad;
            if (yy < 0 || yy >= in.h) continue;
            for (int c = 0; c < k; ++c) {
              const int xx = x * s.stride + c - pad;
              if (xx < 0 || xx >= in.w) continue;
              acc += lw.w[conv_index(s, ch, 0, r, c)] * in.v[act_index(in, nn, ch, yy, xx)];
            }
          }
          out.v[act_index(out, nn, ch, y, x)] = acc;
        }
}

void dw_backward(const LayerSpec& s, const LayerWeights& lw, const Act& in,
                 const Act& dout, Act& din, std::vector<double>& gw,
                 std::vector<double>& gb) {
  const int k = s.kernel, pad = (k - 1) / 2;
  gw.assign(lw.w.size(), 0.0);
  gb.assign(static_cast<std::size_t>(s.c_out), 0.0);
  for (int nn = 0; nn < in.n; ++nn)
    for (int ch = 0; ch < s.c_out; ++ch)
      for (int y = 0; y < dout.h; ++y)
        for (int x = 0; x < dout.w; ++x) {
          const double d = dout.v[act_index(dout, nn, ch, y, x)];
          gb[static_cast<std::size_t>(ch)] += d;
          for (int r = 0; r < k; ++r) {
            const int yy = y * s.stride + r - pad;
            if (yy < 0 || yy >= in.h) continue;
            for (int c = 0; c < k; ++c) {
              const int xx = x * s.stride + c - pad;
              if (xx < 0 || xx >= in.w) continue;
              gw[conv_index(s, ch, 0, r, c)] += d * in.v[act_index(in, nn, ch, yy, xx)];
              din.v[act_index(din, nn, ch, yy, xx)] += d * lw.w[conv_index(s, ch, 0, r, c)];
            }
          }
        }
}

void dense_forward(const LayerSpec& s, const LayerWeights& lw, const Act& in, Act& out) {
  MapConst x(in.v.data(), in.n, s.c_in);
  MapConst w(lw.w.data(), s.c_out, s.c_in);
  MapMat o(out.v.data(), in.n, s.c_out);
  o.noalias() = x * w.transpose();
  for (int nn = 0; nn < in.n; ++nn)
    for (int oc = 0; oc < s.c_out; ++oc) o(nn, oc) += lw.bias[static_cast<std::size_t>(oc)];
}

void dense_backward(const LayerSpec& s, const LayerWeights& lw, const Act& in,
                    const Act& dout, Act& din, std::vector<double>& gw,
                    std::vector<double>& gb) {
  MapConst x(in.v.data(), in.n, s.c_in);
  MapConst dy(dout.v.data(), in.n, s.c_out);
  MapConst w(lw.w.data(), s.c_out, s.c_in);
  RowMat dw = dy.transpose() * x;
  gw.assign(dw.data(), dw.data() + dw.size());
  gb.resize(static_cast<std::size_t>(s.c_out));
  for (int oc = 0; oc < s.c_out; ++oc) gb[static_cast<std::size_t>(oc)] = dy.col(oc).sum();
  MapMat dx(din.v.data(), in.n, s.c_in);
  dx.noalias() = dy * w;
}

// Train mode normalizes with batch statistics (and optionally folds them
// into the running estimates); eval mode uses the stored running statistics.
void bn_forward(const LayerSpec& s, const LayerWeights& lw, const Act& in,
                Act& out, bool train_mode, LayerWeights* running_update,
                BnCache* cache) {
  const int m = in.n * in.h * in.w;
  if (cache) {
    cache->xhat.assign(in.v.size(), 0.0);
    cache->inv_std.assign(static_cast<std::size_t>(s.c_out), 0.0);
  }
  for (int ch = 0; ch < s.c_out; ++ch) {
    double mean, inv;
    if (train_mode) {
      double sum = 0.0, sq = 0.0;
      for (int nn = 0; nn < in.n; ++nn) {
        const double* p = in.v.data() + act_index(in, nn, ch, 0, 0);
        for (int i = 0; i < in.h * in.w; ++i) {
          sum += p[i];
          sq += p[i] * p[i];
        }
      }
      mean = sum / m;
      const double var = std::max(0.0, sq / m - mean * mean);
      inv = 1.0 / std::sqrt(var + lw.bn_eps);
      if (running_update) {
        running_update->bn_mean[static_cast<std::size_t>(ch)] =
            (1.0 - kBnMomentum) * running_update->bn_mean[static_cast<std::size_t>(ch)] + kBnMomentum * mean;
        running_update->bn_var[static_cast<std::size_t>(ch)] =
            (1.0 - kBnMomentum) * running_update->bn_var[static_cast<std::size_t>(ch)] + kBnMomentum * var;
      }
    } else {
      mean = lw.bn_mean[static_cast<std::size_t>(ch)];
      inv = 1.0 / std::sqrt(lw.bn_var[static_cast<std::size_t>(ch)] + lw.bn_eps);
    }
    const double g = lw.bn_gamma[static_cast<std::size_t>(ch)];
    const double b = lw.bn_beta[static_cast<std::size_t>(ch)];
    for (int nn = 0; nn < in.n; ++nn) {
      const double* p = in.v.data() + act_index(in, nn, ch, 0, 0);
      double* q = out.v.data() + act_index(out, nn, ch, 0, 0);
      double* xh = cache ? cache->xhat.data() + act_index(in, nn, ch, 0, 0) : nullptr;
      for (int i = 0; i < in.h * in.w; ++i) {
        const double xhat = (p[i] - mean) * inv;
        if (xh) xh[i] = xhat;
        q[i] = g * xhat + b;
      }
    }
    if (cache) cache->inv_std[static_cast<std::size_t>(ch)] = inv;
  }
}

void bn_backward(const LayerSpec& s, const LayerWeights& lw, const BnCache& cache,
                 const Act& dout, Act& din, std::vector<double>& ggamma,
                 std::vector<double>& gbeta) {
  const int m = dout.n * dout.h * dout.w;
  ggamma.assign(static_cast<std::size_t>(s.c_out), 0.0);
  gbeta.assign(static_cast<std::size_t>(s.c_out), 0.0);
  for (int ch = 0; ch < s.c_out; ++ch) {
    double dg = 0.0, db = 0.0;
    for (int nn = 0; nn < dout.n; ++nn) {
      const double* d = dout.v.data() + act_index(dout, nn, ch, 0, 0);
      const double* xh = cache.xhat.data() + act_index(dout, nn, ch, 0, 0);
      for (int i = 0; i < dout.h * dout.w; ++i) {
        dg += d[i] * xh[i];
        db += d[i];
      }
    }
    ggamma[static_cast<std::size_t>(ch)] = dg;
    gbeta[static_cast<std::size_t>(ch)] = db;
    const double scale = lw.bn_gamma[static_cast<std::size_t>(ch)] *
                         cache.inv_std[static_cast<std::size_t>(ch)];
    for (int nn = 0; nn < dout.n; ++nn) {
      const double* d = dout.v.data() + act_index(dout, nn, ch, 0, 0);
      const double* xh = cache.xhat.data() + act_index(dout, nn, ch, 0, 0);
      double* q = din.v.data() + act_index(din, nn, ch, 0, 0);
      for (int i = 0; i < dout.h * dout.w; ++i)
        q[i] += scale * (d[i] - db / m - xh[i] * dg / m);
    }
  }
}

int producer_of(const ModelGraph& g, int id) {
  std::vector<int> prods = g.producers(id);
  if (prods.size() > 1)
    throw ShapeError("layer " + std::to_string(id) +
                     ": the trainer supports single-producer graphs");
  return prods.empty() ? -1 : prods[0];
}

// Forward through the whole graph for one batch. `running_update` non-null
// additionally folds train-mode batch-norm statistics into the running
// estimates; `keep_caches` retains what the backward pass needs.
const Act& forward_batch(const ModelGraph& g, const ModelWeights& w,
                         const double* x, int n, const TensorShape& shape,
                         bool train_mode, ModelWeights* running_update,
                         bool keep_caches, ForwardCtx& ctx) {
  Act input{n, shape.channels, shape.height, shape.width, {}};
  input.v.assign(x, x + static_cast<std::size_t>(n) * shape.numel());
  ctx.acts[-1] = std::move(input);

  int last = -1;
  for (const LayerSpec& l : g.layers) {
    const Act& in = ctx.acts.at(producer_of(g, l.id));
    Act out = make_act(n, output_shape(l));
    const LayerWeights& lw = w.at(l.id);
    switch (l.kind) {
      case LayerKind::Conv2d: {
        std::vector<double> cols;
        conv_forward(l, lw, in, out, keep_caches ? &cols : nullptr);
        if (keep_caches) ctx.cols[l.id] = std::move(cols);
        break;
      }
      case LayerKind::DepthwiseConv2d:
        dw_forward(l, lw, in, out);
        break;
      case LayerKind::Dense:
        dense_forward(l, lw, in, out);
        break;
      case LayerKind::BatchNorm:
        bn_forward(l, lw, in, out, train_mode,
                   running_update ? &running_update->at(l.id) : nullptr,
                   keep_caches ? &ctx.bn[l.id] : nullptr);
        break;
      case LayerKind::ReLU:
        for (std::size_t i = 0; i < in.v.size(); ++i)
          out.v[i] = in.v[i] > 0.0 ? in.v[i] : 0.0;
        break;
    }
    ctx.acts[l.id] = std::move(out);
    last = l.id;
  }
  return ctx.acts.at(last);
}

// Mean cross-entropy over the batch plus its logit gradient.
double softmax_ce(const Act& logits, const int* y, Act& dlogits) {
  const int n = logits.n, classes = logits.c;
  dlogits = logits;
  std::fill(dlogits.v.begin(), dlogits.v.end(), 0.0);
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    const double* z = logits.sample(i);
    double* d = dlogits.sample(i);
    double zmax = z[0];
    for (int j = 1; j < classes; ++j) zmax = std::max(zmax, z[j]);
    double sum = 0.0;
    for (int j = 0; j < classes; ++j) sum += std::exp(z[j] - zmax);
    const double lse = zmax + std::log(sum);
    loss += lse - z[y[i]];
    for (int j = 0; j < classes; ++j) d[j] = std::exp(z[j] - lse) / n;
    d[y[i]] -= 1.0 / n;
  }
  return loss / n;
}

void backward_batch(const ModelGraph& g, const ModelWeights& w, ForwardCtx& ctx,
                    Act dfinal, std::map<int, LayerGrads>& grads) {
  std::map<int, Act> dacts;
  dacts[g.layers.back().id] = std::move(dfinal);
  for (auto it = g.layers.rbegin(); it != g.layers.rend(); ++it) {
    const LayerSpec& l = *it;
    auto dit = dacts.find(l.id);
    if (dit == dacts.end()) continue;  // dead branch: no gradient flows
    Act dout = std::move(dit->second);
    dacts.erase(dit);

    const int prod = producer_of(g, l.id);
    const Act& in = ctx.acts.at(prod);
    Act din = make_act(in.n, {in.c, in.h, in.w});
    const LayerWeights& lw = w.at(l.id);
    switch (l.kind) {
      case LayerKind::Conv2d: {
        LayerGrads& lg = grads[l.id];
        conv_backward(l, lw, ctx.cols.at(l.id), in, dout, din, lg.w, lg.bias);
        break;
      }
      case LayerKind::DepthwiseConv2d: {
        LayerGrads& lg = grads[l.id];
        dw_backward(l, lw, in, dout, din, lg.w, lg.bias);
        break;
      }
      case LayerKind::Dense: {
        LayerGrads& lg = grads[l.id];
        dense_backward(l, lw, in, dout, din, lg.w, lg.bias);
        break;
      }
      case LayerKind::BatchNorm: {
        LayerGrads& lg = grads[l.id];
        bn_backward(l, lw, ctx.bn.at(l.id), dout, din, lg.gamma, lg.beta);
        break;
      }
      case LayerKind::ReLU: {
        const Act& out = ctx.acts.at(l.id);
        for (std::size_t i = 0; i < dout.v.size(); ++i)
          din.v[i] = out.v[i] > 0.0 ? dout.v[i] : 0.0;
        break;
      }
    }
    if (prod >= 0) {
      auto [pit, fresh] = dacts.try_emplace(prod, std::move(din));
      if (!fresh)
        for (std::size_t i = 0; i < din.v.size(); ++i) pit->second.v[i] += din.v[i];
    }
  }
}

double loss_and_grads(const ModelGraph& g, const ModelWeights& w,
                      const TensorShape& shape, const double* x, const int* y,
                      int n, std::map<int, LayerGrads>* grads,
                      ModelWeights* running_update) {
  ForwardCtx ctx;
  const Act& logits = forward_batch(g, w, x, n, shape, /*train_mode=*/true,
                                    running_update, grads != nullptr, ctx);
  if (logits.h != 1 || logits.w != 1)
    throw ShapeError("final layer must produce class logits");
  Act dlogits;
  const double loss = softmax_ce(logits, y, dlogits);
  if (grads) backward_batch(g, w, ctx, std::move(dlogits), *grads);
  return loss;
}

void adam_update(std::vector<double>& theta, const std::vector<double>& g,
                 AdamState::Moments& mo, std::int64_t t, const TrainConfig& cfg) {
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    mo.m[i] = cfg.beta1 * mo.m[i] + (1.0 - cfg.beta1) * g[i];
    mo.v[i] = cfg.beta2 * mo.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
    theta[i] -= cfg.learning_rate * (mo.m[i] / bc1) /
                (std::sqrt(mo.v[i] / bc2) + cfg.adam_eps);
  }
}

bool has_kernel(LayerKind k) {
  return k == LayerKind::Conv2d || k == LayerKind::DepthwiseConv2d ||
         k == LayerKind::Dense;
}

}  // namespace

void check_train_config(const TrainConfig& cfg) {
  if (!(cfg.learning_rate > 0.0) || !(cfg.weight_decay > 0.0))
    throw ConfigError("learning rate and weight decay must be positive");
  if (!(cfg.beta1 > 0.0) || cfg.beta1 >= 1.0 || !(cfg.beta2 > 0.0) || cfg.beta2 >= 1.0)
    throw ConfigError("optimizer betas must lie in (0, 1)");
  if (!(cfg.adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (cfg.batch_size < 1) throw ConfigError("batch_size must be positive");
  if (cfg.replace_finetune_epochs < 1 || cfg.prune_finetune_epochs < 1)
    throw ConfigError("fine-tune epoch budgets must be positive");
  if (cfg.patience < 1) throw ConfigError("patience must be positive");
}

Dataset make_synthetic_dataset(int train_count, int test_count,
                               std::uint64_t seed, int image_size) {
  if (train_count < 10 || test_count < 1)
    throw ConfigError("synthetic dataset needs at least 10 train and 1 test samples");
  if (image_size < 4) throw ConfigError("image_size must be at least 4");

  Dataset d;
  d.input_shape = {3, image_size, image_size};
  d.num_classes = 8;
  Rng rng(seed);

  const std::size_t numel = static_cast<std::size_t>(d.input_shape.numel());
  auto draw = [&](int label, std::vector<double>& out) {
    const int ori = label / 2;      // 0, 45, 90, 135 degrees
    const int col = (label % 2) * 2;  // dominant channel 0 or 2
    const double theta = ori * (kTwoPi / 8.0);
    const double freq = kTwoPi / rng.uniform(5.0, 7.0);
    const double phase = rng.uniform(0.0, kTwoPi);
    const double cx = std::cos(theta), sy = std::sin(theta);
    for (int ch = 0; ch < 3; ++ch) {
      const double amp = ch == col ? 1.0 : 0.15;
      for (int y = 0; y < image_size; ++y)
        for (int x = 0; x < image_size; ++x) {
          const double g = std::sin(freq * (x * cx + y * sy) + phase);
          out.push_back(amp * g + 0.25 * rng.normal());
        }
    }
  };

  std::vector<double> pool_x;
  std::vector<int> pool_y;
  pool_x.reserve(static_cast<std::size_t>(train_count) * numel);
  for (int i = 0; i < train_count; ++i) {
    pool_y.push_back(i % d.num_classes);
    draw(pool_y.back(), pool_x);
  }
  for (int i = 0; i < test_count; ++i) {
    d.test.y.push_back(i % d.num_classes);
    draw(d.test.y.back(), d.test.x);
  }

  // Deterministic carve: seeded shuffle, first 10% becomes validation.
  std::vector<int> order(static_cast<std::size_t>(train_count));
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  const int val_n = std::max(1, train_count / 10);
  std::vector<std::uint8_t> is_val(static_cast<std::size_t>(train_count), 0);
  for (int i = 0; i < val_n; ++i) is_val[static_cast<std::size_t>(order[i])] = 1;
  for (int i = 0; i < train_count; ++i) {
    DataSplit& dst = is_val[static_cast<std::size_t>(i)] ? d.val : d.train;
    dst.y.push_back(pool_y[static_cast<std::size_t>(i)]);
    const double* src = pool_x.data() + numel * i;
    dst.x.insert(dst.x.end(), src, src + numel);
  }
  return d;
}

ModelGraph desk_model(TensorShape input, int num_classes) {
  if (num_classes < 2) throw ConfigError("desk model needs at least 2 classes");
  struct ConvPlan {
    int c_out, stride;
    bool prunable;
  };
  const ConvPlan plan[] = {{16, 1, false}, {32, 2, true}, {32, 1, true},
                           {64, 2, true},  {64, 1, true}, {128, 2, true}};

  ModelGraph g;
  TensorShape shape = input;
  int id = 0;
  auto push = [&](LayerSpec s) {
    s.id = id;
    s.input_shape = shape;
    if (id > 0) g.edges.emplace_back(id - 1, id);
    g.layers.push_back(s);
    shape = output_shape(g.layers.back());
    ++id;
  };

  for (const ConvPlan& p : plan) {
    LayerSpec c;
    c.kind = LayerKind::Conv2d;
    c.c_in = shape.channels;
    c.c_out = p.c_out;
    c.kernel = 3;
    c.stride = p.stride;
    c.prunable = p.prunable;
    push(c);
    LayerSpec b;
    b.kind = LayerKind::BatchNorm;
    b.c_in = b.c_out = p.c_out;
    push(b);
    LayerSpec r;
    r.kind = LayerKind::ReLU;
    r.c_in = r.c_out = p.c_out;
    push(r);
  }
  LayerSpec head;
  head.kind = LayerKind::Dense;
  head.c_in = static_cast<int>(shape.numel());
  head.c_out = num_classes;
  push(head);

  assign_scheme_slots(g);
  g.validate();
  return g;
}

std::vector<double> forward_eval(const ModelGraph& graph,
                                 const ModelWeights& weights,
                                 const TensorShape& input, const double* x,
                                 int count) {
  const std::size_t numel = static_cast<std::size_t>(input.numel());
  std::vector<double> logits;
  constexpr int kChunk = 64;
  for (int s = 0; s < count; s += kChunk) {
    const int n = std::min(kChunk, count - s);
    ForwardCtx ctx;
    const Act& out = forward_batch(graph, weights, x + numel * s, n, input,
                                   /*train_mode=*/false, nullptr,
                                   /*keep_caches=*/false, ctx);
    logits.insert(logits.end(), out.v.begin(), out.v.end());
  }
  return logits;
}

double split_loss(const ModelGraph& graph, const ModelWeights& weights,
                  const Dataset& data, const DataSplit& split) {
  if (split.count() == 0) throw ConfigError("loss over an empty split");
  std::vector<double> logits =
      forward_eval(graph, weights, data.input_shape, split.x.data(), split.count());
  const int classes = static_cast<int>(logits.size()) / split.count();
  double loss = 0.0;
  for (int i = 0; i < split.count(); ++i) {
    const double* z = logits.data() + static_cast<std::size_t>(i) * classes;
    double zmax = z[0];
    for (int j = 1; j < classes; ++j) zmax = std::max(zmax, z[j]);
    double sum = 0.0;
    for (int j = 0; j < classes; ++j) sum += std::exp(z[j] - zmax);
    loss += zmax + std::log(sum) - z[split.y[static_cast<std::size_t>(i)]];
  }
  return loss / split.count();
}

double accuracy(const ModelGraph& graph, const ModelWeights& weights,
                const Dataset& data, const DataSplit& split) {
  if (split.count() == 0) throw ConfigError("accuracy over an empty split");
  std::vector<double> logits =
      forward_eval(graph, weights, data.input_shape, split.x.data(), split.count());
  const int classes = static_cast<int>(logits.size()) / split.count();
  int hits = 0;
  for (int i = 0; i < split.count(); ++i) {
    const double* z = logits.data() + static_cast<std::size_t>(i) * classes;
    int arg = 0;
    for (int j = 1; j < classes; ++j)
      if (z[j] > z[arg]) arg = j;
    hits += arg == split.y[static_cast<std::size_t>(i)];
  }
  return static_cast<double>(hits) / split.count();
}

double batch_loss(const ModelGraph& graph, const ModelWeights& weights,
                  const TensorShape& input, const double* x, const int* y,
                  int count, std::map<int, LayerGrads>* grads) {
  return loss_and_grads(graph, weights, input, x, y, count, grads, nullptr);
}

AdamState init_adam(const ModelGraph& graph, const ModelWeights& weights) {
  AdamState st;
  for (const LayerSpec& l : graph.layers) {
    const LayerWeights& lw = weights.at(l.id);
    AdamState::TensorState ts;
    if (has_kernel(l.kind)) {
      ts.w.m.assign(lw.w.size(), 0.0);
      ts.w.v.assign(lw.w.size(), 0.0);
      ts.bias.m.assign(lw.bias.size(), 0.0);
      ts.bias.v.assign(lw.bias.size(), 0.0);
    } else if (l.kind == LayerKind::BatchNorm) {
      ts.gamma.m.assign(lw.bn_gamma.size(), 0.0);
      ts.gamma.v.assign(lw.bn_gamma.size(), 0.0);
      ts.beta.m.assign(lw.bn_beta.size(), 0.0);
      ts.beta.v.assign(lw.bn_beta.size(), 0.0);
    } else {
      continue;
    }
    st.layers[l.id] = std::move(ts);
  }
  return st;
}

double train_epoch(const ModelGraph& graph, ModelWeights& weights,
                   AdamState& opt, const Dataset& data, const TrainConfig& cfg,
                   Rng& rng, const std::map<int, PruningMask>* masks,
                   const GradHook& hook, int epoch_index) {
  check_train_config(cfg);
  const int total = data.train.count();
  if (total == 0) throw ConfigError("empty training split");

  std::vector<int> order(static_cast<std::size_t>(total));
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);

  const std::size_t numel = static_cast<std::size_t>(data.input_shape.numel());
  double loss_sum = 0.0;
  int batch_index = 0;
  for (int s = 0; s < total; s += cfg.batch_size, ++batch_index) {
    const int n = std::min(cfg.batch_size, total - s);
    std::vector<double> xb(static_cast<std::size_t>(n) * numel);
    std::vector<int> yb(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      const int src = order[static_cast<std::size_t>(s + i)];
      std::memcpy(xb.data() + numel * i, data.train.x.data() + numel * src,
                  sizeof(double) * numel);
      yb[static_cast<std::size_t>(i)] = data.train.y[static_cast<std::size_t>(src)];
    }

    std::map<int, LayerGrads> grads;
    const double loss = loss_and_grads(graph, weights, data.input_shape,
                                       xb.data(), yb.data(), n, &grads, &weights);
    if (!std::isfinite(loss))
      throw NumericalError("epoch " + std::to_string(epoch_index) + " batch " +
                           std::to_string(batch_index) +
                           ": non-finite training loss");
    loss_sum += loss * n;

    opt.step += 1;
    for (auto& [id, lg] : grads) {
      LayerWeights& lw = weights.at(id);
      AdamState::TensorState& ts = opt.layers.at(id);
      if (!lg.w.empty()) {
        for (std::size_t i = 0; i < lg.w.size(); ++i)
          lg.w[i] += cfg.weight_decay * lw.w[i];
        if (hook) hook(id, lw.w, lg.w);
        adam_update(lw.w, lg.w, ts.w, opt.step, cfg);
        adam_update(lw.bias, lg.bias, ts.bias, opt.step, cfg);
      }
      if (!lg.gamma.empty()) {
        adam_update(lw.bn_gamma, lg.gamma, ts.gamma, opt.step, cfg);
        adam_update(lw.bn_beta, lg.beta, ts.beta, opt.step, cfg);
      }
    }
    if (masks)
      for (const auto& [id, mask] : *masks) apply_mask(weights.at(id).w, mask);
  }
  return loss_sum / total;
}

bool EarlyStopper::update(int epoch, double val_loss) {
  if (val_loss < best) {
    best = val_loss;
    best_epoch = epoch;
    stale = 0;
    return false;
  }
  return ++stale >= patience;
}

TrainResult train(const ModelGraph& graph, const ModelWeights& start,
                  const Dataset& data, const TrainConfig& cfg, int epochs,
                  const std::map<int, PruningMask>* masks, std::uint64_t seed) {
  check_train_config(cfg);
  if (epochs < 0) throw ConfigError("epochs must be non-negative");
  check_weights(graph, start);

  TrainResult res;
  res.weights = start;
  if (epochs == 0) return res;

  ModelWeights cur = start;
  AdamState opt = init_adam(graph, cur);
  Rng rng(seed);
  EarlyStopper stop{cfg.patience, std::numeric_limits<double>::infinity(), 0, 0};

  for (int e = 1; e <= epochs; ++e) {
    res.train_losses.push_back(
        train_epoch(graph, cur, opt, data, cfg, rng, masks, nullptr, e));
    const double vl = split_loss(graph, cur, data, data.val);
    if (!std::isfinite(vl))
      throw NumericalError("epoch " + std::to_string(e) +
                           ": non-finite validation loss");
    res.val_losses.push_back(vl);
    const double prev_best = stop.best;
    const bool stop_now = stop.update(e, vl);
    if (stop.best < prev_best) res.weights = cur;
    if (stop_now) {
      res.early_stopped = true;
      break;
    }
  }
  res.best_epoch = stop.best_epoch;
  return res;
}

}  // namespace upsearch
