#include "upsearch/controller.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "upsearch/binio.hpp"
#include "upsearch/errors.hpp"
#include "upsearch/rng.hpp"

namespace upsearch {

Reward compute_reward(double accuracy, double latency_ms,
                      const ControllerConfig& cfg) {
  Reward r;
  r.accuracy = accuracy;
  r.latency_ms = latency_ms;
  r.value =
      accuracy - cfg.alpha * std::max(0.0, latency_ms - cfg.latency_threshold_ms);
  r.provenance = RewardProvenance::Measured;
  return r;
}

namespace {

constexpr double kMaskPenalty = -1e9;

// Offsets of every tensor inside the flat parameter vector.
struct Layout {
  int hidden = 0;
  int layers = 0;
  std::vector<int> vocab;
  int start_emb = 0;
  std::vector<int> emb;      // per class: vocab[c] x H
  std::vector<int> lstm_wx;  // per layer: 4H x H
  std::vector<int> lstm_wh;  // per layer: 4H x H
  std::vector<int> lstm_b;   // per layer: 4H
  std::vector<int> head_w;   // per class: vocab[c] x H
  std::vector<int> head_b;   // per class: vocab[c]
  int total = 0;
};

Layout make_layout(const ControllerConfig& cfg, const std::vector<int>& vocabs) {
  Layout lo;
  lo.hidden = cfg.hidden_size;
  lo.layers = cfg.num_layers;
  lo.vocab = vocabs;
  const int h = lo.hidden;
  int at = 0;
  lo.start_emb = at;
  at += h;
  for (int v : vocabs) {
    lo.emb.push_back(at);
    at += v * h;
  }
  for (int l = 0; l < lo.layers; ++l) {
    lo.lstm_wx.push_back(at);
    at += 4 * h * h;
    lo.lstm_wh.push_back(at);
    at += 4 * h * h;
    lo.lstm_b.push_back(at);
    at += 4 * h;
  }
  for (int v : vocabs) {
    lo.head_w.push_back(at);
    at += v * h;
    lo.head_b.push_back(at);
    at += v;
  }
  lo.total = at;
  return lo;
}

void check_config(const ControllerConfig& cfg) {
  if (cfg.hidden_size < 1) throw ConfigError("controller hidden size must be positive");
  if (cfg.num_layers < 1) throw ConfigError("controller needs at least one LSTM layer");
  if (cfg.batch < 1) throw ConfigError("controller batch size K must be at least 1");
  if (cfg.alpha < 0.0) throw ConfigError("latency penalty alpha must be non-negative");
  if (!(cfg.latency_threshold_ms > 0.0))
    throw ConfigError("latency threshold must be positive");
  if (!(cfg.ema_decay >= 0.0 && cfg.ema_decay < 1.0))
    throw ConfigError("baseline ema decay must lie in [0, 1)");
}

void check_space(const ControllerState& state, const TokenSpace& space) {
  if (space.class_vocabs != state.class_vocabs)
    throw ShapeError("token space vocabularies do not match the controller's");
  for (const auto& pos : space.positions) {
    if (pos.class_id < 0 ||
        pos.class_id >= static_cast<int>(state.class_vocabs.size()))
      throw ShapeError("token position references an unknown class");
    if (pos.vocab != state.class_vocabs[pos.class_id])
      throw ShapeError("token position vocabulary disagrees with its class");
  }
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// gates[4H] = Wx * x + Wh * h + b, packed [input; forget; cell; output].
void lstm_gates(const double* wx, const double* wh, const double* b,
                const double* x, const double* h, int hidden, double* gates) {
  const int rows = 4 * hidden;
  for (int r = 0; r < rows; ++r) {
    double acc = b[r];
    const double* wxr = wx + static_cast<std::size_t>(r) * hidden;
    const double* whr = wh + static_cast<std::size_t>(r) * hidden;
    for (int j = 0; j < hidden; ++j) acc += wxr[j] * x[j] + whr[j] * h[j];
    gates[r] = acc;
  }
}

// Everything the backward pass needs from one LSTM step of one layer.
struct StepCache {
  std::vector<double> x, h_prev, c_prev;
  std::vector<double> i, f, g, o, c, tanh_c, h;
};

struct PositionCache {
  std::vector<StepCache> layer;    // per LSTM layer
  std::vector<double> probs;       // masked softmax at this position
  int class_id = 0;
  int token = -1;
};

// Runs the LSTM over a token sequence. When sampling, tokens is filled from
// rng draws; otherwise the given tokens are scored. Returns per-position
// log-probabilities; fills caches when the caller plans a backward pass.
std::vector<double> run_sequence(const ControllerState& state,
                                 const TokenSpace& space,
                                 std::vector<int>& tokens, bool sampling,
                                 Rng* rng, std::vector<PositionCache>* caches) {
  const Layout lo = make_layout(state.cfg, state.class_vocabs);
  const int h = lo.hidden;
  const double* th = state.theta.data();
  const int q_total = space.size();

  std::vector<std::vector<double>> hs(lo.layers, std::vector<double>(h, 0.0));
  std::vector<std::vector<double>> cs(lo.layers, std::vector<double>(h, 0.0));
  std::vector<double> gates(4 * h), x(h), logits, probs;
  std::vector<double> log_probs(q_total, 0.0);
  std::vector<int> prefix;
  prefix.reserve(q_total);
  if (caches) caches->resize(q_total);

  for (int q = 0; q < q_total; ++q) {
    const int cls = space.positions[q].class_id;
    const int vocab = space.positions[q].vocab;

    // Input embedding: previous token's row, or the start vector at q = 0.
    if (q == 0) {
      std::copy(th + lo.start_emb, th + lo.start_emb + h, x.begin());
    } else {
      const int pcls = space.positions[q - 1].class_id;
      const double* row =
          th + lo.emb[pcls] + static_cast<std::size_t>(tokens[q - 1]) * h;
      std::copy(row, row + h, x.begin());
    }

    const double* in = x.data();
    for (int l = 0; l < lo.layers; ++l) {
      StepCache* sc = nullptr;
      if (caches) {
        (*caches)[q].layer.resize(lo.layers);
        sc = &(*caches)[q].layer[l];
        sc->x.assign(in, in + h);
        sc->h_prev = hs[l];
        sc->c_prev = cs[l];
      }
      lstm_gates(th + lo.lstm_wx[l], th + lo.lstm_wh[l], th + lo.lstm_b[l], in,
                 hs[l].data(), h, gates.data());
      if (sc) {
        sc->i.resize(h);
        sc->f.resize(h);
        sc->g.resize(h);
        sc->o.resize(h);
        sc->tanh_c.resize(h);
      }
      for (int j = 0; j < h; ++j) {
        const double gi = sigmoid(gates[j]);
        const double gf = sigmoid(gates[h + j]);
        const double gg = std::tanh(gates[2 * h + j]);
        const double go = sigmoid(gates[3 * h + j]);
        const double cj = gf * cs[l][j] + gi * gg;
        const double tc = std::tanh(cj);
        cs[l][j] = cj;
        hs[l][j] = go * tc;
        if (sc) {
          sc->i[j] = gi;
          sc->f[j] = gf;
          sc->g[j] = gg;
          sc->o[j] = go;
          sc->tanh_c[j] = tc;
        }
      }
      if (sc) {
        sc->c = cs[l];
        sc->h = hs[l];
      }
      in = hs[l].data();
    }

    // Class head + validity mask.
    logits.assign(vocab, 0.0);
    const double* hw = th + lo.head_w[cls];
    const double* hb = th + lo.head_b[cls];
    const std::vector<double>& top = hs[lo.layers - 1];
    for (int t = 0; t < vocab; ++t) {
      double acc = hb[t];
      const double* wr = hw + static_cast<std::size_t>(t) * h;
      for (int j = 0; j < h; ++j) acc += wr[j] * top[j];
      logits[t] = acc;
    }
    std::vector<std::uint8_t> mask = space.valid_mask(q, prefix);
    bool any = false;
    for (int t = 0; t < vocab; ++t) {
      if (mask[t])
        any = true;
      else
        logits[t] += kMaskPenalty;
    }
    if (!any)
      throw ConfigError("every token is masked at position " + std::to_string(q));

    double mx = logits[0];
    for (int t = 1; t < vocab; ++t) mx = std::max(mx, logits[t]);
    double z = 0.0;
    probs.assign(vocab, 0.0);
    for (int t = 0; t < vocab; ++t) {
      probs[t] = std::exp(logits[t] - mx);
      z += probs[t];
    }
    const double log_z = std::log(z);
    for (int t = 0; t < vocab; ++t) probs[t] /= z;

    int tok;
    if (sampling) {
      tok = rng->discrete(probs);
      tokens.push_back(tok);
    } else {
      tok = tokens[q];
      if (tok < 0 || tok >= vocab)
        throw ShapeError("token " + std::to_string(tok) + " out of range at position " +
                         std::to_string(q));
    }
    log_probs[q] = logits[tok] - mx - log_z;
    prefix.push_back(tok);

    if (caches) {
      (*caches)[q].probs = probs;
      (*caches)[q].class_id = cls;
      (*caches)[q].token = tok;
    }
  }
  return log_probs;
}

// Backprop of weight * log P(tokens) through the caches into grad.
void backward_sequence(const ControllerState& state,
                       const std::vector<PositionCache>& caches, double weight,
                       std::vector<double>& grad) {
  const Layout lo = make_layout(state.cfg, state.class_vocabs);
  const int h = lo.hidden;
  const double* th = state.theta.data();
  double* gr = grad.data();
  const int q_total = static_cast<int>(caches.size());

  // Running adjoints of each layer's hidden/cell state, flowing right to left.
  std::vector<std::vector<double>> dh(lo.layers, std::vector<double>(h, 0.0));
  std::vector<std::vector<double>> dc(lo.layers, std::vector<double>(h, 0.0));
  std::vector<double> dgates(4 * h), dx(h);

  for (int q = q_total - 1; q >= 0; --q) {
    const PositionCache& pc = caches[q];
    const int cls = pc.class_id;
    const int vocab = static_cast<int>(pc.probs.size());

    // Head: d logits = weight * (onehot(token) - probs). Masked entries have
    // prob exactly 0, so they contribute nothing.
    const double* hw = th + lo.head_w[cls];
    const StepCache& top = pc.layer[lo.layers - 1];
    for (int t = 0; t < vocab; ++t) {
      const double dl = weight * ((t == pc.token ? 1.0 : 0.0) - pc.probs[t]);
      if (dl == 0.0) continue;
      double* gwr = gr + lo.head_w[cls] + static_cast<std::size_t>(t) * h;
      const double* wr = hw + static_cast<std::size_t>(t) * h;
      for (int j = 0; j < h; ++j) {
        gwr[j] += dl * top.h[j];
        dh[lo.layers - 1][j] += dl * wr[j];
      }
      gr[lo.head_b[cls] + t] += dl;
    }

    // LSTM layers, top down; dx of layer l feeds dh of layer l-1.
    for (int l = lo.layers - 1; l >= 0; --l) {
      const StepCache& sc = pc.layer[l];
      for (int j = 0; j < h; ++j) {
        const double dhj = dh[l][j];
        const double dcj = dc[l][j] + dhj * sc.o[j] * (1.0 - sc.tanh_c[j] * sc.tanh_c[j]);
        const double di = dcj * sc.g[j];
        const double df = dcj * sc.c_prev[j];
        const double dg = dcj * sc.i[j];
        const double do_ = dhj * sc.tanh_c[j];
        dgates[j] = di * sc.i[j] * (1.0 - sc.i[j]);
        dgates[h + j] = df * sc.f[j] * (1.0 - sc.f[j]);
        dgates[2 * h + j] = dg * (1.0 - sc.g[j] * sc.g[j]);
        dgates[3 * h + j] = do_ * sc.o[j] * (1.0 - sc.o[j]);
        dc[l][j] = dcj * sc.f[j];  // flows to step q-1
      }

      const double* wx = th + lo.lstm_wx[l];
      const double* wh = th + lo.lstm_wh[l];
      double* gwx = gr + lo.lstm_wx[l];
      double* gwh = gr + lo.lstm_wh[l];
      double* gb = gr + lo.lstm_b[l];
      std::fill(dx.begin(), dx.end(), 0.0);
      std::fill(dh[l].begin(), dh[l].end(), 0.0);
      for (int r = 0; r < 4 * h; ++r) {
        const double dgr = dgates[r];
        if (dgr == 0.0) continue;
        const std::size_t off = static_cast<std::size_t>(r) * h;
        for (int j = 0; j < h; ++j) {
          gwx[off + j] += dgr * sc.x[j];
          gwh[off + j] += dgr * sc.h_prev[j];
          dx[j] += dgr * wx[off + j];
          dh[l][j] += dgr * wh[off + j];  // recurrent path into step q-1
        }
        gb[r] += dgr;
      }

      if (l > 0)
        for (int j = 0; j < h; ++j) dh[l - 1][j] += dx[j];
      else {
        // Input embedding row (or the start vector at q = 0).
        double* dst;
        if (q == 0) {
          dst = gr + lo.start_emb;
        } else {
          const int pcls = caches[q - 1].class_id;
          dst = gr + lo.emb[pcls] +
                static_cast<std::size_t>(caches[q - 1].token) * h;
        }
        for (int j = 0; j < h; ++j) dst[j] += dx[j];
      }
    }
  }
}

}  // namespace

int controller_param_count(const ControllerConfig& cfg,
                           const std::vector<int>& class_vocabs) {
  return make_layout(cfg, class_vocabs).total;
}

ControllerState init_controller(const ControllerConfig& cfg,
                                const std::vector<int>& class_vocabs,
                                std::uint64_t seed) {
  check_config(cfg);
  if (class_vocabs.empty())
    throw ConfigError("controller needs at least one position class");
  for (int v : class_vocabs)
    if (v < 1) throw ConfigError("every class vocabulary must be non-empty");
  ControllerState st;
  st.cfg = cfg;
  st.class_vocabs = class_vocabs;
  const int n = controller_param_count(cfg, class_vocabs);
  st.theta.resize(n);
  st.adam_m.assign(n, 0.0);
  st.adam_v.assign(n, 0.0);
  Rng rng(seed);
  for (double& w : st.theta) w = rng.uniform(-cfg.init_range, cfg.init_range);
  return st;
}

SampledSequence sample_tokens(const ControllerState& state,
                              const TokenSpace& space, std::uint64_t seed) {
  check_space(state, space);
  Rng rng(seed);
  SampledSequence out;
  out.log_probs = run_sequence(state, space, out.tokens, true, &rng, nullptr);
  for (double lp : out.log_probs) out.total_log_prob += lp;
  return out;
}

std::pair<UnifiedScheme, SampledSequence> sample(const ControllerState& state,
                                                 const ModelGraph& graph,
                                                 std::uint64_t seed) {
  TokenSpace space = build_token_space(graph);
  SampledSequence seq = sample_tokens(state, space, seed);
  return {detokenize(seq.tokens), std::move(seq)};
}

std::vector<double> sequence_log_probs(const ControllerState& state,
                                       const TokenSpace& space,
                                       const std::vector<int>& tokens) {
  check_space(state, space);
  if (static_cast<int>(tokens.size()) != space.size())
    throw ShapeError("token sequence length does not match the space");
  std::vector<int> toks = tokens;
  return run_sequence(state, space, toks, false, nullptr, nullptr);
}

std::vector<double> policy_gradient(const ControllerState& state,
                                    const TokenSpace& space,
                                    const std::vector<WeightedSequence>& batch) {
  check_space(state, space);
  std::vector<double> grad(state.theta.size(), 0.0);
  std::vector<PositionCache> caches;
  for (const WeightedSequence& ws : batch) {
    if (static_cast<int>(ws.tokens.size()) != space.size())
      throw ShapeError("token sequence length does not match the space");
    std::vector<int> toks = ws.tokens;
    run_sequence(state, space, toks, false, nullptr, &caches);
    backward_sequence(state, caches, ws.weight, grad);
  }
  return grad;
}

double clip_global_norm(std::vector<double>& v, double max_norm) {
  double sq = 0.0;
  for (double x : v) sq += x * x;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double scale = max_norm / norm;
    for (double& x : v) x *= scale;
  }
  return norm;
}

void reinforce_update(ControllerState& state, const TokenSpace& space,
                      const std::vector<BatchEntry>& batch) {
  if (batch.empty()) throw ConfigError("REINFORCE update needs a non-empty batch");
  for (std::size_t k = 0; k < batch.size(); ++k)
    if (!std::isfinite(batch[k].reward.value))
      throw NumericalError("non-finite reward in batch entry " + std::to_string(k));

  double mean = 0.0;
  for (const BatchEntry& e : batch) mean += e.reward.value;
  mean /= static_cast<double>(batch.size());
  if (!state.baseline_initialized) {
    state.baseline = mean;  // avoids a cold-start advantage spike
    state.baseline_initialized = true;
  }

  const double inv_k = 1.0 / static_cast<double>(batch.size());
  std::vector<WeightedSequence> weighted;
  weighted.reserve(batch.size());
  for (const BatchEntry& e : batch)
    weighted.push_back({e.tokens, (e.reward.value - state.baseline) * inv_k});
  std::vector<double> grad = policy_gradient(state, space, weighted);
  clip_global_norm(grad, state.cfg.grad_clip);

  // Adam ascent on the score-function objective.
  state.step += 1;
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < state.theta.size(); ++i) {
    state.adam_m[i] = b1 * state.adam_m[i] + (1.0 - b1) * grad[i];
    state.adam_v[i] = b2 * state.adam_v[i] + (1.0 - b2) * grad[i] * grad[i];
    const double mhat = state.adam_m[i] / bc1;
    const double vhat = state.adam_v[i] / bc2;
    state.theta[i] += state.cfg.learning_rate * mhat / (std::sqrt(vhat) + eps);
  }

  state.baseline =
      state.cfg.ema_decay * state.baseline + (1.0 - state.cfg.ema_decay) * mean;
}

namespace {
constexpr char kMagic[4] = {'U', 'P', 'C', 'T'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

void save_controller(const ControllerState& state, std::ostream& os) {
  write_magic(os, kMagic, kVersion);
  write_i32(os, state.cfg.hidden_size);
  write_i32(os, state.cfg.num_layers);
  write_f64(os, state.cfg.init_range);
  write_f64(os, state.cfg.learning_rate);
  write_f64(os, state.cfg.alpha);
  write_f64(os, state.cfg.latency_threshold_ms);
  write_i32(os, state.cfg.batch);
  write_f64(os, state.cfg.ema_decay);
  write_f64(os, state.cfg.grad_clip);
  write_u32(os, static_cast<std::uint32_t>(state.class_vocabs.size()));
  for (int v : state.class_vocabs) write_i32(os, v);
  write_f64_vec(os, state.theta);
  write_f64_vec(os, state.adam_m);
  write_f64_vec(os, state.adam_v);
  write_f64(os, state.baseline);
  write_u32(os, state.baseline_initialized ? 1 : 0);
  write_u64(os, state.step);
}

ControllerState load_controller(std::istream& is) {
  const std::uint32_t version = read_magic(is, kMagic);
  if (version != kVersion)
    throw IoError("unsupported controller checkpoint version " +
                  std::to_string(version));
  ControllerState st;
  st.cfg.hidden_size = read_i32(is);
  st.cfg.num_layers = read_i32(is);
  st.cfg.init_range = read_f64(is);
  st.cfg.learning_rate = read_f64(is);
  st.cfg.alpha = read_f64(is);
  st.cfg.latency_threshold_ms = read_f64(is);
  st.cfg.batch = read_i32(is);
  st.cfg.ema_decay = read_f64(is);
  st.cfg.grad_clip = read_f64(is);
  const std::uint32_t nc = read_u32(is);
  st.class_vocabs.resize(nc);
  for (std::uint32_t i = 0; i < nc; ++i) st.class_vocabs[i] = read_i32(is);
  st.theta = read_f64_vec(is);
  st.adam_m = read_f64_vec(is);
  st.adam_v = read_f64_vec(is);
  st.baseline = read_f64(is);
  st.baseline_initialized = read_u32(is) != 0;
  st.step = read_u64(is);
  const int want = controller_param_count(st.cfg, st.class_vocabs);
  if (static_cast<int>(st.theta.size()) != want ||
      st.adam_m.size() != st.theta.size() || st.adam_v.size() != st.theta.size())
    throw IoError("controller checkpoint tensor sizes are inconsistent");
  return st;
}

void save_controller(const ControllerState& state, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  save_controller(state, os);
  if (!os) throw IoError("failed writing controller checkpoint to " + path);
}

ControllerState load_controller(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  return load_controller(is);
}

}  // namespace upsearch
