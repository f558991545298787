#pragma once

// Small decoder-only transformer; position enters through per-head linear
// attention biases rather than embeddings. Exposes per-layer pooled
// activations, activation deltas against a primary-only baseline, and suffix
// token gradients where per-layer probe-loss gradients are injected into the
// reverse sweep at each probed layer's pooled position.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "drift/corpus.hpp"
#include "drift/errors.hpp"
#include "drift/probes.hpp"
#include "drift/rng.hpp"
#include "drift/tape.hpp"
#include "drift/tensor.hpp"

namespace drift {

enum class Pooling { final_token, mean };

struct ModelConfig {
  int vocab_size = 256;
  int d_model = 64;
  int n_layers = 4;
  int n_heads = 4;
  int d_ff = 256;
  int max_seq_len = 256;
  // Probe attachment points; 0 is the embedding output, l >= 1 the output of
  // block l.
  std::vector<int> probed_layers = {0, 1, 2, 3, 4};
  Pooling pooling = Pooling::final_token;

  void validate() const {
    if (vocab_size < 1 || d_model < 1 || n_layers < 1 || n_heads < 1 ||
        d_ff < 1 || max_seq_len < 1) {
      throw ConfigError("ModelConfig: all sizes must be positive");
    }
    if (d_model % n_heads != 0) {
      throw ConfigError("ModelConfig: d_model must be divisible by n_heads");
    }
    if (probed_layers.empty()) {
      throw ConfigError("ModelConfig: probed_layers must be nonempty");
    }
    for (std::size_t i = 0; i < probed_layers.size(); ++i) {
      if (probed_layers[i] < 0 || probed_layers[i] > n_layers) {
        throw ConfigError("ModelConfig: probed layer out of range");
      }
      if (i > 0 && probed_layers[i] <= probed_layers[i - 1]) {
        throw ConfigError("ModelConfig: probed_layers must be ascending");
      }
    }
  }
};

struct LayerParams {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, wk, wv, wo;
  Tensor ln2_gain, ln2_bias;
  Tensor w1, b1, w2, b2;
};

struct ModelParams {
  ModelConfig config;
  Tensor tok_emb;  // {vocab, d_model}
  std::vector<LayerParams> layers;
  Tensor lnf_gain, lnf_bias;
  Tensor w_out;  // {d_model, vocab}
  Tensor b_out;  // {1, vocab}
};

// Fixed enumeration order; checkpointing and the optimizer both rely on it.
template <class Fn>
void visit_params(ModelParams& p, Fn&& fn) {
  fn("tok_emb", p.tok_emb);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const std::string pre = "layers." + std::to_string(l) + ".";
    auto& lp = p.layers[l];
    fn(pre + "ln1_gain", lp.ln1_gain);
    fn(pre + "ln1_bias", lp.ln1_bias);
    fn(pre + "wq", lp.wq);
    fn(pre + "wk", lp.wk);
    fn(pre + "wv", lp.wv);
    fn(pre + "wo", lp.wo);
    fn(pre + "ln2_gain", lp.ln2_gain);
    fn(pre + "ln2_bias", lp.ln2_bias);
    fn(pre + "w1", lp.w1);
    fn(pre + "b1", lp.b1);
    fn(pre + "w2", lp.w2);
    fn(pre + "b2", lp.b2);
  }
  fn("lnf_gain", p.lnf_gain);
  fn("lnf_bias", p.lnf_bias);
  fn("w_out", p.w_out);
  fn("b_out", p.b_out);
}

template <class Fn>
void visit_params(const ModelParams& p, Fn&& fn) {
  visit_params(const_cast<ModelParams&>(p),
               [&fn](const std::string& name, Tensor& t) {
                 fn(name, static_cast<const Tensor&>(t));
               });
}

inline ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  auto randn = [&rng](std::vector<int> shape, double scale) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (double& v : t.data) v = rng.normal(0.0, scale);
    return t;
  };
  const double s = 0.02;
  ModelParams p;
  p.config = cfg;
  p.tok_emb = randn({cfg.vocab_size, cfg.d_model}, s);
  for (int l = 0; l < cfg.n_layers; ++l) {
    LayerParams lp;
    lp.ln1_gain = Tensor::full({1, cfg.d_model}, 1.0);
    lp.ln1_bias = Tensor::zeros({1, cfg.d_model});
    lp.wq = randn({cfg.d_model, cfg.d_model}, s);
    lp.wk = randn({cfg.d_model, cfg.d_model}, s);
    lp.wv = randn({cfg.d_model, cfg.d_model}, s);
    lp.wo = randn({cfg.d_model, cfg.d_model}, s);
    lp.ln2_gain = Tensor::full({1, cfg.d_model}, 1.0);
    lp.ln2_bias = Tensor::zeros({1, cfg.d_model});
    lp.w1 = randn({cfg.d_model, cfg.d_ff}, s);
    lp.b1 = Tensor::zeros({1, cfg.d_ff});
    lp.w2 = randn({cfg.d_ff, cfg.d_model}, s);
    lp.b2 = Tensor::zeros({1, cfg.d_model});
    p.layers.push_back(std::move(lp));
  }
  p.lnf_gain = Tensor::full({1, cfg.d_model}, 1.0);
  p.lnf_bias = Tensor::zeros({1, cfg.d_model});
  p.w_out = randn({cfg.d_model, cfg.vocab_size}, s);
  p.b_out = Tensor::zeros({1, cfg.vocab_size});
  return p;
}

inline void validate_tokens(const ModelConfig& cfg, const TokenSeq& tokens) {
  if (tokens.empty()) throw InputError("forward: empty token sequence");
  if (static_cast<int>(tokens.size()) > cfg.max_seq_len) {
    throw InputError("forward: sequence length " +
                     std::to_string(tokens.size()) + " exceeds max_seq_len " +
                     std::to_string(cfg.max_seq_len));
  }
  for (int id : tokens) {
    if (id < 0 || id >= cfg.vocab_size) {
      throw InputError("forward: token id " + std::to_string(id) +
                       " outside vocabulary");
    }
  }
}

// ------------------------------------------------------------- graph build
struct ModelGraph {
  Tape::Var logits = -1;               // {T, vocab}; -1 when skipped
  std::vector<Tape::Var> hidden;       // {T, d} at points 0..n_layers
  std::vector<Tape::Var> pooled;       // {1, d} per probed layer
  Tape::Var onehot = -1;               // {T, vocab} leaf in one-hot mode
  std::vector<Tape::Var> param_vars;   // visit order; empty unless trainable
};

namespace detail {

struct ParamVarSet {
  std::vector<Tape::Var> order;
  std::size_t cursor = 0;
  Tape::Var next() { return order[cursor++]; }
};

inline ParamVarSet push_params(Tape& tape, const ModelParams& p,
                               bool trainable) {
  ParamVarSet set;
  visit_params(p, [&](const std::string&, const Tensor& t) {
    set.order.push_back(trainable ? tape.leaf(t) : tape.constant(t));
  });
  return set;
}

// Causal mask fused with a per-head linear distance penalty on the attention
// logits; these biases are the model's only source of position information.
inline Tensor causal_alibi_mask(int T, double slope) {
  Tensor m = Tensor::zeros({T, T});
  for (int i = 0; i < T; ++i) {
    for (int j = 0; j < T; ++j) {
      m.at(i, j) = j > i ? -1e9 : -slope * double(i - j);
    }
  }
  return m;
}

inline double alibi_slope(int head, int n_heads) {
  return std::pow(2.0, -8.0 * double(head + 1) / double(n_heads));
}

// Blocks, pooling, and the optional logits head on top of the embedding
// output x0. Parameter vars are consumed from `pv` in visit order.
inline ModelGraph finish_graph(Tape& tape, const ModelConfig& cfg,
                               ParamVarSet& pv, Tape::Var x0, int T,
                               bool need_logits) {
  ModelGraph g;
  g.param_vars = pv.order;

  const int H = cfg.n_heads;
  const int dh = cfg.d_model / H;
  const double inv_sqrt_dh = 1.0 / std::sqrt(double(dh));
  std::vector<Tape::Var> mask;
  for (int h = 0; h < H; ++h) {
    mask.push_back(tape.constant(causal_alibi_mask(T, alibi_slope(h, H))));
  }

  g.hidden.push_back(x0);
  Tape::Var x = x0;
  for (int l = 0; l < cfg.n_layers; ++l) {
    const Tape::Var ln1_g = pv.next(), ln1_b = pv.next();
    const Tape::Var wq = pv.next(), wk = pv.next(), wv = pv.next(),
                    wo = pv.next();
    const Tape::Var ln2_g = pv.next(), ln2_b = pv.next();
    const Tape::Var w1 = pv.next(), b1 = pv.next(), w2 = pv.next(),
                    b2 = pv.next();

    const Tape::Var a = tape.layer_norm(x, ln1_g, ln1_b);
    const Tape::Var q = tape.matmul(a, wq);
    const Tape::Var k = tape.matmul(a, wk);
    const Tape::Var v = tape.matmul(a, wv);
    std::vector<Tape::Var> heads;
    for (int h = 0; h < H; ++h) {
      const Tape::Var qh = tape.slice_cols(q, h * dh, (h + 1) * dh);
      const Tape::Var kh = tape.slice_cols(k, h * dh, (h + 1) * dh);
      const Tape::Var vh = tape.slice_cols(v, h * dh, (h + 1) * dh);
      Tape::Var scores =
          tape.scale(tape.matmul(qh, tape.transpose(kh)), inv_sqrt_dh);
      scores = tape.add(scores, mask[static_cast<std::size_t>(h)]);
      heads.push_back(tape.matmul(tape.softmax_rows(scores), vh));
    }
    x = tape.add(x, tape.matmul(tape.concat_cols(heads), wo));

    const Tape::Var m = tape.layer_norm(x, ln2_g, ln2_b);
    const Tape::Var m1 = tape.relu(tape.add_rowvec(tape.matmul(m, w1), b1));
    x = tape.add(x, tape.add_rowvec(tape.matmul(m1, w2), b2));
    g.hidden.push_back(x);
  }

  for (int layer : cfg.probed_layers) {
    const Tape::Var hl = g.hidden[static_cast<std::size_t>(layer)];
    g.pooled.push_back(cfg.pooling == Pooling::final_token
                           ? tape.slice_row(hl, T - 1)
                           : tape.mean_rows(hl));
  }

  if (need_logits) {
    const Tape::Var lnf_g = pv.next(), lnf_b = pv.next();
    const Tape::Var w_out = pv.next(), b_out = pv.next();
    const Tape::Var xf = tape.layer_norm(x, lnf_g, lnf_b);
    g.logits = tape.add_rowvec(tape.matmul(xf, w_out), b_out);
  }
  return g;
}

}  // namespace detail

// Token-id entry point. trainable_params=true pushes parameters as gradient
// leaves (for training); false pushes constants (cheaper reverse sweeps).
inline ModelGraph build_graph(Tape& tape, const ModelParams& p,
                              const TokenSeq& tokens, bool need_logits,
                              bool trainable_params = false) {
  validate_tokens(p.config, tokens);
  const int T = static_cast<int>(tokens.size());
  auto pv = detail::push_params(tape, p, trainable_params);
  const Tape::Var x0 = tape.embed(tokens, pv.next());
  return detail::finish_graph(tape, p.config, pv, x0, T, need_logits);
}

// Relaxed entry point: rows of `mix` are arbitrary mixtures over token
// embeddings (one-hot rows reproduce build_graph exactly), so d(loss)/dmix
// carries per-coordinate substitution gradients.
inline ModelGraph build_graph_mix(Tape& tape, const ModelParams& p,
                                  const Tensor& mix, bool need_logits) {
  if (mix.rank() != 2 || mix.cols() != p.config.vocab_size) {
    throw DimensionError("build_graph_mix: expected {T, vocab_size} input");
  }
  const int T = mix.rows();
  if (T < 1 || T > p.config.max_seq_len) {
    throw InputError("build_graph_mix: sequence length out of range");
  }
  auto pv = detail::push_params(tape, p, false);
  ModelGraph g;
  const Tape::Var onehot = tape.leaf(mix);
  const Tape::Var x0 = tape.matmul(onehot, pv.next());
  g = detail::finish_graph(tape, p.config, pv, x0, T, need_logits);
  g.onehot = onehot;
  return g;
}

inline ModelGraph build_graph_onehot(Tape& tape, const ModelParams& p,
                                     const TokenSeq& tokens,
                                     bool need_logits) {
  validate_tokens(p.config, tokens);
  return build_graph_mix(tape, p, make_one_hot(tokens, p.config.vocab_size),
                         need_logits);
}

// ------------------------------------------------------------- evaluation
struct LayerActivations {
  std::vector<int> layers;
  std::vector<Tensor> pooled;  // rank-1 {d_model} each
};

struct ForwardResult {
  Tensor logits;  // {T, vocab}
  LayerActivations activations;
};

namespace detail {

inline Tensor row_to_vector(const Tensor& row) {
  Tensor out = Tensor::zeros({row.cols()});
  out.data = row.data;
  return out;
}

}  // namespace detail

inline ForwardResult forward(const ModelParams& p, const TokenSeq& tokens) {
  Tape tape(false);
  const ModelGraph g = build_graph(tape, p, tokens, true);
  ForwardResult out;
  out.logits = tape.value(g.logits);
  out.activations.layers = p.config.probed_layers;
  for (Tape::Var v : g.pooled) {
    out.activations.pooled.push_back(detail::row_to_vector(tape.value(v)));
  }
  return out;
}

// Pooled per-probed-layer activations only; skips the logits head.
inline std::vector<Tensor> pooled_activations(const ModelParams& p,
                                              const TokenSeq& tokens) {
  Tape tape(false);
  const ModelGraph g = build_graph(tape, p, tokens, false);
  std::vector<Tensor> out;
  for (Tape::Var v : g.pooled) {
    out.push_back(detail::row_to_vector(tape.value(v)));
  }
  return out;
}

// d(l) = h(l)(full) - h(l)(primary_only), one entry per probed layer.
inline std::vector<Tensor> activation_delta(const ModelParams& p,
                                            const TokenSeq& primary_only,
                                            const TokenSeq& full) {
  const std::vector<Tensor> base = pooled_activations(p, primary_only);
  std::vector<Tensor> out = pooled_activations(p, full);
  for (std::size_t i = 0; i < out.size(); ++i) {
    for (std::size_t k = 0; k < out[i].data.size(); ++k) {
      out[i].data[k] -= base[i].data[k];
    }
  }
  return out;
}

// --------------------------------------------------- probe-injected grads
namespace detail {

inline void check_probe_coverage(const ModelConfig& cfg,
                                 const ProbeSet& probes,
                                 const std::vector<double>& lambdas) {
  if (probes.layers() != cfg.probed_layers) {
    throw ConfigError(
        "token gradients: probe layers do not match probed_layers");
  }
  if (lambdas.size() != cfg.probed_layers.size()) {
    throw ConfigError("token gradients: lambda count mismatch");
  }
}

inline Tensor suffix_rows(const Tensor& grad, int slot, int len) {
  Tensor out = Tensor::zeros({len, grad.cols()});
  std::copy_n(&grad.data[(std::size_t)slot * grad.cols()],
              (std::size_t)len * grad.cols(), out.data.data());
  return out;
}

}  // namespace detail

// Joint probe loss gradient w.r.t. the suffix one-hot rows. The baseline
// (primary-only) activations are constant in the suffix, so per-layer
// bce-loss gradients are evaluated in closed form on the delta values and
// injected as reverse-sweep seeds at each probed layer's pooled node; the
// sweep itself supplies the through-model composition term.
inline Tensor token_gradients_with_probe_injection(
    const ModelParams& params, const ProbeSet& probes, const TokenSeq& base,
    const std::vector<Tensor>& baseline_acts, const TokenSeq& suffix,
    const std::vector<double>& lambdas, double y_t) {
  detail::check_probe_coverage(params.config, probes, lambdas);
  if (suffix.empty()) {
    throw InputError("token gradients: empty suffix");
  }
  TokenSeq full = base;
  full.insert(full.end(), suffix.begin(), suffix.end());

  Tape tape(true);
  const ModelGraph g = build_graph_onehot(tape, params, full, false);

  std::vector<std::pair<Tape::Var, Tensor>> seeds;
  for (std::size_t li = 0; li < g.pooled.size(); ++li) {
    const int layer = params.config.probed_layers[li];
    const LinearProbe& probe = probes.at_layer(layer);
    Tensor delta = detail::row_to_vector(tape.value(g.pooled[li]));
    for (std::size_t k = 0; k < delta.data.size(); ++k) {
      delta.data[k] -= baseline_acts[li].data[k];
    }
    Tensor seed = probe_loss_gradient(probe, delta, y_t);  // (p - y_t) W
    for (double& v : seed.data) v *= lambdas[li];
    seed.shape = {1, static_cast<int>(seed.data.size())};
    seeds.emplace_back(g.pooled[li], std::move(seed));
  }
  tape.backward_from(seeds);

  const int slot = static_cast<int>(base.size());
  return detail::suffix_rows(tape.grad(g.onehot), slot,
                             static_cast<int>(suffix.size()));
}

inline Tensor token_gradients_with_probe_injection(
    const ModelParams& params, const ProbeSet& probes,
    const RenderedPrompt& prompt, const TokenSeq& suffix,
    const std::vector<double>& lambdas, double y_t) {
  return token_gradients_with_probe_injection(
      params, probes, prompt.tokens,
      pooled_activations(params, prompt.primary_only), suffix, lambdas, y_t);
}

// Weighted per-probe bce losses on tape-built deltas, summed into one
// scalar. Shared by the composite gradient route and the relaxed-input
// finite-difference oracles.
inline Tape::Var composite_probe_loss(Tape& tape, const ModelGraph& g,
                                      const ModelConfig& cfg,
                                      const ProbeSet& probes,
                                      const std::vector<Tensor>& baseline_acts,
                                      const std::vector<double>& lambdas,
                                      double y_t) {
  Tape::Var loss = -1;
  for (std::size_t li = 0; li < g.pooled.size(); ++li) {
    const LinearProbe& probe = probes.at_layer(cfg.probed_layers[li]);
    Tensor base_row = baseline_acts[li];
    base_row.shape = {1, static_cast<int>(base_row.data.size())};
    Tensor w_row = probe.W;
    w_row.shape = {1, static_cast<int>(w_row.data.size())};

    const Tape::Var delta =
        tape.sub(g.pooled[li], tape.constant(std::move(base_row)));
    const Tape::Var z = tape.add_scalar(
        tape.dot(delta, tape.constant(std::move(w_row))), probe.b);
    const Tape::Var term =
        tape.scale(tape.bce_loss(tape.sigmoid(z), y_t), lambdas[li]);
    loss = loss < 0 ? term : tape.add(loss, term);
  }
  return loss;
}

// Same quantity via one composite tape expression and a plain backward pass.
// Kept as the independent cross-check of the seeded-injection route.
inline Tensor token_gradients_composite(const ModelParams& params,
                                        const ProbeSet& probes,
                                        const TokenSeq& base,
                                        const std::vector<Tensor>& baseline_acts,
                                        const TokenSeq& suffix,
                                        const std::vector<double>& lambdas,
                                        double y_t) {
  detail::check_probe_coverage(params.config, probes, lambdas);
  if (suffix.empty()) {
    throw InputError("token gradients: empty suffix");
  }
  TokenSeq full = base;
  full.insert(full.end(), suffix.begin(), suffix.end());

  Tape tape(true);
  const ModelGraph g = build_graph_onehot(tape, params, full, false);
  tape.backward(composite_probe_loss(tape, g, params.config, probes,
                                     baseline_acts, lambdas, y_t));

  const int slot = static_cast<int>(base.size());
  return detail::suffix_rows(tape.grad(g.onehot), slot,
                             static_cast<int>(suffix.size()));
}

// Joint loss value only (no tape recording).
inline double probe_loss_value(const ModelParams& params,
                               const ProbeSet& probes, const TokenSeq& base,
                               const std::vector<Tensor>& baseline_acts,
                               const TokenSeq& suffix,
                               const std::vector<double>& lambdas,
                               double y_t) {
  detail::check_probe_coverage(params.config, probes, lambdas);
  TokenSeq full = base;
  full.insert(full.end(), suffix.begin(), suffix.end());
  Tape tape(false);
  const ModelGraph g = build_graph(tape, params, full, false);
  double total = 0.0;
  for (std::size_t li = 0; li < g.pooled.size(); ++li) {
    const int layer = params.config.probed_layers[li];
    const LinearProbe& probe = probes.at_layer(layer);
    Tensor delta = detail::row_to_vector(tape.value(g.pooled[li]));
    for (std::size_t k = 0; k < delta.data.size(); ++k) {
      delta.data[k] -= baseline_acts[li].data[k];
    }
    total += lambdas[li] * Tape::bce_scalar(predict(probe, delta), y_t);
  }
  return total;
}

// ----------------------------------------------------------------- training
struct LmTrainConfig {
  int epochs = 3;
  double lr = 1e-3;
  int batch_size = 16;
  double clip_norm = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
};

struct LmTrainReport {
  std::vector<double> epoch_loss;
};

// Next-token cross-entropy with minibatch Adam. Deterministic: seeded
// shuffles, fixed accumulation order, single duplicate-free parameter walk.
inline void train_lm(ModelParams& params, const std::vector<TokenSeq>& seqs,
                     const LmTrainConfig& cfg, std::uint64_t seed,
                     LmTrainReport* report = nullptr) {
  if (seqs.empty()) throw InputError("train_lm: empty corpus");
  for (const auto& s : seqs) {
    validate_tokens(params.config, s);
    if (s.size() < 2) {
      throw InputError("train_lm: sequences need at least two tokens");
    }
  }
  if (report) *report = LmTrainReport{};
  if (cfg.epochs <= 0) return;

  std::vector<Tensor*> slots;
  visit_params(params, [&](const std::string&, Tensor& t) {
    slots.push_back(&t);
  });
  std::vector<Tensor> m_state, v_state, grad_acc;
  for (Tensor* t : slots) {
    m_state.push_back(Tensor::zeros(t->shape));
    v_state.push_back(Tensor::zeros(t->shape));
    grad_acc.push_back(Tensor::zeros(t->shape));
  }

  Rng root(seed);
  std::vector<std::size_t> order(seqs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng erng = root.fork(static_cast<std::uint64_t>(epoch));
    erng.shuffle(order);
    double epoch_loss = 0.0;

    for (std::size_t b0 = 0; b0 < order.size(); b0 += (std::size_t)cfg.batch_size) {
      const std::size_t b1 =
          std::min(order.size(), b0 + (std::size_t)cfg.batch_size);
      for (Tensor& g : grad_acc) {
        std::fill(g.data.begin(), g.data.end(), 0.0);
      }

      for (std::size_t bi = b0; bi < b1; ++bi) {
        const TokenSeq& seq = seqs[order[bi]];
        Tape tape(true);
        const ModelGraph g = build_graph(tape, params, seq, true, true);
        const int T = static_cast<int>(seq.size());
        const TokenSeq targets(seq.begin() + 1, seq.end());
        const Tape::Var loss = tape.cross_entropy_mean(
            tape.slice_rows(g.logits, 0, T - 1), targets);
        epoch_loss += tape.value(loss).item();
        tape.backward(loss);
        for (std::size_t pi = 0; pi < slots.size(); ++pi) {
          const Tensor& pg = tape.grad(g.param_vars[pi]);
          for (std::size_t k = 0; k < pg.data.size(); ++k) {
            grad_acc[pi].data[k] += pg.data[k];
          }
        }
      }

      const double inv_batch = 1.0 / double(b1 - b0);
      double sq_norm = 0.0;
      for (Tensor& g : grad_acc) {
        for (double& v : g.data) {
          v *= inv_batch;
          sq_norm += v * v;
        }
      }
      const double norm = std::sqrt(sq_norm);
      const double rescale =
          norm > cfg.clip_norm ? cfg.clip_norm / norm : 1.0;

      ++step;
      const double bc1 = 1.0 - std::pow(cfg.beta1, double(step));
      const double bc2 = 1.0 - std::pow(cfg.beta2, double(step));
      for (std::size_t pi = 0; pi < slots.size(); ++pi) {
        Tensor& p = *slots[pi];
        for (std::size_t k = 0; k < p.data.size(); ++k) {
          const double gk = grad_acc[pi].data[k] * rescale;
          double& mk = m_state[pi].data[k];
          double& vk = v_state[pi].data[k];
          mk = cfg.beta1 * mk + (1.0 - cfg.beta1) * gk;
          vk = cfg.beta2 * vk + (1.0 - cfg.beta2) * gk * gk;
          p.data[k] -=
              cfg.lr * (mk / bc1) / (std::sqrt(vk / bc2) + cfg.adam_eps);
        }
      }
    }

    if (report) {
      report->epoch_loss.push_back(epoch_loss / double(order.size()));
    }
  }

  visit_params(params, [](const std::string& name, Tensor& t) {
    if (!all_finite(t)) {
      throw NumericalError("train_lm: parameter " + name + " diverged");
    }
  });
}

inline double mean_next_token_loss(const ModelParams& params,
                                   const std::vector<TokenSeq>& seqs) {
  if (seqs.empty()) throw InputError("mean_next_token_loss: empty corpus");
  double total = 0.0;
  for (const auto& seq : seqs) {
    Tape tape(false);
    const ModelGraph g = build_graph(tape, params, seq, true);
    const int T = static_cast<int>(seq.size());
    const TokenSeq targets(seq.begin() + 1, seq.end());
    total += tape
                 .value(tape.cross_entropy_mean(
                     tape.slice_rows(g.logits, 0, T - 1), targets))
                 .item();
  }
  return total / double(seqs.size());
}

// ---------------------------------------------------------------- sampling
enum class DecodeMode { greedy, sample };

inline TokenSeq generate(const ModelParams& params, const TokenSeq& prompt,
                         int max_new, std::uint64_t seed,
                         DecodeMode mode = DecodeMode::greedy) {
  validate_tokens(params.config, prompt);
  TokenSeq out = prompt;
  Rng rng(seed);
  for (int i = 0; i < max_new; ++i) {
    if (static_cast<int>(out.size()) >= params.config.max_seq_len) break;
    Tape tape(false);
    const ModelGraph g = build_graph(tape, params, out, true);
    const Tensor& logits = tape.value(g.logits);
    const int T = logits.rows();
    const int V = logits.cols();
    const double* row = &logits.data[(std::size_t)(T - 1) * V];

    int pick = 0;
    if (mode == DecodeMode::greedy) {
      for (int j = 1; j < V; ++j) {
        if (row[j] > row[pick]) pick = j;  // ties keep the lowest id
      }
    } else {
      double mx = row[0];
      for (int j = 1; j < V; ++j) mx = std::max(mx, row[j]);
      double z = 0.0;
      for (int j = 0; j < V; ++j) z += std::exp(row[j] - mx);
      double u = rng.uniform01() * z;
      for (int j = 0; j < V; ++j) {
        u -= std::exp(row[j] - mx);
        if (u <= 0.0) {
          pick = j;
          break;
        }
        pick = j;
      }
    }
    out.push_back(pick);
  }
  return out;
}

}  // namespace drift
