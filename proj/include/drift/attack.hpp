#pragma once

// Universal evasive suffix optimizer. Greedy coordinate descent over
// suffix-eligible tokens against the joint per-layer probe loss, with a
// progressive active prompt set: start from one prompt, expand once the
// current set is confidently evaded, converge when the whole set is.

#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "drift/corpus.hpp"
#include "drift/errors.hpp"
#include "drift/model.hpp"
#include "drift/probes.hpp"
#include "drift/rng.hpp"
#include "drift/threading.hpp"

namespace drift {

struct AttackConfig {
  int max_iterations = 500;   // K
  double tau = 1.0;           // convergence: success rate over the full set
  double tau_exp = 0.8;       // expansion: success rate over the active set
  double confidence = 0.7;    // per-prompt "confidently benign" margin
  int suffix_len = 16;
  int top_k = 32;
  int batch = 64;             // sampled candidates per iteration
  std::vector<double> lambdas;  // empty means all ones
  double y_target = 0.0;
  std::uint64_t seed = 0;
  bool exhaustive = false;    // enumerate every (position, top-k token) pair
  TokenSeq s_init;            // empty means suffix_len copies of the lowest
                              // suffix-eligible token

  void validate() const {
    if (!(tau_exp > 0.0 && tau_exp <= tau && tau <= 1.0)) {
      throw ConfigError("AttackConfig: need 0 < tau_exp <= tau <= 1");
    }
    if (!(confidence >= 0.5 && confidence < 1.0)) {
      throw ConfigError("AttackConfig: need 0.5 <= confidence < 1");
    }
    if (suffix_len < 1) throw ConfigError("AttackConfig: suffix_len >= 1");
    if (top_k < 1) throw ConfigError("AttackConfig: top_k >= 1");
    if (batch < 1) throw ConfigError("AttackConfig: batch >= 1");
    if (max_iterations < 0) throw ConfigError("AttackConfig: K >= 0");
  }

  std::vector<double> resolved_lambdas(std::size_t n_layers) const {
    if (lambdas.empty()) return std::vector<double>(n_layers, 1.0);
    if (lambdas.size() != n_layers) {
      throw ConfigError("AttackConfig: lambda count does not match probes");
    }
    return lambdas;
  }
};

struct SuffixState {
  TokenSeq tokens;
  int iteration_born = 0;
  double last_joint_loss = std::numeric_limits<double>::quiet_NaN();
};

struct AttackTrace {
  struct Row {
    int iteration = 0;
    int active_size = 0;
    double best_loss = 0.0;     // active-set joint loss of the chosen suffix
    double success_rate = 0.0;
    int sub_position = -1;      // -1 when the suffix was kept unchanged
    int sub_token = -1;
  };
  std::vector<Row> rows;
};

struct AttackResult {
  SuffixState suffix;
  AttackTrace trace;
  bool converged = false;
  int iterations_run = 0;
};

// Per-prompt precomputed state: rendering plus the primary-only pooled
// activations, which stay constant while the suffix changes.
struct AttackPrompt {
  RenderedPrompt rendered;
  std::vector<Tensor> baseline;
};

inline AttackPrompt prepare_prompt(const ModelParams& params,
                                   const RenderedPrompt& rendered) {
  AttackPrompt out;
  out.rendered = rendered;
  out.baseline = pooled_activations(params, rendered.primary_only);
  return out;
}

// ------------------------------------------------------------------ losses
inline double joint_loss(const ModelParams& params, const ProbeSet& probes,
                         const AttackPrompt& x, const TokenSeq& suffix,
                         const std::vector<double>& lambdas, double y_t) {
  return probe_loss_value(params, probes, x.rendered.tokens, x.baseline,
                          suffix, lambdas, y_t);
}

inline std::vector<double> probe_probabilities(const ModelParams& params,
                                               const ProbeSet& probes,
                                               const AttackPrompt& x,
                                               const TokenSeq* suffix) {
  TokenSeq tokens = x.rendered.tokens;
  if (suffix) tokens.insert(tokens.end(), suffix->begin(), suffix->end());
  const std::vector<Tensor> acts = pooled_activations(params, tokens);
  std::vector<double> out;
  for (std::size_t li = 0; li < acts.size(); ++li) {
    Tensor delta = acts[li];
    for (std::size_t k = 0; k < delta.data.size(); ++k) {
      delta.data[k] -= x.baseline[li].data[k];
    }
    out.push_back(
        predict(probes.at_layer(params.config.probed_layers[li]), delta));
  }
  return out;
}

// Fraction of prompts on which every probe is confidently benign:
// p(l) <= 1 - c for all l.
inline double success_rate(const ModelParams& params, const ProbeSet& probes,
                           const std::vector<AttackPrompt>& active,
                           const TokenSeq& suffix, double confidence) {
  if (active.empty()) throw InputError("success_rate: empty prompt set");
  int evaded = 0;
  for (const AttackPrompt& x : active) {
    bool all_benign = true;
    for (double p : probe_probabilities(params, probes, x, &suffix)) {
      all_benign &= p <= 1.0 - confidence;
    }
    evaded += all_benign;
  }
  return double(evaded) / double(active.size());
}

// -------------------------------------------------------------- candidates
// B single-substitution candidates; position uniform, token uniform over
// that position's top_k loss-decreasing eligible tokens (current token
// excluded). The unchanged suffix is always appended last. Exhaustive mode
// enumerates every (position, top-k token) pair instead of sampling.
inline std::vector<TokenSeq> sample_candidates(const TokenSeq& s,
                                               const Tensor& G, int top_k,
                                               int B, int eligible_lo,
                                               int eligible_hi, Rng& rng,
                                               bool exhaustive = false) {
  const int len = static_cast<int>(s.size());
  if (G.rank() != 2 || G.rows() != len) {
    throw DimensionError("sample_candidates: gradient shape mismatch");
  }
  if (eligible_hi - eligible_lo < 2) {
    throw ConfigError("sample_candidates: no eligible substitution token");
  }
  if (eligible_hi > G.cols()) {
    throw ConfigError("sample_candidates: eligible range outside vocabulary");
  }

  // Per-position top-k candidate tokens, most negative gradient first.
  std::vector<std::vector<int>> shortlist(static_cast<std::size_t>(len));
  for (int i = 0; i < len; ++i) {
    std::vector<int> ids;
    ids.reserve(static_cast<std::size_t>(eligible_hi - eligible_lo));
    for (int v = eligible_lo; v < eligible_hi; ++v) {
      if (v != s[static_cast<std::size_t>(i)]) ids.push_back(v);
    }
    std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) {
      return G.at(i, a) < G.at(i, b);
    });
    if (static_cast<int>(ids.size()) > top_k) {
      ids.resize(static_cast<std::size_t>(top_k));
    }
    shortlist[static_cast<std::size_t>(i)] = std::move(ids);
  }

  std::vector<TokenSeq> out;
  if (exhaustive) {
    for (int i = 0; i < len; ++i) {
      for (int v : shortlist[static_cast<std::size_t>(i)]) {
        TokenSeq cand = s;
        cand[static_cast<std::size_t>(i)] = v;
        out.push_back(std::move(cand));
      }
    }
  } else {
    for (int b = 0; b < B; ++b) {
      const int i = static_cast<int>(rng.uniform_index(std::uint64_t(len)));
      const auto& picks = shortlist[static_cast<std::size_t>(i)];
      const int v = picks[rng.uniform_index(picks.size())];
      TokenSeq cand = s;
      cand[static_cast<std::size_t>(i)] = v;
      out.push_back(std::move(cand));
    }
  }
  out.push_back(s);  // monotonic safety
  return out;
}

// ------------------------------------------------------------- evade check
enum class EvadeCriterion { all_probes, deep_only, majority };

inline EvadeCriterion criterion_from_string(const std::string& s) {
  if (s == "all") return EvadeCriterion::all_probes;
  if (s == "deep_only") return EvadeCriterion::deep_only;
  if (s == "majority") return EvadeCriterion::majority;
  throw ConfigError("unknown evasion criterion '" + s + "'");
}

inline const char* criterion_name(EvadeCriterion c) {
  switch (c) {
    case EvadeCriterion::all_probes: return "all";
    case EvadeCriterion::deep_only: return "deep_only";
    default: return "majority";
  }
}

// Applies a criterion to per-layer 0/1 predictions (ordered shallow to
// deep). True means the prompt passes as benign.
inline bool evades(const std::vector<int>& predictions, EvadeCriterion crit) {
  if (predictions.empty()) throw InputError("evades: no predictions");
  const int n = static_cast<int>(predictions.size());
  switch (crit) {
    case EvadeCriterion::all_probes: {
      for (int p : predictions) {
        if (p != 0) return false;
      }
      return true;
    }
    case EvadeCriterion::deep_only: {
      for (int i = 1; i < n; ++i) {
        if (predictions[static_cast<std::size_t>(i)] != 0) return false;
      }
      return true;
    }
    default: {
      int benign = 0;
      for (int p : predictions) benign += p == 0;
      return benign >= n / 2 + 1;
    }
  }
}

// The detector-side mirror of `evades`: true when the per-layer predictions
// flag the prompt under the criterion. all: every probe fires; deep_only:
// every probe past the shallowest fires; majority: more than half fire.
// Mixed prediction vectors can satisfy neither `evades` nor `detects`.
inline bool detects(const std::vector<int>& predictions, EvadeCriterion crit) {
  if (predictions.empty()) throw InputError("detects: no predictions");
  const int n = static_cast<int>(predictions.size());
  switch (crit) {
    case EvadeCriterion::all_probes: {
      for (int p : predictions) {
        if (p != 1) return false;
      }
      return true;
    }
    case EvadeCriterion::deep_only: {
      for (int i = 1; i < n; ++i) {
        if (predictions[static_cast<std::size_t>(i)] != 1) return false;
      }
      return true;
    }
    default: {
      int fired = 0;
      for (int p : predictions) fired += p == 1;
      return fired >= n / 2 + 1;
    }
  }
}

inline std::vector<int> probe_predictions(const ModelParams& params,
                                          const ProbeSet& probes,
                                          const AttackPrompt& x,
                                          const TokenSeq* suffix) {
  std::vector<int> preds;
  for (double p : probe_probabilities(params, probes, x, suffix)) {
    preds.push_back(p >= probes.threshold ? 1 : 0);
  }
  return preds;
}

inline bool evade_check(const ModelParams& params, const ProbeSet& probes,
                        const AttackPrompt& x, const TokenSeq* suffix,
                        EvadeCriterion crit) {
  return evades(probe_predictions(params, probes, x, suffix), crit);
}

inline bool evade_check(const ModelParams& params, const ProbeSet& probes,
                        const RenderedPrompt& prompt, const TokenSeq* suffix,
                        EvadeCriterion crit) {
  return evade_check(params, probes, prepare_prompt(params, prompt), suffix,
                     crit);
}

// ---------------------------------------------------------------- optimizer
inline AttackResult optimize_universal_suffix(
    const ModelParams& params, const ProbeSet& probes,
    const std::vector<PromptRecord>& prompts, const Vocabulary& vocab,
    const AttackConfig& cfg) {
  cfg.validate();
  if (prompts.empty()) {
    throw InputError("optimize_universal_suffix: empty prompt list");
  }
  for (const auto& rec : prompts) {
    if (rec.label != 1) {
      throw InputError(
          "optimize_universal_suffix: prompt list contains clean records");
    }
  }
  const int eligible_lo = vocab.suffix_lo();
  const int eligible_hi = vocab.suffix_hi();
  if (cfg.top_k > params.config.vocab_size) {
    throw ConfigError("AttackConfig: top_k exceeds vocabulary size");
  }

  std::vector<AttackPrompt> all;
  all.reserve(prompts.size());
  for (const auto& rec : prompts) {
    all.push_back(prepare_prompt(params, render(rec, vocab)));
  }
  const std::size_t N = all.size();
  const std::vector<double> lambdas =
      cfg.resolved_lambdas(params.config.probed_layers.size());

  AttackResult result;
  SuffixState s;
  if (cfg.s_init.empty()) {
    s.tokens.assign(static_cast<std::size_t>(cfg.suffix_len), eligible_lo);
  } else {
    if (static_cast<int>(cfg.s_init.size()) != cfg.suffix_len) {
      throw ConfigError("AttackConfig: s_init length differs from suffix_len");
    }
    for (int tok : cfg.s_init) {
      if (!vocab.suffix_eligible(tok)) {
        throw ConfigError("AttackConfig: s_init token outside suffix range");
      }
    }
    s.tokens = cfg.s_init;
  }
  Rng rng(cfg.seed);

  auto loss_over = [&](const std::vector<AttackPrompt>& set,
                       const TokenSeq& suffix) {
    double total = 0.0;
    for (const AttackPrompt& x : set) {
      total += joint_loss(params, probes, x, suffix, lambdas, cfg.y_target);
    }
    return total;
  };

  TokenSeq best_tokens = s.tokens;
  double best_full_loss = loss_over(all, s.tokens);
  int best_born = 0;

  std::size_t active_size = 1;
  for (int iter = 1; iter <= cfg.max_iterations; ++iter) {
    const std::vector<AttackPrompt> active(all.begin(),
                                           all.begin() + (std::ptrdiff_t)active_size);

    // Universal gradient: per-prompt suffix gradients computed in parallel,
    // summed in prompt order so worker count never changes the result.
    Tensor G = Tensor::zeros({cfg.suffix_len, params.config.vocab_size});
    {
      std::vector<Tensor> per_prompt(active.size());
      parallel_for(active.size(), [&](std::size_t i) {
        per_prompt[i] = token_gradients_with_probe_injection(
            params, probes, active[i].rendered.tokens, active[i].baseline,
            s.tokens, lambdas, cfg.y_target);
      });
      for (const Tensor& gx : per_prompt) {
        for (std::size_t k = 0; k < G.data.size(); ++k) {
          G.data[k] += gx.data[k];
        }
      }
    }

    const std::vector<TokenSeq> candidates =
        sample_candidates(s.tokens, G, cfg.top_k, cfg.batch, eligible_lo,
                          eligible_hi, rng, cfg.exhaustive);

    // Ties keep the incumbent: start from the unchanged suffix (last entry)
    // and replace only on strictly lower active-set loss. Each candidate's
    // loss accumulates over prompts in order, so the scan is deterministic.
    std::vector<double> losses(candidates.size());
    parallel_for(candidates.size(), [&](std::size_t ci) {
      losses[ci] = loss_over(active, candidates[ci]);
    });
    double chosen_loss = losses.back();
    std::size_t chosen = candidates.size() - 1;
    for (std::size_t ci = 0; ci + 1 < candidates.size(); ++ci) {
      if (losses[ci] < chosen_loss) {
        chosen_loss = losses[ci];
        chosen = ci;
      }
    }

    AttackTrace::Row row;
    row.iteration = iter;
    row.active_size = static_cast<int>(active_size);
    row.best_loss = chosen_loss;
    if (chosen + 1 < candidates.size()) {
      for (std::size_t i = 0; i < s.tokens.size(); ++i) {
        if (candidates[chosen][i] != s.tokens[i]) {
          row.sub_position = static_cast<int>(i);
          row.sub_token = candidates[chosen][i];
        }
      }
      s.tokens = candidates[chosen];
      s.iteration_born = iter;
    }
    s.last_joint_loss = chosen_loss;

    const double sr =
        success_rate(params, probes, active, s.tokens, cfg.confidence);
    row.success_rate = sr;
    result.trace.rows.push_back(row);
    result.iterations_run = iter;

    const double full_loss =
        active_size == N ? chosen_loss : loss_over(all, s.tokens);
    if (full_loss < best_full_loss) {
      best_full_loss = full_loss;
      best_tokens = s.tokens;
      best_born = s.iteration_born;
    }

    if (sr >= cfg.tau && active_size == N) {
      // The converged suffix is the certified one; prefer it outright.
      best_tokens = s.tokens;
      best_full_loss = full_loss;
      best_born = s.iteration_born;
      result.converged = true;
      break;
    }
    if (sr >= cfg.tau_exp && active_size < N) {
      ++active_size;
    }
  }

  result.suffix.tokens = best_tokens;
  result.suffix.iteration_born = best_born;
  result.suffix.last_joint_loss = best_full_loss;
  return result;
}

// ----------------------------------------------------------------- artifact
inline nlohmann::json attack_config_to_json(const AttackConfig& cfg) {
  return nlohmann::json{{"max_iterations", cfg.max_iterations},
                        {"tau", cfg.tau},
                        {"tau_exp", cfg.tau_exp},
                        {"confidence", cfg.confidence},
                        {"suffix_len", cfg.suffix_len},
                        {"top_k", cfg.top_k},
                        {"batch", cfg.batch},
                        {"lambdas", cfg.lambdas},
                        {"y_target", cfg.y_target},
                        {"seed", cfg.seed},
                        {"exhaustive", cfg.exhaustive},
                        {"s_init", cfg.s_init}};
}

inline nlohmann::json attack_result_to_json(const AttackResult& result,
                                            const AttackConfig& cfg,
                                            const Vocabulary& vocab,
                                            double wall_seconds) {
  nlohmann::json trace = nlohmann::json::array();
  for (const auto& row : result.trace.rows) {
    trace.push_back({{"iteration", row.iteration},
                     {"active_size", row.active_size},
                     {"best_loss", row.best_loss},
                     {"success_rate", row.success_rate},
                     {"sub_position", row.sub_position},
                     {"sub_token", row.sub_token}});
  }
  return nlohmann::json{
      {"config", attack_config_to_json(cfg)},
      {"suffix",
       {{"tokens", result.suffix.tokens},
        {"text", vocab.decode(result.suffix.tokens)},
        {"iteration_born", result.suffix.iteration_born},
        {"joint_loss", result.suffix.last_joint_loss}}},
      {"converged", result.converged},
      {"iterations_run", result.iterations_run},
      {"wall_seconds", wall_seconds},
      {"trace", std::move(trace)}};
}

}  // namespace drift
