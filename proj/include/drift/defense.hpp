#pragma once

// Probe hardening. Two routes: adversarial training on sign-step
// perturbations of poisoned activation deltas, and training-time
// augmentation with adversarial suffixes mined by the optimizer itself.
// evaluate_defense produces the per-layer accuracy and per-suffix
// detection tables used by the reports.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "drift/attack.hpp"
#include "drift/corpus.hpp"
#include "drift/errors.hpp"
#include "drift/hash.hpp"
#include "drift/model.hpp"
#include "drift/probes.hpp"
#include "drift/rng.hpp"

namespace drift {

// --------------------------------------------------------------- PGD probes
struct PgdConfig {
  double epsilon = 0.5;  // L-inf budget around the original delta
  double alpha = 0.1;    // per-step magnitude
  int steps = 20;

  void validate() const {
    if (!(epsilon >= 0.0)) throw ConfigError("PgdConfig: epsilon >= 0");
    if (!(alpha >= 0.0)) throw ConfigError("PgdConfig: alpha >= 0");
    if (epsilon > 0.0 && alpha > epsilon) {
      throw ConfigError("PgdConfig: alpha must not exceed epsilon");
    }
    if (steps < 1) throw ConfigError("PgdConfig: steps >= 1");
  }
};

// Pushes a poisoned delta toward the benign side of one probe: repeated
// sign steps down the gradient of bce(p, 0), every iterate clamped into
// the L-inf epsilon ball around the start point. Components with zero
// gradient stay put.
inline Tensor pgd_perturb(const LinearProbe& probe, const Tensor& delta,
                          const PgdConfig& cfg) {
  cfg.validate();
  if (delta.shape != probe.W.shape) {
    throw DimensionError("pgd_perturb: delta does not match probe weights");
  }
  Tensor d = delta;
  for (int t = 0; t < cfg.steps; ++t) {
    const Tensor g = probe_loss_gradient(probe, d, 0.0);
    for (std::size_t k = 0; k < d.data.size(); ++k) {
      const double gk = g.data[k];
      if (gk == 0.0) continue;
      const double lo = delta.data[k] - cfg.epsilon;
      const double hi = delta.data[k] + cfg.epsilon;
      const double v = d.data[k] - (gk > 0.0 ? cfg.alpha : -cfg.alpha);
      d.data[k] = std::min(std::max(v, lo), hi);
    }
  }
  return d;
}

// Per-layer variant: each layer's delta is perturbed against its own probe.
inline std::vector<Tensor> pgd_perturb(const ProbeSet& probes,
                                       const std::vector<int>& layers,
                                       const std::vector<Tensor>& delta_row,
                                       const PgdConfig& cfg) {
  if (delta_row.size() != layers.size()) {
    throw DimensionError("pgd_perturb: delta row arity mismatch");
  }
  std::vector<Tensor> out;
  out.reserve(delta_row.size());
  for (std::size_t i = 0; i < delta_row.size(); ++i) {
    out.push_back(pgd_perturb(probes.at_layer(layers[i]), delta_row[i], cfg));
  }
  return out;
}

// Budget heuristic: a quarter of the median L-inf norm across every
// (record, layer) poisoned delta. Recomputed per model checkpoint so the
// ball tracks the activation scale.
inline double suggest_pgd_epsilon(
    const std::vector<std::vector<Tensor>>& poisoned) {
  std::vector<double> norms;
  for (const auto& row : poisoned) {
    for (const Tensor& d : row) {
      double m = 0.0;
      for (double v : d.data) m = std::max(m, std::abs(v));
      norms.push_back(m);
    }
  }
  if (norms.empty()) throw InputError("suggest_pgd_epsilon: no deltas");
  std::sort(norms.begin(), norms.end());
  const std::size_t n = norms.size();
  const double median =
      n % 2 ? norms[n / 2] : 0.5 * (norms[n / 2 - 1] + norms[n / 2]);
  return 0.25 * median;
}

// Retrains probes on clean, poisoned, and PGD-perturbed poisoned deltas.
// The perturbations are computed against `reference` (normally the
// baseline probes), not against the probes being trained. epsilon = 0
// degenerates to baseline training with the poisoned set duplicated.
inline ProbeSet train_pgd_probes(
    const std::vector<std::vector<Tensor>>& clean,
    const std::vector<std::vector<Tensor>>& poisoned,
    const std::vector<int>& layers, const ProbeSet& reference,
    const PgdConfig& pgd_cfg, const ProbeTrainConfig& train_cfg,
    std::uint64_t seed, ProbeTrainReport* report = nullptr) {
  pgd_cfg.validate();
  std::vector<std::vector<Tensor>> augmented = poisoned;
  augmented.reserve(poisoned.size() * 2);
  for (const auto& row : poisoned) {
    augmented.push_back(pgd_perturb(reference, layers, row, pgd_cfg));
  }
  return train_probe_set(clean, augmented, layers, train_cfg, seed, "pgd",
                         report);
}

// --------------------------------------------------------------- suffix pool
struct PoolConfig {
  int n_suffixes = 12;
  double train_fraction = 0.6;
  double val_fraction = 0.2;
  int max_retries = 3;  // extra attempts per slot after the first

  void validate() const {
    if (n_suffixes < 3) {
      throw ConfigError("PoolConfig: need at least 3 suffixes");
    }
    if (max_retries < 0) throw ConfigError("PoolConfig: max_retries >= 0");
    if (!(train_fraction > 0.0 && val_fraction > 0.0 &&
          train_fraction + val_fraction < 1.0)) {
      throw ConfigError("PoolConfig: fractions must leave room for test");
    }
  }
};

struct PoolEntry {
  TokenSeq tokens;
  TokenSeq s_init;
  std::uint64_t seed = 0;
  std::vector<int> prompt_ids;  // optimization order, part of the seed
  bool converged = false;
  double success_rate = 0.0;
  int iterations_run = 0;
  bool failed = false;  // never reached tau_exp within the retry budget
  std::string config_hash;
};

struct SuffixPool {
  std::vector<PoolEntry> entries;  // generation order, failed runs included
  std::vector<int> train_idx;      // indices into entries, successes only
  std::vector<int> val_idx;
  std::vector<int> test_idx;

  std::vector<TokenSeq> suffixes(const std::vector<int>& idx) const {
    std::vector<TokenSeq> out;
    out.reserve(idx.size());
    for (int i : idx) out.push_back(entries[static_cast<std::size_t>(i)].tokens);
    return out;
  }
  std::vector<TokenSeq> train_suffixes() const { return suffixes(train_idx); }
  std::vector<TokenSeq> val_suffixes() const { return suffixes(val_idx); }
  std::vector<TokenSeq> test_suffixes() const { return suffixes(test_idx); }
};

namespace detail {

// Sizes for a train/val/test partition. Every part gets at least one
// element; rounding surplus comes out of train first.
inline void pool_partition_sizes(int n, double train_fraction,
                                 double val_fraction, int& n_train, int& n_val,
                                 int& n_test) {
  n_train = std::max(1, static_cast<int>(std::llround(train_fraction * n)));
  n_val = std::max(1, static_cast<int>(std::llround(val_fraction * n)));
  while (n_train + n_val + 1 > n) {
    if (n_train > 1) {
      --n_train;
    } else {
      --n_val;
    }
  }
  n_test = n - n_train - n_val;
}

}  // namespace detail

// Runs the suffix optimizer once per pool slot with a distinct seed,
// prompt order, and random initial suffix. A run is accepted when its
// final success rate over its own prompts reaches tau_exp and its token
// sequence is new; otherwise it is retried up to max_retries times and
// then recorded as failed. Successful entries are partitioned
// train/val/test in generation order.
inline SuffixPool build_suffix_pool(const ModelParams& params,
                                    const ProbeSet& probes,
                                    const std::vector<PromptRecord>& prompts,
                                    const Vocabulary& vocab,
                                    const AttackConfig& base_cfg,
                                    const PoolConfig& pool_cfg,
                                    std::uint64_t seed) {
  pool_cfg.validate();
  base_cfg.validate();
  if (prompts.empty()) throw InputError("build_suffix_pool: no prompts");

  SuffixPool pool;
  auto taken = [&](const TokenSeq& s) {
    for (const PoolEntry& e : pool.entries) {
      if (!e.failed && e.tokens == s) return true;
    }
    return false;
  };

  const int range = vocab.suffix_hi() - vocab.suffix_lo();
  for (int j = 0; j < pool_cfg.n_suffixes; ++j) {
    PoolEntry entry;
    bool accepted = false;
    for (int attempt = 0; attempt <= pool_cfg.max_retries; ++attempt) {
      const std::uint64_t run_seed = Rng::mix(
          Rng::mix(seed, static_cast<std::uint64_t>(j)),
          static_cast<std::uint64_t>(attempt));
      Rng rng(run_seed);

      std::vector<PromptRecord> order = prompts;
      rng.shuffle(order);

      AttackConfig cfg = base_cfg;
      cfg.seed = Rng::mix(run_seed, 1);
      cfg.s_init.clear();
      for (int i = 0; i < cfg.suffix_len; ++i) {
        cfg.s_init.push_back(
            vocab.suffix_lo() +
            static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(range))));
      }

      const AttackResult res =
          optimize_universal_suffix(params, probes, order, vocab, cfg);

      std::vector<AttackPrompt> prepared;
      for (const auto& rec : order) {
        prepared.push_back(prepare_prompt(params, render(rec, vocab)));
      }
      const double sr = success_rate(params, probes, prepared,
                                     res.suffix.tokens, cfg.confidence);

      entry.tokens = res.suffix.tokens;
      entry.s_init = cfg.s_init;
      entry.seed = run_seed;
      entry.prompt_ids.clear();
      for (const auto& rec : order) entry.prompt_ids.push_back(rec.id);
      entry.converged = res.converged;
      entry.success_rate = sr;
      entry.iterations_run = res.iterations_run;
      entry.config_hash = fnv1a64_hex(attack_config_to_json(cfg).dump());

      if (sr >= base_cfg.tau_exp && !taken(entry.tokens)) {
        accepted = true;
        break;
      }
    }
    entry.failed = !accepted;
    pool.entries.push_back(std::move(entry));
  }

  // With fewer than 3 successes no three-way partition exists; the pool is
  // still returned so the failed runs stay inspectable, and downstream
  // training rejects the empty train split.
  std::vector<int> ok;
  for (std::size_t i = 0; i < pool.entries.size(); ++i) {
    if (!pool.entries[i].failed) ok.push_back(static_cast<int>(i));
  }
  if (ok.size() >= 3) {
    int n_train = 0, n_val = 0, n_test = 0;
    detail::pool_partition_sizes(static_cast<int>(ok.size()),
                                 pool_cfg.train_fraction,
                                 pool_cfg.val_fraction, n_train, n_val,
                                 n_test);
    pool.train_idx.assign(ok.begin(), ok.begin() + n_train);
    pool.val_idx.assign(ok.begin() + n_train, ok.begin() + n_train + n_val);
    pool.test_idx.assign(ok.begin() + n_train + n_val, ok.end());
  }
  return pool;
}

inline nlohmann::json pool_to_json(const SuffixPool& pool,
                                   const Vocabulary& vocab) {
  nlohmann::json entries = nlohmann::json::array();
  for (const PoolEntry& e : pool.entries) {
    entries.push_back({{"tokens", e.tokens},
                       {"text", vocab.decode(e.tokens)},
                       {"s_init", e.s_init},
                       {"seed", e.seed},
                       {"prompt_ids", e.prompt_ids},
                       {"converged", e.converged},
                       {"success_rate", e.success_rate},
                       {"iterations_run", e.iterations_run},
                       {"failed", e.failed},
                       {"config_hash", e.config_hash}});
  }
  return nlohmann::json{{"entries", std::move(entries)},
                        {"train", pool.train_idx},
                        {"val", pool.val_idx},
                        {"test", pool.test_idx}};
}

inline SuffixPool pool_from_json(const nlohmann::json& j) {
  SuffixPool pool;
  try {
    for (const auto& je : j.at("entries")) {
      PoolEntry e;
      e.tokens = je.at("tokens").get<TokenSeq>();
      e.s_init = je.at("s_init").get<TokenSeq>();
      e.seed = je.at("seed").get<std::uint64_t>();
      e.prompt_ids = je.at("prompt_ids").get<std::vector<int>>();
      e.converged = je.at("converged").get<bool>();
      e.success_rate = je.at("success_rate").get<double>();
      e.iterations_run = je.at("iterations_run").get<int>();
      e.failed = je.at("failed").get<bool>();
      e.config_hash = je.at("config_hash").get<std::string>();
      pool.entries.push_back(std::move(e));
    }
    pool.train_idx = j.at("train").get<std::vector<int>>();
    pool.val_idx = j.at("val").get<std::vector<int>>();
    pool.test_idx = j.at("test").get<std::vector<int>>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("suffix pool: ") + e.what());
  }
  const int n = static_cast<int>(pool.entries.size());
  for (const auto* idx : {&pool.train_idx, &pool.val_idx, &pool.test_idx}) {
    for (int i : *idx) {
      if (i < 0 || i >= n) throw ParseError("suffix pool: index out of range");
    }
  }
  return pool;
}

inline void save_pool(const std::string& path, const SuffixPool& pool,
                      const Vocabulary& vocab) {
  std::ofstream out(path);
  if (!out) throw InputError("save_pool: cannot open " + path);
  out << pool_to_json(pool, vocab).dump(2) << '\n';
  if (!out) throw InputError("save_pool: write failed for " + path);
}

inline SuffixPool load_pool(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("load_pool: cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("suffix pool: ") + e.what());
  }
  return pool_from_json(j);
}

// ------------------------------------------------- suffix-augmented probes
// Retrains probes with train-pool suffixes spliced into poisoned prompts:
// each poisoned record independently gets a uniformly drawn train suffix
// with probability augment_prob before its delta is computed. Clean
// records and labels are untouched.
inline ProbeSet train_suffix_augmented_probes(
    const ModelParams& params, const std::vector<PromptRecord>& records,
    const Vocabulary& vocab, const SuffixPool& pool, double augment_prob,
    const ProbeTrainConfig& train_cfg, std::uint64_t seed,
    ProbeTrainReport* report = nullptr) {
  if (pool.train_idx.empty()) {
    throw ConfigError("train_suffix_augmented_probes: pool train split empty");
  }
  if (!(augment_prob >= 0.0 && augment_prob <= 1.0)) {
    throw ConfigError("train_suffix_augmented_probes: augment_prob in [0,1]");
  }
  const std::vector<TokenSeq> train_sfx = pool.train_suffixes();

  Rng rng(seed);
  std::vector<std::vector<Tensor>> clean, poisoned;
  for (const auto& rec : records) {
    const TokenSeq* suffix = nullptr;
    if (rec.label == 1 && rng.bernoulli(augment_prob)) {
      suffix = &train_sfx[rng.uniform_index(train_sfx.size())];
    }
    const RenderedPrompt rp = render(rec, vocab, suffix);
    auto row = activation_delta(params, rp.primary_only, rp.tokens);
    (rec.label == 1 ? poisoned : clean).push_back(std::move(row));
  }
  return train_probe_set(clean, poisoned, params.config.probed_layers,
                         train_cfg, Rng::mix(seed, 1), "suffix_augmented",
                         report);
}

// ----------------------------------------------------------------- report
struct DefenseReport {
  std::vector<int> layers;
  std::vector<double> clean_accuracy;     // per layer, no suffix appended
  std::vector<double> poisoned_accuracy;  // per layer, no suffix appended
  std::vector<EvadeCriterion> criteria;
  std::vector<double> no_suffix_detection;  // per criterion, poisoned only
  struct SuffixRow {
    TokenSeq suffix;
    std::string text;
    std::vector<double> detection;  // per criterion, poisoned only
  };
  std::vector<SuffixRow> per_suffix;
  int n_clean = 0;
  int n_poisoned = 0;
};

// Scores one probe set on held-out records. Suffixes are appended to
// poisoned records only; detection uses the detector-side criteria
// (see `detects`).
inline DefenseReport evaluate_defense(
    const ModelParams& params, const ProbeSet& probes,
    const std::vector<PromptRecord>& records, const Vocabulary& vocab,
    const std::vector<TokenSeq>& suffixes,
    const std::vector<EvadeCriterion>& criteria) {
  if (records.empty()) throw InputError("evaluate_defense: no records");
  if (criteria.empty()) throw InputError("evaluate_defense: no criteria");

  DefenseReport rep;
  rep.layers = probes.layers();
  rep.criteria = criteria;
  const std::size_t L = rep.layers.size();
  const std::size_t C = criteria.size();
  rep.clean_accuracy.assign(L, 0.0);
  rep.poisoned_accuracy.assign(L, 0.0);
  rep.no_suffix_detection.assign(C, 0.0);
  rep.per_suffix.resize(suffixes.size());
  for (std::size_t si = 0; si < suffixes.size(); ++si) {
    rep.per_suffix[si].suffix = suffixes[si];
    rep.per_suffix[si].text = vocab.decode(suffixes[si]);
    rep.per_suffix[si].detection.assign(C, 0.0);
  }

  for (const auto& rec : records) {
    const AttackPrompt x = prepare_prompt(params, render(rec, vocab));
    const std::vector<int> preds =
        probe_predictions(params, probes, x, nullptr);
    if (rec.label == 0) {
      ++rep.n_clean;
      for (std::size_t l = 0; l < L; ++l) {
        rep.clean_accuracy[l] += preds[l] == 0;
      }
      continue;
    }
    ++rep.n_poisoned;
    for (std::size_t l = 0; l < L; ++l) {
      rep.poisoned_accuracy[l] += preds[l] == 1;
    }
    for (std::size_t c = 0; c < C; ++c) {
      rep.no_suffix_detection[c] += detects(preds, criteria[c]);
    }
    for (std::size_t si = 0; si < suffixes.size(); ++si) {
      const std::vector<int> sp =
          probe_predictions(params, probes, x, &suffixes[si]);
      for (std::size_t c = 0; c < C; ++c) {
        rep.per_suffix[si].detection[c] += detects(sp, criteria[c]);
      }
    }
  }
  if (rep.n_clean == 0 || rep.n_poisoned == 0) {
    throw InputError("evaluate_defense: need both clean and poisoned records");
  }
  for (std::size_t l = 0; l < L; ++l) {
    rep.clean_accuracy[l] /= rep.n_clean;
    rep.poisoned_accuracy[l] /= rep.n_poisoned;
  }
  for (std::size_t c = 0; c < C; ++c) {
    rep.no_suffix_detection[c] /= rep.n_poisoned;
  }
  for (auto& row : rep.per_suffix) {
    for (std::size_t c = 0; c < C; ++c) row.detection[c] /= rep.n_poisoned;
  }
  return rep;
}

inline nlohmann::json defense_report_to_json(const DefenseReport& rep) {
  nlohmann::json criteria = nlohmann::json::array();
  for (EvadeCriterion c : rep.criteria) criteria.push_back(criterion_name(c));
  nlohmann::json per_suffix = nlohmann::json::array();
  for (const auto& row : rep.per_suffix) {
    per_suffix.push_back({{"suffix", row.suffix},
                          {"text", row.text},
                          {"detection", row.detection}});
  }
  return nlohmann::json{{"layers", rep.layers},
                        {"clean_accuracy", rep.clean_accuracy},
                        {"poisoned_accuracy", rep.poisoned_accuracy},
                        {"criteria", std::move(criteria)},
                        {"no_suffix_detection", rep.no_suffix_detection},
                        {"per_suffix", std::move(per_suffix)},
                        {"n_clean", rep.n_clean},
                        {"n_poisoned", rep.n_poisoned}};
}

}  // namespace drift
