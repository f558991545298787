// Experiment stages wired together through on-disk artifacts. Every stage
// reads its inputs from the run directory, writes its outputs back with the
// config hash stamped on, and returns a JSON summary. The CLI and the
// acceptance harness both drive these functions.
#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "drift/attack.hpp"
#include "drift/checkpoint.hpp"
#include "drift/config.hpp"
#include "drift/corpus.hpp"
#include "drift/defense.hpp"
#include "drift/errors.hpp"
#include "drift/eval.hpp"
#include "drift/model.hpp"
#include "drift/probes.hpp"
#include "drift/threading.hpp"

namespace drift {

// --------------------------------------------------------------- layout
struct ArtifactPaths {
  std::filesystem::path root;

  explicit ArtifactPaths(const std::string& out_dir) : root(out_dir) {}

  std::filesystem::path config() const { return root / "config.json"; }
  std::filesystem::path corpus() const { return root / "corpus.jsonl"; }
  std::filesystem::path corpus_meta() const { return root / "corpus.meta.json"; }
  std::filesystem::path vocab() const { return root / "vocab.json"; }
  std::filesystem::path model() const { return root / "model.ckpt"; }
  std::filesystem::path model_meta() const { return root / "model.meta.json"; }
  std::filesystem::path probes(const std::string& tag) const {
    return root / ("probes_" + tag + ".json");
  }
  std::filesystem::path suffix() const { return root / "suffix.json"; }
  std::filesystem::path pool() const { return root / "pool.json"; }
  std::filesystem::path evaluation() const { return root / "evaluation.json"; }
  std::filesystem::path behavior() const { return root / "behavior.json"; }
  std::filesystem::path hardened() const { return root / "hardened_attack.json"; }
  std::filesystem::path report_dir() const { return root / "report"; }
};

// Per-stage seed tags; every stage derives its own stream from the run seed.
namespace stage {
inline constexpr std::uint64_t kCorpus = 0xA1;
inline constexpr std::uint64_t kLmInit = 0xA2;
inline constexpr std::uint64_t kLmTrain = 0xA3;
inline constexpr std::uint64_t kProbes = 0xA4;
inline constexpr std::uint64_t kAttack = 0xA5;
inline constexpr std::uint64_t kPool = 0xA6;
inline constexpr std::uint64_t kPgd = 0xA7;
inline constexpr std::uint64_t kSuffixAug = 0xA8;
inline constexpr std::uint64_t kBehavior = 0xA9;
inline constexpr std::uint64_t kHardened = 0xAA;

inline std::uint64_t seed(const ExperimentConfig& cfg, std::uint64_t tag) {
  return Rng::mix(cfg.seed, tag);
}
}  // namespace stage

// ------------------------------------------------------------- envelopes
// Artifacts are {config_hash, seed, payload}; loading verifies the hash so a
// stale artifact cannot silently feed a reconfigured run.
namespace detail {

inline nlohmann::json read_json_file(const std::filesystem::path& path,
                                     const std::string& producer) {
  std::ifstream in(path);
  if (!in) {
    throw InputError("missing artifact " + path.string() + "; run `" +
                     producer + "` first");
  }
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("artifact " + path.string() + ": " + e.what());
  }
  return j;
}

inline void write_json_file(const std::filesystem::path& path,
                            const nlohmann::json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
  if (!out) throw InputError("write failed for " + path.string());
}

}  // namespace detail

inline void save_artifact(const std::filesystem::path& path,
                          const ExperimentConfig& cfg,
                          nlohmann::json payload) {
  detail::write_json_file(path, nlohmann::json{{"config_hash", cfg.hash()},
                                               {"seed", cfg.seed},
                                               {"payload", std::move(payload)}});
}

inline nlohmann::json load_artifact(const std::filesystem::path& path,
                                    const ExperimentConfig& cfg,
                                    const std::string& producer,
                                    bool force = false) {
  nlohmann::json j = detail::read_json_file(path, producer);
  if (!j.is_object() || !j.contains("config_hash") || !j.contains("payload")) {
    throw ParseError("artifact " + path.string() +
                     ": expected {config_hash, seed, payload}");
  }
  const std::string stamped = j["config_hash"].get<std::string>();
  if (!force && stamped != cfg.hash()) {
    throw ConfigError("artifact " + path.string() +
                      " was produced under config hash " + stamped +
                      " but the current config hashes to " + cfg.hash() +
                      "; rerun `" + producer + "` or pass --force");
  }
  return std::move(j["payload"]);
}

// --------------------------------------------------------------- loaders
inline Vocabulary load_vocab_artifact(const ArtifactPaths& paths,
                                      const ExperimentConfig& cfg,
                                      bool force = false) {
  return Vocabulary::from_json(
      load_artifact(paths.vocab(), cfg, "gen-corpus", force));
}

inline std::vector<PromptRecord> load_corpus_artifact(
    const ArtifactPaths& paths, const ExperimentConfig& cfg,
    const Vocabulary& vocab, bool force = false) {
  load_artifact(paths.corpus_meta(), cfg, "gen-corpus", force);
  if (!std::filesystem::exists(paths.corpus())) {
    throw InputError("missing artifact " + paths.corpus().string() +
                     "; run `gen-corpus` first");
  }
  return ingest_jsonl(paths.corpus().string(), vocab);
}

inline ModelParams load_model_artifact(const ArtifactPaths& paths,
                                       const ExperimentConfig& cfg,
                                       bool force = false) {
  load_artifact(paths.model_meta(), cfg, "train-lm", force);
  if (!std::filesystem::exists(paths.model())) {
    throw InputError("missing artifact " + paths.model().string() +
                     "; run `train-lm` first");
  }
  return load_model(paths.model().string());
}

inline ProbeSet load_probe_artifact(const ArtifactPaths& paths,
                                    const ExperimentConfig& cfg,
                                    const std::string& tag,
                                    const std::string& producer,
                                    bool force = false) {
  const nlohmann::json payload =
      load_artifact(paths.probes(tag), cfg, producer, force);
  return probe_set_from_json(payload.at("probes"));
}

inline SuffixPool load_pool_artifact(const ArtifactPaths& paths,
                                     const ExperimentConfig& cfg,
                                     bool force = false) {
  return pool_from_json(load_artifact(paths.pool(), cfg, "build-pool", force));
}

inline TokenSeq load_suffix_artifact(const ArtifactPaths& paths,
                                     const ExperimentConfig& cfg,
                                     bool force = false) {
  const nlohmann::json payload =
      load_artifact(paths.suffix(), cfg, "attack", force);
  return payload.at("suffix").at("tokens").get<TokenSeq>();
}

// --------------------------------------------------------------- helpers
namespace detail {

inline std::vector<PromptRecord> records_of(
    const std::vector<PromptRecord>& records, Split split, int label = -1) {
  return filter_records(records, [&](const PromptRecord& r) {
    return r.split == split && (label < 0 || r.label == label);
  });
}

// Activation deltas per record, slot-parallel and order-stable.
inline std::vector<std::vector<Tensor>> record_deltas(
    const ModelParams& params, const std::vector<PromptRecord>& records,
    const Vocabulary& vocab) {
  std::vector<std::vector<Tensor>> rows(records.size());
  parallel_for(records.size(), [&](std::size_t i) {
    const RenderedPrompt rp = render(records[i], vocab);
    rows[i] = activation_delta(params, rp.primary_only, rp.tokens);
  });
  return rows;
}

inline void split_by_label(const std::vector<PromptRecord>& records,
                           const std::vector<std::vector<Tensor>>& rows,
                           std::vector<std::vector<Tensor>>& clean,
                           std::vector<std::vector<Tensor>>& poisoned) {
  for (std::size_t i = 0; i < records.size(); ++i) {
    (records[i].label == 1 ? poisoned : clean).push_back(rows[i]);
  }
}

inline nlohmann::json probe_report_to_json(const ProbeTrainReport& rep) {
  return nlohmann::json{{"layers", rep.layers},
                        {"train_accuracy", rep.train_accuracy},
                        {"val_accuracy", rep.val_accuracy}};
}

// Seeded shuffle of the poisoned training split, first n records.
inline std::vector<PromptRecord> sample_poisoned_train(
    const std::vector<PromptRecord>& records, int n, std::uint64_t seed) {
  std::vector<PromptRecord> pool = records_of(records, Split::train, 1);
  if (static_cast<int>(pool.size()) < n) {
    throw InputError("not enough poisoned training prompts: need " +
                     std::to_string(n) + ", have " +
                     std::to_string(pool.size()));
  }
  Rng rng(seed);
  rng.shuffle(pool);
  pool.resize(static_cast<std::size_t>(n));
  return pool;
}

inline std::vector<int> record_ids(const std::vector<PromptRecord>& records) {
  std::vector<int> ids;
  ids.reserve(records.size());
  for (const auto& r : records) ids.push_back(r.id);
  return ids;
}

inline double wall_seconds_since(
    std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                       start)
      .count();
}

}  // namespace detail

inline ArtifactPaths prepare_out_dir(const ExperimentConfig& cfg) {
  cfg.validate();
  ArtifactPaths paths(cfg.out_dir);
  std::filesystem::create_directories(paths.root);
  detail::write_json_file(paths.config(),
                          nlohmann::json{{"config_hash", cfg.hash()},
                                         {"config", cfg.to_json()}});
  return paths;
}

// ---------------------------------------------------------------- stages
inline nlohmann::json run_gen_corpus(const ExperimentConfig& cfg,
                                     bool /*force*/ = false) {
  const ArtifactPaths paths = prepare_out_dir(cfg);
  const Vocabulary vocab = Vocabulary::standard(cfg.suffix_tokens);
  if (vocab.size() > cfg.model.vocab_size) {
    throw ConfigError("vocabulary has " + std::to_string(vocab.size()) +
                      " tokens but model.vocab_size is " +
                      std::to_string(cfg.model.vocab_size));
  }

  const std::vector<PromptRecord> records =
      generate_corpus(stage::seed(cfg, stage::kCorpus), cfg.counts,
                      cfg.trigger_rate);

  int max_tokens = 0;
  for (const auto& rec : records) {
    const RenderedPrompt rp = render(rec, vocab);
    max_tokens = std::max(max_tokens, static_cast<int>(rp.tokens.size()));
  }
  if (max_tokens + cfg.attack.suffix_len > cfg.model.max_seq_len) {
    throw ConfigError("longest prompt (" + std::to_string(max_tokens) +
                      " tokens) plus suffix_len exceeds model.max_seq_len");
  }

  export_jsonl(records, paths.corpus().string());
  save_artifact(paths.vocab(), cfg, vocab.to_json());
  save_artifact(paths.corpus_meta(), cfg,
                nlohmann::json{{"n_records", records.size()},
                               {"n_clean_train", cfg.counts.n_clean_train},
                               {"n_poisoned_train", cfg.counts.n_poisoned_train},
                               {"n_clean_test", cfg.counts.n_clean_test},
                               {"n_poisoned_test", cfg.counts.n_poisoned_test},
                               {"trigger_rate", cfg.trigger_rate},
                               {"max_prompt_tokens", max_tokens}});

  return nlohmann::json{{"stage", "gen-corpus"},
                        {"records", records.size()},
                        {"vocab_size", vocab.size()},
                        {"max_prompt_tokens", max_tokens},
                        {"corpus", paths.corpus().string()}};
}

inline nlohmann::json run_train_lm(const ExperimentConfig& cfg,
                                   bool force = false) {
  const ArtifactPaths paths = prepare_out_dir(cfg);
  const Vocabulary vocab = load_vocab_artifact(paths, cfg, force);
  const std::vector<PromptRecord> records =
      load_corpus_artifact(paths, cfg, vocab, force);

  std::vector<TokenSeq> seqs;
  for (const auto& rec : detail::records_of(records, Split::train)) {
    seqs.push_back(render(rec, vocab).tokens);
  }

  ModelParams params = init_params(cfg.model, stage::seed(cfg, stage::kLmInit));
  LmTrainReport report;
  train_lm(params, seqs, cfg.lm, stage::seed(cfg, stage::kLmTrain), &report);

  save_model(params, paths.model().string());
  save_artifact(paths.model_meta(), cfg,
                nlohmann::json{{"epoch_loss", report.epoch_loss},
                               {"n_sequences", seqs.size()}});

  return nlohmann::json{{"stage", "train-lm"},
                        {"n_sequences", seqs.size()},
                        {"epoch_loss", report.epoch_loss},
                        {"model", paths.model().string()}};
}

inline nlohmann::json run_train_probes(const ExperimentConfig& cfg,
                                       bool force = false) {
  const ArtifactPaths paths = prepare_out_dir(cfg);
  const Vocabulary vocab = load_vocab_artifact(paths, cfg, force);
  const std::vector<PromptRecord> records =
      load_corpus_artifact(paths, cfg, vocab, force);
  const ModelParams params = load_model_artifact(paths, cfg, force);

  const std::vector<PromptRecord> train =
      detail::records_of(records, Split::train);
  const auto rows = detail::record_deltas(params, train, vocab);
  std::vector<std::vector<Tensor>> clean, poisoned;
  detail::split_by_label(train, rows, clean, poisoned);

  ProbeTrainReport report;
  const ProbeSet set =
      train_probe_set(clean, poisoned, cfg.model.probed_layers, cfg.probes,
                      stage::seed(cfg, stage::kProbes), "baseline", &report);

  save_artifact(paths.probes("baseline"), cfg,
                nlohmann::json{{"probes", probe_set_to_json(set)},
                               {"report", detail::probe_report_to_json(report)}});

  return nlohmann::json{{"stage", "train-probes"},
                        {"layers", report.layers},
                        {"train_accuracy", report.train_accuracy},
                        {"val_accuracy", report.val_accuracy},
                        {"probes", paths.probes("baseline").string()}};
}

inline nlohmann::json run_attack(const ExperimentConfig& cfg,
                                 bool force = false) {
  const ArtifactPaths paths = prepare_out_dir(cfg);
  const Vocabulary vocab = load_vocab_artifact(paths, cfg, force);
  const std::vector<PromptRecord> records =
      load_corpus_artifact(paths, cfg, vocab, force);
  const ModelParams params = load_model_artifact(paths, cfg, force);
  const ProbeSet probes =
      load_probe_artifact(paths, cfg, "baseline", "train-probes", force);

  const std::uint64_t sd = stage::seed(cfg, stage::kAttack);
  const std::vector<PromptRecord> prompts =
      detail::sample_poisoned_train(records, cfg.attack_train_prompts, sd);

  AttackConfig acfg = cfg.attack;
  acfg.seed = Rng::mix(sd, 1);

  const auto t0 = std::chrono::steady_clock::now();
  const AttackResult result =
      optimize_universal_suffix(params, probes, prompts, vocab, acfg);
  const double wall = detail::wall_seconds_since(t0);

  nlohmann::json payload = attack_result_to_json(result, acfg, vocab, wall);
  payload["prompt_ids"] = detail::record_ids(prompts);
  save_artifact(paths.suffix(), cfg, std::move(payload));

  double final_sr = 0.0;
  if (!result.trace.rows.empty()) {
    final_sr = result.trace.rows.back().success_rate;
  }
  return nlohmann::json{{"stage", "attack"},
                        {"converged", result.converged},
                        {"iterations_run", result.iterations_run},
                        {"success_rate", final_sr},
                        {"suffix_text", vocab.decode(result.suffix.tokens)},
                        {"wall_seconds", wall},
                        {"suffix", paths.suffix().string()}};
}

inline nlohmann::json run_build_pool(const ExperimentConfig& cfg,
                                     bool force = false) {
  const ArtifactPaths paths = prepare_out_dir(cfg);
  const Vocabulary vocab = load_vocab_artifact(paths, cfg, force);
  const std::vector<PromptRecord> records =
      load_corpus_artifact(paths, cfg, vocab, force);
  const ModelParams params = load_model_artifact(paths, cfg, force);
  const ProbeSet probes =
      load_probe_artifact(paths, cfg, "baseline", "train-probes", force);

  const std::uint64_t sd = stage::seed(cfg, stage::kPool);
  const std::vector<PromptRecord> prompts =
      detail::sample_poisoned_train(records, cfg.pool_prompts, sd);

  AttackConfig base = cfg.attack;
  base.max_iterations = cfg.pool_max_iterations;

  const auto t0 = std::chrono::steady_clock::now();
  const SuffixPool pool = build_suffix_pool(params, probes, prompts, vocab,
                                            base, cfg.pool_config(), sd);
  const double wall = detail::wall_seconds_since(t0);

  int failed = 0;
  for (const auto& e : pool.entries) failed += e.failed;
  save_artifact(paths.pool(), cfg, pool_to_json(pool, vocab));

  return nlohmann::json{{"stage", "build-pool"},
                        {"entries", pool.entries.size()},
                        {"failed", failed},
                        {"train", pool.train_idx.size()},
                        {"val", pool.val_idx.size()},
                        {"test", pool.test_idx.size()},
                        {"wall_seconds", wall},
                        {"pool", paths.pool().string()}};
}

inline nlohmann::json run_defend_pgd(const ExperimentConfig& cfg,
                                     bool force = false) {
  const ArtifactPaths paths = prepare_out_dir(cfg);
  const Vocabulary vocab = load_vocab_artifact(paths, cfg, force);
  const std::vector<PromptRecord> records =
      load_corpus_artifact(paths, cfg, vocab, force);
  const ModelParams params = load_model_artifact(paths, cfg, force);
  const ProbeSet baseline =
      load_probe_artifact(paths, cfg, "baseline", "train-probes", force);

  const std::vector<PromptRecord> train =
      detail::records_of(records, Split::train);
  const auto rows = detail::record_deltas(params, train, vocab);
  std::vector<std::vector<Tensor>> clean, poisoned;
  detail::split_by_label(train, rows, clean, poisoned);

  PgdConfig pgd;
  pgd.epsilon =
      cfg.pgd_epsilon > 0.0 ? cfg.pgd_epsilon : suggest_pgd_epsilon(poisoned);
  pgd.alpha = cfg.pgd_alpha > 0.0 ? cfg.pgd_alpha : pgd.epsilon / 5.0;
  pgd.steps = cfg.pgd_steps;

  ProbeTrainReport report;
  const ProbeSet set =
      train_pgd_probes(clean, poisoned, cfg.model.probed_layers, baseline, pgd,
                       cfg.probes, stage::seed(cfg, stage::kPgd), &report);

  save_artifact(paths.probes("pgd"), cfg,
                nlohmann::json{{"probes", probe_set_to_json(set)},
                               {"report", detail::probe_report_to_json(report)},
                               {"pgd",
                                {{"epsilon", pgd.epsilon},
                                 {"alpha", pgd.alpha},
                                 {"steps", pgd.steps}}}});

  return nlohmann::json{{"stage", "defend-pgd"},
                        {"epsilon", pgd.epsilon},
                        {"alpha", pgd.alpha},
                        {"steps", pgd.steps},
                        {"val_accuracy", report.val_accuracy},
                        {"probes", paths.probes("pgd").string()}};
}

inline nlohmann::json run_defend_suffix(const ExperimentConfig& cfg,
                                        bool force = false) {
  const ArtifactPaths paths = prepare_out_dir(cfg);
  const Vocabulary vocab = load_vocab_artifact(paths, cfg, force);
  const std::vector<PromptRecord> records =
      load_corpus_artifact(paths, cfg, vocab, force);
  const ModelParams params = load_model_artifact(paths, cfg, force);
  const SuffixPool pool = load_pool_artifact(paths, cfg, force);
  if (pool.train_idx.empty()) {
    throw InputError(
        "suffix pool has no usable train suffixes; rerun `build-pool` with a "
        "larger retry budget or easier attack settings");
  }

  const std::vector<PromptRecord> train =
      detail::records_of(records, Split::train);

  ProbeTrainReport report;
  const ProbeSet set = train_suffix_augmented_probes(
      params, train, vocab, pool, cfg.augment_prob, cfg.probes,
      stage::seed(cfg, stage::kSuffixAug), &report);

  save_artifact(paths.probes("suffix_augmented"), cfg,
                nlohmann::json{{"probes", probe_set_to_json(set)},
                               {"report", detail::probe_report_to_json(report)},
                               {"augment_prob", cfg.augment_prob},
                               {"pool_train_suffixes", pool.train_idx.size()}});

  return nlohmann::json{{"stage", "defend-suffix"},
                        {"augment_prob", cfg.augment_prob},
                        {"pool_train_suffixes", pool.train_idx.size()},
                        {"val_accuracy", report.val_accuracy},
                        {"probes", paths.probes("suffix_augmented").string()}};
}

namespace detail {

inline double detection_rate(const PredictionMatrix& m, EvadeCriterion crit) {
  double hits = 0.0;
  for (const auto& row : m.predictions) hits += detects(row, crit);
  return hits / static_cast<double>(m.n_prompts());
}

}  // namespace detail

inline nlohmann::json run_evaluate(const ExperimentConfig& cfg,
                                   bool force = false) {
  const ArtifactPaths paths = prepare_out_dir(cfg);
  const Vocabulary vocab = load_vocab_artifact(paths, cfg, force);
  const std::vector<PromptRecord> records =
      load_corpus_artifact(paths, cfg, vocab, force);
  const ModelParams params = load_model_artifact(paths, cfg, force);
  const TokenSeq universal = load_suffix_artifact(paths, cfg, force);

  std::vector<std::pair<std::string, ProbeSet>> sets;
  sets.emplace_back(
      "baseline",
      load_probe_artifact(paths, cfg, "baseline", "train-probes", force));
  if (std::filesystem::exists(paths.probes("pgd"))) {
    sets.emplace_back(
        "pgd", load_probe_artifact(paths, cfg, "pgd", "defend-pgd", force));
  }
  if (std::filesystem::exists(paths.probes("suffix_augmented"))) {
    sets.emplace_back("suffix_augmented",
                      load_probe_artifact(paths, cfg, "suffix_augmented",
                                          "defend-suffix", force));
  }

  // Held-out pool suffixes join the universal suffix in the detection tables.
  std::vector<std::pair<std::string, TokenSeq>> suffixes;
  suffixes.emplace_back("universal", universal);
  if (std::filesystem::exists(paths.pool())) {
    const SuffixPool pool = load_pool_artifact(paths, cfg, force);
    const auto held_out = pool.test_suffixes();
    for (std::size_t i = 0; i < held_out.size(); ++i) {
      suffixes.emplace_back("pool_test_" + std::to_string(i), held_out[i]);
    }
  }

  const std::vector<PromptRecord> clean_test =
      detail::records_of(records, Split::test, 0);
  const std::vector<PromptRecord> poisoned_test =
      detail::records_of(records, Split::test, 1);
  const std::vector<EvadeCriterion> criteria = cfg.criteria_list();

  nlohmann::json suffix_index = nlohmann::json::array();
  for (const auto& [id, tokens] : suffixes) {
    suffix_index.push_back(
        {{"id", id}, {"tokens", tokens}, {"text", vocab.decode(tokens)}});
  }

  nlohmann::json probe_sets = nlohmann::json::array();
  for (const auto& [tag, set] : sets) {
    const PredictionMatrix m_clean = score(params, set, clean_test, vocab);
    const PredictionMatrix m_before = score(params, set, poisoned_test, vocab);

    nlohmann::json sj;
    sj["tag"] = tag;
    sj["layers"] = set.layers();

    std::vector<double> clean_acc = layer_misclassification(m_clean);
    for (double& v : clean_acc) v = 1.0 - v;
    std::vector<double> poisoned_acc = layer_misclassification(m_before);
    for (double& v : poisoned_acc) v = 1.0 - v;
    sj["clean_accuracy"] = clean_acc;
    sj["poisoned_accuracy"] = poisoned_acc;

    nlohmann::json agreement = nlohmann::json::array();
    auto push_agreement = [&](const std::string& dataset,
                              const PredictionMatrix& m) {
      const AgreementRates a = agreement_rates(m);
      agreement.push_back({{"dataset", dataset},
                           {"all_probes", a.all_probes},
                           {"deep_probes", a.deep_probes}});
    };
    push_agreement("clean", m_clean);
    push_agreement("poisoned", m_before);

    nlohmann::json asr_no_suffix = nlohmann::json::object();
    for (EvadeCriterion c : criteria) {
      asr_no_suffix[criterion_name(c)] = asr(m_before, c);
    }
    sj["asr_no_suffix"] = asr_no_suffix;

    nlohmann::json detection = nlohmann::json::array();
    for (EvadeCriterion c : criteria) {
      detection.push_back({{"suffix", "none"},
                           {"criterion", criterion_name(c)},
                           {"rate", detail::detection_rate(m_before, c)}});
    }
    for (const auto& [id, tokens] : suffixes) {
      const PredictionMatrix m_s =
          score(params, set, poisoned_test, vocab, &tokens, id);
      if (id == "universal") {
        push_agreement("poisoned_universal", m_s);
        sj["evasion"] =
            evasion_report_to_json(make_evasion_report(m_before, m_s, criteria));
      }
      for (EvadeCriterion c : criteria) {
        detection.push_back({{"suffix", id},
                             {"criterion", criterion_name(c)},
                             {"rate", detail::detection_rate(m_s, c)}});
      }
    }
    sj["agreement"] = agreement;
    sj["detection"] = detection;
    probe_sets.push_back(std::move(sj));
  }

  nlohmann::json criteria_names = nlohmann::json::array();
  for (EvadeCriterion c : criteria) criteria_names.push_back(criterion_name(c));

  nlohmann::json payload{{"criteria", criteria_names},
                         {"n_clean_test", clean_test.size()},
                         {"n_poisoned_test", poisoned_test.size()},
                         {"suffixes", std::move(suffix_index)},
                         {"probe_sets", std::move(probe_sets)}};
  save_artifact(paths.evaluation(), cfg, payload);

  nlohmann::json summary{{"stage", "evaluate"},
                         {"probe_sets", sets.size()},
                         {"suffixes", suffixes.size()},
                         {"n_clean_test", clean_test.size()},
                         {"n_poisoned_test", poisoned_test.size()},
                         {"evaluation", paths.evaluation().string()}};
  summary["baseline_asr"] = payload["probe_sets"][0]["evasion"]["asr"];
  return summary;
}

inline nlohmann::json run_generate(const ExperimentConfig& cfg,
                                   bool force = false) {
  const ArtifactPaths paths = prepare_out_dir(cfg);
  const Vocabulary vocab = load_vocab_artifact(paths, cfg, force);
  const std::vector<PromptRecord> records =
      load_corpus_artifact(paths, cfg, vocab, force);
  const ModelParams params = load_model_artifact(paths, cfg, force);
  const TokenSeq universal = load_suffix_artifact(paths, cfg, force);

  std::vector<PromptRecord> pool = detail::records_of(records, Split::test, 1);
  if (pool.empty()) throw InputError("run_generate: no poisoned test records");
  const std::uint64_t sd = stage::seed(cfg, stage::kBehavior);
  Rng rng(sd);
  rng.shuffle(pool);
  const std::size_t n =
      std::min(pool.size(), static_cast<std::size_t>(cfg.behavior_prompts));
  pool.resize(n);

  auto continuation = [&](const TokenSeq& prompt) {
    const TokenSeq full =
        generate(params, prompt, cfg.max_new_tokens, 0, DecodeMode::greedy);
    return vocab.decode(TokenSeq(full.begin() + static_cast<std::ptrdiff_t>(
                                     prompt.size()),
                                 full.end()));
  };

  nlohmann::json rows = nlohmann::json::array();
  int changed = 0;
  for (const auto& rec : pool) {
    const std::string without = continuation(render(rec, vocab).tokens);
    const std::string with = continuation(render(rec, vocab, &universal).tokens);
    const bool diff = with != without;
    changed += diff;
    rows.push_back({{"prompt_id", rec.id},
                    {"without_suffix", without},
                    {"with_suffix", with},
                    {"changed", diff}});
  }

  const double fraction =
      n ? static_cast<double>(changed) / static_cast<double>(n) : 0.0;
  save_artifact(paths.behavior(), cfg,
                nlohmann::json{{"rows", std::move(rows)},
                               {"fraction_changed", fraction},
                               {"max_new_tokens", cfg.max_new_tokens}});

  return nlohmann::json{{"stage", "generate"},
                        {"prompts", n},
                        {"fraction_changed", fraction},
                        {"behavior", paths.behavior().string()}};
}

inline nlohmann::json run_attack_hardened(const ExperimentConfig& cfg,
                                          bool force = false) {
  const ArtifactPaths paths = prepare_out_dir(cfg);
  const Vocabulary vocab = load_vocab_artifact(paths, cfg, force);
  const std::vector<PromptRecord> records =
      load_corpus_artifact(paths, cfg, vocab, force);
  const ModelParams params = load_model_artifact(paths, cfg, force);
  const ProbeSet hardened = load_probe_artifact(paths, cfg, "suffix_augmented",
                                                "defend-suffix", force);

  const std::uint64_t sd = stage::seed(cfg, stage::kHardened);
  const std::vector<PromptRecord> prompts =
      detail::sample_poisoned_train(records, cfg.hardened_attack_prompts, sd);

  AttackConfig acfg = cfg.attack;
  acfg.max_iterations = cfg.hardened_attack_iterations;
  acfg.seed = Rng::mix(sd, 1);

  const auto t0 = std::chrono::steady_clock::now();
  const AttackResult result =
      optimize_universal_suffix(params, hardened, prompts, vocab, acfg);
  const double wall = detail::wall_seconds_since(t0);

  double final_sr = 0.0;
  if (!result.trace.rows.empty()) {
    final_sr = result.trace.rows.back().success_rate;
  }

  nlohmann::json payload = attack_result_to_json(result, acfg, vocab, wall);
  payload["prompt_ids"] = detail::record_ids(prompts);
  payload["target_probes"] = "suffix_augmented";
  payload["final_success_rate"] = final_sr;
  save_artifact(paths.hardened(), cfg, std::move(payload));

  return nlohmann::json{{"stage", "attack-hardened"},
                        {"converged", result.converged},
                        {"iterations_run", result.iterations_run},
                        {"success_rate", final_sr},
                        {"wall_seconds", wall},
                        {"hardened_attack", paths.hardened().string()}};
}

inline nlohmann::json run_report(const ExperimentConfig& cfg,
                                 bool force = false) {
  const ArtifactPaths paths = prepare_out_dir(cfg);
  const nlohmann::json eval =
      load_artifact(paths.evaluation(), cfg, "evaluate", force);

  ReportBundle bundle;
  bundle.run_info = nlohmann::json{{"config_hash", cfg.hash()},
                                   {"seed", cfg.seed}};

  for (const auto& sj : eval.at("probe_sets")) {
    const std::string tag = sj.at("tag").get<std::string>();
    const std::vector<int> layers = sj.at("layers").get<std::vector<int>>();
    const auto clean_acc = sj.at("clean_accuracy").get<std::vector<double>>();
    const auto pois_acc = sj.at("poisoned_accuracy").get<std::vector<double>>();
    for (std::size_t l = 0; l < layers.size(); ++l) {
      bundle.accuracy.push_back({tag, layers[l], clean_acc[l], pois_acc[l]});
    }

    for (const auto& aj : sj.at("agreement")) {
      bundle.agreement.push_back({tag, aj.at("dataset").get<std::string>(),
                                  aj.at("all_probes").get<double>(),
                                  aj.at("deep_probes").get<double>()});
    }

    for (const auto& [crit, rate] : sj.at("asr_no_suffix").items()) {
      bundle.asr_rows.push_back({tag, "no_suffix", crit, rate.get<double>()});
    }
    const nlohmann::json& ev = sj.at("evasion");
    const auto crit_names = ev.at("criteria").get<std::vector<std::string>>();
    const auto asr_rates = ev.at("asr").get<std::vector<double>>();
    for (std::size_t c = 0; c < crit_names.size(); ++c) {
      bundle.asr_rows.push_back({tag, "universal", crit_names[c], asr_rates[c]});
    }

    for (const auto& dj : sj.at("detection")) {
      bundle.detection.push_back({tag, dj.at("suffix").get<std::string>(),
                                  dj.at("criterion").get<std::string>(),
                                  dj.at("rate").get<double>()});
    }

    bundle.fooled.push_back(
        {tag, ev.at("fooled_histogram").get<std::vector<int>>()});
    bundle.misclassification.push_back(
        {tag + " no_suffix", layers,
         ev.at("misclassification_before").get<std::vector<double>>()});
    bundle.misclassification.push_back(
        {tag + " universal", layers,
         ev.at("misclassification_after").get<std::vector<double>>()});
  }

  if (std::filesystem::exists(paths.behavior())) {
    const nlohmann::json behavior =
        load_artifact(paths.behavior(), cfg, "generate", force);
    for (const auto& rj : behavior.at("rows")) {
      bundle.behavior.push_back({rj.at("prompt_id").get<int>(),
                                 rj.at("changed").get<bool>(),
                                 rj.at("without_suffix").get<std::string>(),
                                 rj.at("with_suffix").get<std::string>()});
    }
    bundle.run_info["fraction_changed"] =
        behavior.at("fraction_changed").get<double>();
  }
  if (std::filesystem::exists(paths.hardened())) {
    const nlohmann::json hardened =
        load_artifact(paths.hardened(), cfg, "attack-hardened", force);
    bundle.run_info["hardened_attack_success_rate"] =
        hardened.at("final_success_rate").get<double>();
  }

  const std::vector<std::string> files =
      emit_report(bundle, paths.report_dir().string());

  return nlohmann::json{{"stage", "report"},
                        {"dir", paths.report_dir().string()},
                        {"files", files}};
}

}  // namespace drift
