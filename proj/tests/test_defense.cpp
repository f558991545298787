#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "drift/defense.hpp"
#include "support/tiny_world.hpp"

using namespace drift;
using tiny::constant_probes;
using tiny::random_probes;
using tiny::tiny_clean_prompts;
using tiny::tiny_config;
using tiny::tiny_prompts;
using tiny::tiny_vocab;

namespace {

struct TempFile {
  std::string path;
  explicit TempFile(const std::string& name) : path("/tmp/" + name) {}
  ~TempFile() { std::remove(path.c_str()); }
};

double sgn(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

// Two-class Gaussian deltas for a single probed layer.
void gaussian_rows(Rng& rng, int n, int dim, double mean,
                   std::vector<std::vector<Tensor>>& out) {
  for (int i = 0; i < n; ++i) {
    Tensor d = Tensor::zeros({dim});
    for (double& v : d.data) v = rng.normal(mean, 1.0);
    out.push_back({d});
  }
}

}  // namespace

TEST_CASE("pgd config invariants") {
  PgdConfig c;
  REQUIRE_NOTHROW(c.validate());

  c = PgdConfig{};
  c.alpha = 0.6;  // exceeds epsilon = 0.5
  REQUIRE_THROWS_AS(c.validate(), ConfigError);

  c = PgdConfig{};
  c.steps = 0;
  REQUIRE_THROWS_AS(c.validate(), ConfigError);

  c = PgdConfig{};
  c.epsilon = -0.1;
  REQUIRE_THROWS_AS(c.validate(), ConfigError);

  // A zero-radius ball renders alpha irrelevant.
  c = PgdConfig{};
  c.epsilon = 0.0;
  REQUIRE_NOTHROW(c.validate());
}

TEST_CASE("pgd perturbation geometry") {
  Rng rng(7);
  LinearProbe probe;
  probe.layer = 0;
  probe.W = Tensor::zeros({8});
  for (double& v : probe.W.data) v = rng.normal(0.0, 1.0);
  probe.b = 0.3;

  Tensor delta = Tensor::zeros({8});
  delta.data = {0.5, -1.25, 2.0, -0.75, 1.5, -0.25, 0.0, 3.0};

  SECTION("zero budget leaves the delta unchanged") {
    PgdConfig cfg;
    cfg.epsilon = 0.0;
    cfg.alpha = 0.1;
    cfg.steps = 20;
    REQUIRE(pgd_perturb(probe, delta, cfg) == delta);
  }

  SECTION("one step with alpha == epsilon lands on the ball corner") {
    PgdConfig cfg;
    cfg.epsilon = 0.5;
    cfg.alpha = 0.5;
    cfg.steps = 1;
    const Tensor out = pgd_perturb(probe, delta, cfg);
    for (std::size_t k = 0; k < out.data.size(); ++k) {
      REQUIRE(out.data[k] == delta.data[k] - 0.5 * sgn(probe.W.data[k]));
    }
  }

  SECTION("saturating step counts stop at the corner") {
    PgdConfig cfg;
    cfg.epsilon = 0.5;
    cfg.alpha = 0.125;
    cfg.steps = 30;  // 30 * 0.125 far exceeds the ball radius
    const Tensor out = pgd_perturb(probe, delta, cfg);
    for (std::size_t k = 0; k < out.data.size(); ++k) {
      REQUIRE(out.data[k] == delta.data[k] - 0.5 * sgn(probe.W.data[k]));
    }
  }

  SECTION("every configuration stays inside the ball") {
    for (double eps : {0.1, 0.4, 1.0}) {
      for (double alpha_frac : {1.0, 0.3, 0.07}) {
        for (int steps : {1, 3, 25}) {
          PgdConfig cfg;
          cfg.epsilon = eps;
          cfg.alpha = eps * alpha_frac;
          cfg.steps = steps;
          const Tensor out = pgd_perturb(probe, delta, cfg);
          for (std::size_t k = 0; k < out.data.size(); ++k) {
            REQUIRE(std::abs(out.data[k] - delta.data[k]) <= eps + 1e-12);
          }
        }
      }
    }
  }

  SECTION("a component with zero weight never moves") {
    LinearProbe flat = probe;
    flat.W.data[3] = 0.0;
    PgdConfig cfg;
    const Tensor out = pgd_perturb(flat, delta, cfg);
    REQUIRE(out.data[3] == delta.data[3]);
  }

  SECTION("shape mismatch is rejected") {
    PgdConfig cfg;
    REQUIRE_THROWS_AS(pgd_perturb(probe, Tensor::zeros({4}), cfg),
                      DimensionError);
  }
}

TEST_CASE("pgd strictly lowers the probability on a trained probe") {
  Rng rng(11);
  std::vector<std::vector<Tensor>> clean, poisoned;
  gaussian_rows(rng, 60, 8, -0.25, clean);
  gaussian_rows(rng, 60, 8, 0.25, poisoned);

  ProbeTrainConfig tcfg;
  tcfg.epochs = 200;
  tcfg.l2 = 3e-2;
  tcfg.val_fraction = 0.0;
  const ProbeSet probes = train_probe_set(clean, poisoned, {0}, tcfg, 5);
  const LinearProbe& probe = probes.probes[0];

  PgdConfig cfg;
  cfg.epsilon = suggest_pgd_epsilon(poisoned);
  cfg.alpha = cfg.epsilon / 5.0;
  cfg.steps = 20;
  REQUIRE(cfg.epsilon > 0.0);

  int confidently_poisoned = 0;
  for (const auto& row : poisoned) {
    const double before = predict(probe, row[0]);
    const double after = predict(probe, pgd_perturb(probe, row[0], cfg));
    REQUIRE(after <= before);
    if (before >= 0.15) {
      ++confidently_poisoned;
      REQUIRE(after < before - 0.01);
    }
  }
  REQUIRE(confidently_poisoned >= 30);
}

TEST_CASE("epsilon suggestion is a quarter of the median max norm") {
  auto row = [](std::vector<double> v) {
    Tensor t = Tensor::zeros({static_cast<int>(v.size())});
    t.data = v;
    return t;
  };
  SECTION("even count averages the middle pair") {
    std::vector<std::vector<Tensor>> rows = {{row({1.0, -0.5})},
                                             {row({0.0, 2.0})},
                                             {row({-4.0, 1.0})},
                                             {row({8.0, -8.0})}};
    REQUIRE(suggest_pgd_epsilon(rows) == 0.25 * 3.0);
  }
  SECTION("odd count takes the middle, layers pooled") {
    std::vector<std::vector<Tensor>> rows = {
        {row({1.0}), row({2.0})}, {row({-4.0})}};
    REQUIRE(suggest_pgd_epsilon(rows) == 0.25 * 2.0);
  }
  SECTION("no deltas is an error") {
    REQUIRE_THROWS_AS(suggest_pgd_epsilon({}), InputError);
  }
}

TEST_CASE("pgd training with zero budget duplicates the poisoned set") {
  Rng rng(13);
  std::vector<std::vector<Tensor>> clean, poisoned;
  gaussian_rows(rng, 20, 6, -1.0, clean);
  gaussian_rows(rng, 20, 6, 1.0, poisoned);

  const ProbeTrainConfig tcfg;
  const ProbeSet reference = train_probe_set(clean, poisoned, {0}, tcfg, 3);

  PgdConfig pgd;
  pgd.epsilon = 0.0;
  pgd.alpha = 0.1;
  pgd.steps = 5;
  const ProbeSet hardened =
      train_pgd_probes(clean, poisoned, {0}, reference, pgd, tcfg, 9);

  std::vector<std::vector<Tensor>> doubled = poisoned;
  doubled.insert(doubled.end(), poisoned.begin(), poisoned.end());
  const ProbeSet expected =
      train_probe_set(clean, doubled, {0}, tcfg, 9, "pgd");

  REQUIRE(hardened.probes[0].W == expected.probes[0].W);
  REQUIRE(hardened.probes[0].b == expected.probes[0].b);
  REQUIRE(hardened.probes[0].training_tag == "pgd");
}

TEST_CASE("pgd training keeps poisoned accuracy near the baseline") {
  Rng rng(17);
  std::vector<std::vector<Tensor>> clean, poisoned, clean_test, poisoned_test;
  gaussian_rows(rng, 80, 8, -2.0, clean);
  gaussian_rows(rng, 80, 8, 2.0, poisoned);
  gaussian_rows(rng, 40, 8, -2.0, clean_test);
  gaussian_rows(rng, 40, 8, 2.0, poisoned_test);

  ProbeTrainConfig tcfg;
  tcfg.val_fraction = 0.0;
  const ProbeSet baseline = train_probe_set(clean, poisoned, {0}, tcfg, 3);

  PgdConfig pgd;
  pgd.epsilon = 0.5;
  pgd.alpha = 0.1;
  pgd.steps = 20;
  const ProbeSet hardened =
      train_pgd_probes(clean, poisoned, {0}, baseline, pgd, tcfg, 3);

  auto accuracy = [](const LinearProbe& p,
                     const std::vector<std::vector<Tensor>>& rows, int label) {
    double hits = 0.0;
    for (const auto& r : rows) {
      hits += (predict(p, r[0]) >= 0.5 ? 1 : 0) == label;
    }
    return hits / static_cast<double>(rows.size());
  };
  const double base_poisoned = accuracy(baseline.probes[0], poisoned_test, 1);
  const double hard_poisoned = accuracy(hardened.probes[0], poisoned_test, 1);
  REQUIRE(hard_poisoned >= base_poisoned - 0.05);

  // The hardened probe must flag the perturbed versions it trained on.
  double caught = 0.0;
  for (const auto& r : poisoned_test) {
    const Tensor adv = pgd_perturb(baseline.probes[0], r[0], pgd);
    caught += predict(hardened.probes[0], adv) >= 0.5;
  }
  REQUIRE(caught / static_cast<double>(poisoned_test.size()) >= 0.9);
}

TEST_CASE("pool partition sizes") {
  auto sizes = [](int n) {
    int tr = 0, va = 0, te = 0;
    detail::pool_partition_sizes(n, 0.6, 0.2, tr, va, te);
    return std::vector<int>{tr, va, te};
  };
  REQUIRE(sizes(3) == std::vector<int>{1, 1, 1});
  REQUIRE(sizes(4) == std::vector<int>{2, 1, 1});
  REQUIRE(sizes(5) == std::vector<int>{3, 1, 1});
  REQUIRE(sizes(10) == std::vector<int>{6, 2, 2});
  REQUIRE(sizes(12) == std::vector<int>{7, 2, 3});
}

TEST_CASE("pool config invariants") {
  PoolConfig c;
  REQUIRE_NOTHROW(c.validate());
  c.n_suffixes = 2;
  REQUIRE_THROWS_AS(c.validate(), ConfigError);
  c = PoolConfig{};
  c.train_fraction = 0.9;
  c.val_fraction = 0.2;  // no room left for test
  REQUIRE_THROWS_AS(c.validate(), ConfigError);
  c = PoolConfig{};
  c.max_retries = -1;
  REQUIRE_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("suffix pool generation against evadable probes") {
  const Vocabulary vocab = tiny_vocab();
  const ModelParams params = init_params(tiny_config(), 3);
  const ProbeSet probes = constant_probes(params.config, -10.0);
  const std::vector<PromptRecord> prompts = tiny_prompts(2);

  AttackConfig acfg;
  acfg.max_iterations = 8;
  acfg.suffix_len = 4;
  acfg.top_k = 3;
  acfg.batch = 3;

  PoolConfig pcfg;
  pcfg.n_suffixes = 3;

  const SuffixPool pool =
      build_suffix_pool(params, probes, prompts, vocab, acfg, pcfg, 21);

  REQUIRE(pool.entries.size() == 3);
  for (const PoolEntry& e : pool.entries) {
    REQUIRE_FALSE(e.failed);
    REQUIRE(e.converged);
    REQUIRE(e.success_rate == 1.0);
    REQUIRE(e.tokens.size() == 4);
    for (int tok : e.tokens) REQUIRE(vocab.suffix_eligible(tok));
    REQUIRE_FALSE(e.config_hash.empty());

    std::vector<int> ids = e.prompt_ids;
    std::sort(ids.begin(), ids.end());
    REQUIRE(ids == std::vector<int>{0, 1});
  }
  REQUIRE(pool.entries[0].tokens != pool.entries[1].tokens);
  REQUIRE(pool.entries[1].tokens != pool.entries[2].tokens);
  REQUIRE(pool.entries[0].tokens != pool.entries[2].tokens);
  REQUIRE(pool.entries[0].seed != pool.entries[1].seed);

  REQUIRE(pool.train_idx == std::vector<int>{0});
  REQUIRE(pool.val_idx == std::vector<int>{1});
  REQUIRE(pool.test_idx == std::vector<int>{2});
  REQUIRE(pool.train_suffixes().size() == 1);
  REQUIRE(pool.test_suffixes()[0] == pool.entries[2].tokens);
}

TEST_CASE("suffix pool records failures when probes cannot be evaded") {
  const Vocabulary vocab = tiny_vocab();
  const ModelParams params = init_params(tiny_config(), 3);
  // Bias +10 flags everything regardless of the suffix.
  const ProbeSet probes = constant_probes(params.config, 10.0);
  const std::vector<PromptRecord> prompts = tiny_prompts(2);

  AttackConfig acfg;
  acfg.max_iterations = 2;
  acfg.suffix_len = 4;
  acfg.top_k = 3;
  acfg.batch = 2;

  PoolConfig pcfg;
  pcfg.n_suffixes = 3;
  pcfg.max_retries = 1;

  const SuffixPool pool =
      build_suffix_pool(params, probes, prompts, vocab, acfg, pcfg, 4);
  REQUIRE(pool.entries.size() == 3);
  for (const PoolEntry& e : pool.entries) {
    REQUIRE(e.failed);
    REQUIRE(e.success_rate == 0.0);
  }
  REQUIRE(pool.train_idx.empty());
  REQUIRE(pool.val_idx.empty());
  REQUIRE(pool.test_idx.empty());

  // An unpartitioned pool cannot feed augmentation training.
  REQUIRE_THROWS_AS(
      train_suffix_augmented_probes(params, prompts, vocab, pool, 0.5,
                                    ProbeTrainConfig{}, 1),
      ConfigError);
}

TEST_CASE("suffix pool json round trip") {
  const Vocabulary vocab = tiny_vocab();
  const ModelParams params = init_params(tiny_config(), 3);
  const ProbeSet probes = constant_probes(params.config, -10.0);

  AttackConfig acfg;
  acfg.max_iterations = 8;
  acfg.suffix_len = 4;
  acfg.top_k = 3;
  acfg.batch = 3;
  PoolConfig pcfg;
  pcfg.n_suffixes = 3;
  const SuffixPool pool = build_suffix_pool(params, probes, tiny_prompts(2),
                                            vocab, acfg, pcfg, 21);

  TempFile tmp("drift_pool_test.json");
  save_pool(tmp.path, pool, vocab);
  const SuffixPool loaded = load_pool(tmp.path);
  REQUIRE(pool_to_json(loaded, vocab) == pool_to_json(pool, vocab));

  SECTION("missing fields are parse errors") {
    REQUIRE_THROWS_AS(pool_from_json(nlohmann::json{{"train", {0}}}),
                      ParseError);
  }
  SECTION("partition indices must stay in range") {
    nlohmann::json j = pool_to_json(pool, vocab);
    j["test"] = {17};
    REQUIRE_THROWS_AS(pool_from_json(j), ParseError);
  }
}

TEST_CASE("suffix augmented training") {
  const Vocabulary vocab = tiny_vocab();
  const ModelParams params = init_params(tiny_config(), 3);
  const ProbeSet probes = constant_probes(params.config, -10.0);

  AttackConfig acfg;
  acfg.max_iterations = 8;
  acfg.suffix_len = 4;
  acfg.top_k = 3;
  acfg.batch = 3;
  PoolConfig pcfg;
  pcfg.n_suffixes = 3;
  const SuffixPool pool = build_suffix_pool(params, probes, tiny_prompts(2),
                                            vocab, acfg, pcfg, 21);

  std::vector<PromptRecord> records = tiny_clean_prompts(3);
  for (const auto& rec : tiny_prompts(3)) records.push_back(rec);

  ProbeTrainConfig tcfg;
  tcfg.epochs = 50;
  tcfg.val_fraction = 0.0;

  SECTION("probability zero reduces to plain training") {
    const ProbeSet got = train_suffix_augmented_probes(params, records, vocab,
                                                       pool, 0.0, tcfg, 31);

    std::vector<std::vector<Tensor>> clean, poisoned;
    for (const auto& rec : records) {
      const RenderedPrompt rp = render(rec, vocab);
      auto row = activation_delta(params, rp.primary_only, rp.tokens);
      (rec.label == 1 ? poisoned : clean).push_back(std::move(row));
    }
    const ProbeSet expected =
        train_probe_set(clean, poisoned, params.config.probed_layers, tcfg,
                        Rng::mix(31, 1), "suffix_augmented");
    for (std::size_t i = 0; i < got.probes.size(); ++i) {
      REQUIRE(got.probes[i].W == expected.probes[i].W);
      REQUIRE(got.probes[i].b == expected.probes[i].b);
    }
    REQUIRE(got.probes[0].training_tag == "suffix_augmented");
  }

  SECTION("probability one changes the poisoned inputs") {
    const ProbeSet zero = train_suffix_augmented_probes(params, records, vocab,
                                                        pool, 0.0, tcfg, 31);
    const ProbeSet one = train_suffix_augmented_probes(params, records, vocab,
                                                       pool, 1.0, tcfg, 31);
    bool any_diff = false;
    for (std::size_t i = 0; i < one.probes.size(); ++i) {
      any_diff = any_diff || !(one.probes[i].W == zero.probes[i].W);
    }
    REQUIRE(any_diff);
  }

  SECTION("same seed reproduces the probes bit for bit") {
    const ProbeSet a = train_suffix_augmented_probes(params, records, vocab,
                                                     pool, 0.5, tcfg, 77);
    const ProbeSet b = train_suffix_augmented_probes(params, records, vocab,
                                                     pool, 0.5, tcfg, 77);
    REQUIRE(probe_set_to_json(a) == probe_set_to_json(b));
  }

  SECTION("augment probability is validated") {
    REQUIRE_THROWS_AS(train_suffix_augmented_probes(params, records, vocab,
                                                    pool, -0.1, tcfg, 1),
                      ConfigError);
    REQUIRE_THROWS_AS(train_suffix_augmented_probes(params, records, vocab,
                                                    pool, 1.5, tcfg, 1),
                      ConfigError);
  }
}

TEST_CASE("detector criteria") {
  using E = EvadeCriterion;
  REQUIRE(detects({1, 1, 1, 1, 1}, E::all_probes));
  REQUIRE_FALSE(detects({0, 1, 1, 1, 1}, E::all_probes));
  REQUIRE(detects({0, 1, 1, 1, 1}, E::deep_only));
  REQUIRE_FALSE(detects({1, 1, 0, 1, 1}, E::deep_only));
  REQUIRE(detects({1, 1, 0, 1, 0}, E::majority));
  REQUIRE_FALSE(detects({1, 0, 1, 0, 0}, E::majority));
  REQUIRE(detects({0, 1, 1}, E::majority));
  REQUIRE_FALSE(detects({0, 0, 1}, E::majority));
  REQUIRE_THROWS_AS(detects({}, E::all_probes), InputError);
}

TEST_CASE("defense evaluation tables") {
  const Vocabulary vocab = tiny_vocab();
  const ModelParams params = init_params(tiny_config(), 3);

  std::vector<PromptRecord> records = tiny_clean_prompts(4);
  for (const auto& rec : tiny_prompts(4)) records.push_back(rec);

  const std::vector<TokenSeq> suffixes = {{20, 21, 22, 23}, {24, 25, 26, 27}};
  const std::vector<EvadeCriterion> criteria = {EvadeCriterion::all_probes,
                                                EvadeCriterion::deep_only,
                                                EvadeCriterion::majority};

  SECTION("probes that always fire") {
    const DefenseReport rep = evaluate_defense(
        params, constant_probes(params.config, 10.0), records, vocab,
        suffixes, criteria);
    REQUIRE(rep.n_clean == 4);
    REQUIRE(rep.n_poisoned == 4);
    REQUIRE(rep.layers == std::vector<int>{0, 1, 2});
    for (double a : rep.clean_accuracy) REQUIRE(a == 0.0);
    for (double a : rep.poisoned_accuracy) REQUIRE(a == 1.0);
    for (double d : rep.no_suffix_detection) REQUIRE(d == 1.0);
    REQUIRE(rep.per_suffix.size() == 2);
    for (const auto& row : rep.per_suffix) {
      for (double d : row.detection) REQUIRE(d == 1.0);
    }
    REQUIRE(rep.per_suffix[0].text == vocab.decode(suffixes[0]));
  }

  SECTION("probes that never fire") {
    const DefenseReport rep = evaluate_defense(
        params, constant_probes(params.config, -10.0), records, vocab,
        suffixes, criteria);
    for (double a : rep.clean_accuracy) REQUIRE(a == 1.0);
    for (double a : rep.poisoned_accuracy) REQUIRE(a == 0.0);
    for (double d : rep.no_suffix_detection) REQUIRE(d == 0.0);
    for (const auto& row : rep.per_suffix) {
      for (double d : row.detection) REQUIRE(d == 0.0);
    }
  }

  SECTION("a silent shallow probe separates the criteria") {
    ProbeSet mixed = constant_probes(params.config, 10.0);
    mixed.probes[0].b = -10.0;  // shallowest stays benign
    const DefenseReport rep =
        evaluate_defense(params, mixed, records, vocab, suffixes, criteria);
    REQUIRE(rep.no_suffix_detection[0] == 0.0);  // all
    REQUIRE(rep.no_suffix_detection[1] == 1.0);  // deep_only
    REQUIRE(rep.no_suffix_detection[2] == 1.0);  // majority of three
  }

  SECTION("criterion ordering holds for arbitrary probes") {
    Rng rng(23);
    for (int trial = 0; trial < 3; ++trial) {
      const ProbeSet probes = random_probes(rng, params.config, 1.5);
      const DefenseReport rep =
          evaluate_defense(params, probes, records, vocab, suffixes, criteria);
      REQUIRE(rep.no_suffix_detection[1] >= rep.no_suffix_detection[0]);
      REQUIRE(rep.no_suffix_detection[2] >= rep.no_suffix_detection[0]);
      for (const auto& row : rep.per_suffix) {
        REQUIRE(row.detection[1] >= row.detection[0]);
        REQUIRE(row.detection[2] >= row.detection[0]);
      }
    }
  }

  SECTION("degenerate inputs are rejected") {
    const ProbeSet probes = constant_probes(params.config, 0.0);
    REQUIRE_THROWS_AS(
        evaluate_defense(params, probes, {}, vocab, suffixes, criteria),
        InputError);
    REQUIRE_THROWS_AS(
        evaluate_defense(params, probes, records, vocab, suffixes, {}),
        InputError);
    REQUIRE_THROWS_AS(evaluate_defense(params, probes, tiny_clean_prompts(2),
                                       vocab, suffixes, criteria),
                      InputError);
    REQUIRE_THROWS_AS(evaluate_defense(params, probes, tiny_prompts(2), vocab,
                                       suffixes, criteria),
                      InputError);
  }

  SECTION("report json carries the full table") {
    const DefenseReport rep = evaluate_defense(
        params, constant_probes(params.config, 10.0), records, vocab,
        suffixes, criteria);
    const nlohmann::json j = defense_report_to_json(rep);
    REQUIRE(j.at("criteria") ==
            nlohmann::json({"all", "deep_only", "majority"}));
    REQUIRE(j.at("per_suffix").size() == 2);
    REQUIRE(j.at("n_poisoned") == 4);
  }
}
