// Command-line driver. Every subcommand maps onto one pipeline stage; the
// stages talk to each other through artifacts in the run directory, so any
// prefix of the pipeline can be rerun or resumed.
#include <cstdint>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "drift/config.hpp"
#include "drift/pipeline.hpp"

namespace {

struct CliState {
  std::string config_file;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  bool json = false;
  bool force = false;

  // Precedence: command-line flags over config file over built-in defaults.
  drift::ExperimentConfig resolve() const {
    drift::ExperimentConfig cfg;
    if (!config_file.empty()) {
      cfg = drift::ExperimentConfig::from_file(config_file);
    }
    if (seed) cfg.seed = *seed;
    if (out_dir) cfg.out_dir = *out_dir;
    cfg.validate();
    return cfg;
  }
};

void print_summary(const nlohmann::json& summary, bool as_json) {
  if (as_json) {
    std::cout << summary.dump(2) << "\n";
    return;
  }
  std::cout << "[" << summary.value("stage", "?") << "]\n";
  for (const auto& [key, value] : summary.items()) {
    if (key == "stage") continue;
    std::cout << "  " << key << " = "
              << (value.is_string() ? value.get<std::string>() : value.dump())
              << "\n";
  }
}

using Stage =
    std::function<nlohmann::json(const drift::ExperimentConfig&, bool)>;

const std::vector<std::pair<const char*, const char*>> kStageOrder = {
    {"gen-corpus", "generate the prompt corpus and vocabulary"},
    {"train-lm", "train the language model on the training prompts"},
    {"train-probes", "fit per-layer detection probes on activation deltas"},
    {"attack", "optimize a universal evasion suffix against the probes"},
    {"build-pool", "build a pool of independently optimized suffixes"},
    {"defend-pgd", "retrain probes on PGD-perturbed activation deltas"},
    {"defend-suffix", "retrain probes with suffix-augmented poisoned prompts"},
    {"evaluate", "score probe sets, attack, and defenses on the test split"},
    {"generate", "record continuations with and without the suffix"},
    {"attack-hardened", "rerun the attack against suffix-augmented probes"},
    {"report", "emit CSV tables, SVG charts, and a manifest"},
};

Stage stage_fn(const std::string& name) {
  if (name == "gen-corpus") return drift::run_gen_corpus;
  if (name == "train-lm") return drift::run_train_lm;
  if (name == "train-probes") return drift::run_train_probes;
  if (name == "attack") return drift::run_attack;
  if (name == "build-pool") return drift::run_build_pool;
  if (name == "defend-pgd") return drift::run_defend_pgd;
  if (name == "defend-suffix") return drift::run_defend_suffix;
  if (name == "evaluate") return drift::run_evaluate;
  if (name == "generate") return drift::run_generate;
  if (name == "attack-hardened") return drift::run_attack_hardened;
  if (name == "report") return drift::run_report;
  throw drift::InputError("unknown stage " + name);
}

void add_common(CLI::App* sub, CliState& st) {
  sub->add_option("--config", st.config_file,
                  "experiment config file (TOML-style)")
      ->check(CLI::ExistingFile);
  sub->add_option("--seed", st.seed, "override the run seed");
  sub->add_option("--out-dir", st.out_dir, "override the run directory");
  sub->add_flag("--json", st.json, "print the stage summary as JSON");
  sub->add_flag("--force", st.force,
                "accept artifacts whose config hash does not match");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "drift-evade: universal-suffix evasion of activation-delta probes, "
      "with PGD and suffix-augmentation defenses"};
  app.require_subcommand(1);

  CliState st;
  for (const auto& [name, help] : kStageOrder) {
    CLI::App* sub = app.add_subcommand(name, help);
    add_common(sub, st);
    sub->callback([&st, name = std::string(name)] {
      print_summary(stage_fn(name)(st.resolve(), st.force), st.json);
    });
  }
  CLI::App* all = app.add_subcommand("run-all", "run every stage in order");
  add_common(all, st);
  all->callback([&st] {
    const drift::ExperimentConfig cfg = st.resolve();
    for (const auto& [name, help] : kStageOrder) {
      print_summary(stage_fn(name)(cfg, st.force), st.json);
    }
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
