#pragma once

// Experiment configuration: a small TOML-style file format (sections,
// scalars, flat arrays, comments), strict unknown-key rejection, and a
// stable hash of the resolved configuration that artifacts embed.

#include <cctype>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "drift/attack.hpp"
#include "drift/corpus.hpp"
#include "drift/defense.hpp"
#include "drift/errors.hpp"
#include "drift/hash.hpp"
#include "drift/model.hpp"
#include "drift/probes.hpp"

namespace drift {

namespace toml {

inline std::string strip_comment(const std::string& line) {
  bool in_string = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (c == '"' && (i == 0 || line[i - 1] != '\\')) in_string = !in_string;
    if (c == '#' && !in_string) return line.substr(0, i);
  }
  return line;
}

inline std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

inline bool valid_name(const std::string& s) {
  if (s.empty()) return false;
  for (char c : s) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_') return false;
  }
  return true;
}

inline nlohmann::json parse_scalar(const std::string& raw, int line_no) {
  const std::string tok = trim(raw);
  auto fail = [&](const std::string& why) -> nlohmann::json {
    throw ParseError("config line " + std::to_string(line_no) + ": " + why);
  };
  if (tok.empty()) return fail("missing value");
  if (tok == "true") return true;
  if (tok == "false") return false;
  if (tok.front() == '"') {
    if (tok.size() < 2 || tok.back() != '"') {
      return fail("unterminated string");
    }
    std::string out;
    for (std::size_t i = 1; i + 1 < tok.size(); ++i) {
      if (tok[i] == '\\') {
        if (i + 2 >= tok.size()) return fail("dangling escape");
        const char e = tok[++i];
        if (e == 'n') out += '\n';
        else if (e == 't') out += '\t';
        else if (e == '"') out += '"';
        else if (e == '\\') out += '\\';
        else return fail("unknown escape");
      } else if (tok[i] == '"') {
        return fail("stray quote inside string");
      } else {
        out += tok[i];
      }
    }
    return out;
  }
  if (tok.front() == '[') {
    if (tok.back() != ']') return fail("unterminated array");
    nlohmann::json arr = nlohmann::json::array();
    const std::string inner = trim(tok.substr(1, tok.size() - 2));
    if (inner.empty()) return arr;
    std::size_t start = 0;
    bool in_string = false;
    for (std::size_t i = 0; i <= inner.size(); ++i) {
      if (i < inner.size() && inner[i] == '"' &&
          (i == 0 || inner[i - 1] != '\\')) {
        in_string = !in_string;
      }
      if (i == inner.size() || (inner[i] == ',' && !in_string)) {
        arr.push_back(parse_scalar(inner.substr(start, i - start), line_no));
        start = i + 1;
      }
    }
    return arr;
  }
  // Number: integer unless it carries a decimal point or exponent.
  const bool is_float = tok.find_first_of(".eE") != std::string::npos;
  try {
    std::size_t used = 0;
    if (is_float) {
      const double v = std::stod(tok, &used);
      if (used == tok.size()) return v;
    } else {
      const long long v = std::stoll(tok, &used);
      if (used == tok.size()) return v;
    }
  } catch (const std::invalid_argument&) {
  } catch (const std::out_of_range&) {
  }
  return fail("bad number '" + tok + "'");
}

// Sections one level deep, keys and scalar/array values, '#' comments.
inline nlohmann::json parse(const std::string& text) {
  nlohmann::json doc = nlohmann::json::object();
  nlohmann::json* section = &doc;
  std::string section_name;
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = trim(strip_comment(raw));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') {
        throw ParseError("config line " + std::to_string(line_no) +
                         ": unterminated section header");
      }
      section_name = trim(line.substr(1, line.size() - 2));
      if (!valid_name(section_name)) {
        throw ParseError("config line " + std::to_string(line_no) +
                         ": bad section name");
      }
      if (!doc.contains(section_name)) {
        doc[section_name] = nlohmann::json::object();
      }
      section = &doc[section_name];
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ParseError("config line " + std::to_string(line_no) +
                       ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    if (!valid_name(key)) {
      throw ParseError("config line " + std::to_string(line_no) +
                       ": bad key name '" + key + "'");
    }
    if (section->contains(key)) {
      const std::string where =
          section_name.empty() ? key : section_name + "." + key;
      throw ParseError("config line " + std::to_string(line_no) +
                       ": duplicate key '" + where + "'");
    }
    (*section)[key] = parse_scalar(line.substr(eq + 1), line_no);
  }
  return doc;
}

}  // namespace toml

namespace detail {

inline int cfg_int(const nlohmann::json& v, const std::string& where) {
  if (!v.is_number_integer()) {
    throw ConfigError("config key '" + where + "' must be an integer");
  }
  return v.get<int>();
}

inline std::uint64_t cfg_u64(const nlohmann::json& v,
                             const std::string& where) {
  if (!v.is_number_integer() || v.get<long long>() < 0) {
    throw ConfigError("config key '" + where +
                      "' must be a non-negative integer");
  }
  return v.get<std::uint64_t>();
}

inline double cfg_double(const nlohmann::json& v, const std::string& where) {
  if (!v.is_number()) {
    throw ConfigError("config key '" + where + "' must be a number");
  }
  return v.get<double>();
}

inline std::string cfg_string(const nlohmann::json& v,
                              const std::string& where) {
  if (!v.is_string()) {
    throw ConfigError("config key '" + where + "' must be a string");
  }
  return v.get<std::string>();
}

inline std::vector<int> cfg_int_list(const nlohmann::json& v,
                                     const std::string& where) {
  if (!v.is_array()) {
    throw ConfigError("config key '" + where + "' must be an array");
  }
  std::vector<int> out;
  for (const auto& e : v) out.push_back(cfg_int(e, where));
  return out;
}

inline std::vector<double> cfg_double_list(const nlohmann::json& v,
                                           const std::string& where) {
  if (!v.is_array()) {
    throw ConfigError("config key '" + where + "' must be an array");
  }
  std::vector<double> out;
  for (const auto& e : v) out.push_back(cfg_double(e, where));
  return out;
}

inline std::vector<std::string> cfg_string_list(const nlohmann::json& v,
                                                const std::string& where) {
  if (!v.is_array()) {
    throw ConfigError("config key '" + where + "' must be an array");
  }
  std::vector<std::string> out;
  for (const auto& e : v) out.push_back(cfg_string(e, where));
  return out;
}

}  // namespace detail

struct ExperimentConfig {
  std::uint64_t seed = 42;
  std::string out_dir = "runs/default";

  ModelConfig model;

  CorpusCounts counts;
  double trigger_rate = 0.3;
  int suffix_tokens = 64;

  LmTrainConfig lm;
  ProbeTrainConfig probes;

  AttackConfig attack;
  int attack_train_prompts = 8;

  int pool_suffixes = 12;
  double pool_train_fraction = 0.6;
  double pool_val_fraction = 0.2;
  int pool_max_retries = 3;
  int pool_prompts = 4;
  int pool_max_iterations = 150;

  double pgd_epsilon = 0.0;  // <= 0 means scale from the data
  double pgd_alpha = 0.0;    // <= 0 means epsilon / 5
  int pgd_steps = 20;

  double augment_prob = 0.5;

  std::vector<std::string> criteria = {"all", "deep_only", "majority"};
  int behavior_prompts = 20;
  int max_new_tokens = 24;
  int hardened_attack_iterations = 100;
  int hardened_attack_prompts = 4;

  ExperimentConfig() {
    lm.epochs = 5;
    probes.epochs = 10000;
    probes.lr = 0.5;
    attack.batch = 32;
  }

  void apply(const nlohmann::json& doc);
  void validate() const;
  nlohmann::json to_json() const;
  std::string hash() const;

  PoolConfig pool_config() const {
    PoolConfig p;
    p.n_suffixes = pool_suffixes;
    p.train_fraction = pool_train_fraction;
    p.val_fraction = pool_val_fraction;
    p.max_retries = pool_max_retries;
    return p;
  }

  std::vector<EvadeCriterion> criteria_list() const {
    std::vector<EvadeCriterion> out;
    for (const auto& name : criteria) out.push_back(criterion_from_string(name));
    return out;
  }

  static ExperimentConfig from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("config: cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    ExperimentConfig cfg;
    cfg.apply(toml::parse(buf.str()));
    return cfg;
  }
};

inline void ExperimentConfig::apply(const nlohmann::json& doc) {
  using detail::cfg_double;
  using detail::cfg_double_list;
  using detail::cfg_int;
  using detail::cfg_int_list;
  using detail::cfg_string;
  using detail::cfg_string_list;
  using detail::cfg_u64;

  for (const auto& [section, body] : doc.items()) {
    if (!body.is_object()) {
      // Top-level scalar keys.
      if (section == "seed") {
        seed = cfg_u64(body, "seed");
      } else if (section == "out_dir") {
        out_dir = cfg_string(body, "out_dir");
      } else {
        throw ConfigError("unknown config key '" + section + "'");
      }
      continue;
    }
    for (const auto& [key, value] : body.items()) {
      const std::string where = section + "." + key;
      if (section == "model") {
        if (key == "vocab_size") model.vocab_size = cfg_int(value, where);
        else if (key == "d_model") model.d_model = cfg_int(value, where);
        else if (key == "n_layers") model.n_layers = cfg_int(value, where);
        else if (key == "n_heads") model.n_heads = cfg_int(value, where);
        else if (key == "d_ff") model.d_ff = cfg_int(value, where);
        else if (key == "max_seq_len") model.max_seq_len = cfg_int(value, where);
        else if (key == "probed_layers") model.probed_layers = cfg_int_list(value, where);
        else if (key == "pooling") {
          const std::string p = cfg_string(value, where);
          if (p == "final_token") model.pooling = Pooling::final_token;
          else if (p == "mean") model.pooling = Pooling::mean;
          else throw ConfigError("config key 'model.pooling' must be final_token or mean");
        }
        else throw ConfigError("unknown config key '" + where + "'");
      } else if (section == "corpus") {
        if (key == "clean_train") counts.n_clean_train = cfg_int(value, where);
        else if (key == "poisoned_train") counts.n_poisoned_train = cfg_int(value, where);
        else if (key == "clean_test") counts.n_clean_test = cfg_int(value, where);
        else if (key == "poisoned_test") counts.n_poisoned_test = cfg_int(value, where);
        else if (key == "trigger_rate") trigger_rate = cfg_double(value, where);
        else if (key == "suffix_tokens") suffix_tokens = cfg_int(value, where);
        else throw ConfigError("unknown config key '" + where + "'");
      } else if (section == "lm") {
        if (key == "epochs") lm.epochs = cfg_int(value, where);
        else if (key == "lr") lm.lr = cfg_double(value, where);
        else if (key == "batch_size") lm.batch_size = cfg_int(value, where);
        else if (key == "clip_norm") lm.clip_norm = cfg_double(value, where);
        else throw ConfigError("unknown config key '" + where + "'");
      } else if (section == "probes") {
        if (key == "epochs") probes.epochs = cfg_int(value, where);
        else if (key == "lr") probes.lr = cfg_double(value, where);
        else if (key == "l2") probes.l2 = cfg_double(value, where);
        else if (key == "val_fraction") probes.val_fraction = cfg_double(value, where);
        else throw ConfigError("unknown config key '" + where + "'");
      } else if (section == "attack") {
        if (key == "max_iterations") attack.max_iterations = cfg_int(value, where);
        else if (key == "tau") attack.tau = cfg_double(value, where);
        else if (key == "tau_exp") attack.tau_exp = cfg_double(value, where);
        else if (key == "confidence") attack.confidence = cfg_double(value, where);
        else if (key == "suffix_len") attack.suffix_len = cfg_int(value, where);
        else if (key == "top_k") attack.top_k = cfg_int(value, where);
        else if (key == "batch") attack.batch = cfg_int(value, where);
        else if (key == "lambdas") attack.lambdas = cfg_double_list(value, where);
        else if (key == "y_target") attack.y_target = cfg_double(value, where);
        else if (key == "train_prompts") attack_train_prompts = cfg_int(value, where);
        else throw ConfigError("unknown config key '" + where + "'");
      } else if (section == "pool") {
        if (key == "n_suffixes") pool_suffixes = cfg_int(value, where);
        else if (key == "train_fraction") pool_train_fraction = cfg_double(value, where);
        else if (key == "val_fraction") pool_val_fraction = cfg_double(value, where);
        else if (key == "max_retries") pool_max_retries = cfg_int(value, where);
        else if (key == "prompts") pool_prompts = cfg_int(value, where);
        else if (key == "max_iterations") pool_max_iterations = cfg_int(value, where);
        else throw ConfigError("unknown config key '" + where + "'");
      } else if (section == "pgd") {
        if (key == "epsilon") pgd_epsilon = cfg_double(value, where);
        else if (key == "alpha") pgd_alpha = cfg_double(value, where);
        else if (key == "steps") pgd_steps = cfg_int(value, where);
        else throw ConfigError("unknown config key '" + where + "'");
      } else if (section == "defense") {
        if (key == "augment_prob") augment_prob = cfg_double(value, where);
        else throw ConfigError("unknown config key '" + where + "'");
      } else if (section == "eval") {
        if (key == "criteria") criteria = cfg_string_list(value, where);
        else if (key == "behavior_prompts") behavior_prompts = cfg_int(value, where);
        else if (key == "max_new_tokens") max_new_tokens = cfg_int(value, where);
        else if (key == "hardened_attack_iterations") hardened_attack_iterations = cfg_int(value, where);
        else if (key == "hardened_attack_prompts") hardened_attack_prompts = cfg_int(value, where);
        else throw ConfigError("unknown config key '" + where + "'");
      } else {
        throw ConfigError("unknown config section '" + section + "'");
      }
    }
  }
}

inline void ExperimentConfig::validate() const {
  model.validate();
  attack.validate();
  pool_config().validate();
  if (counts.n_clean_train < 1 || counts.n_poisoned_train < 1 ||
      counts.n_clean_test < 1 || counts.n_poisoned_test < 1) {
    throw ConfigError("corpus counts must be positive");
  }
  if (!(trigger_rate >= 0.0 && trigger_rate <= 1.0)) {
    throw ConfigError("corpus.trigger_rate must lie in [0, 1]");
  }
  if (suffix_tokens < 1) throw ConfigError("corpus.suffix_tokens >= 1");
  if (lm.epochs < 0) throw ConfigError("lm.epochs >= 0");
  if (probes.epochs < 1) throw ConfigError("probes.epochs >= 1");
  if (!(probes.val_fraction >= 0.0 && probes.val_fraction < 1.0)) {
    throw ConfigError("probes.val_fraction must lie in [0, 1)");
  }
  if (attack_train_prompts < 1) throw ConfigError("attack.train_prompts >= 1");
  if (pool_prompts < 1) throw ConfigError("pool.prompts >= 1");
  if (pool_max_iterations < 1) throw ConfigError("pool.max_iterations >= 1");
  if (pgd_steps < 1) throw ConfigError("pgd.steps >= 1");
  if (pgd_epsilon > 0.0 && pgd_alpha > pgd_epsilon) {
    throw ConfigError("pgd.alpha must not exceed pgd.epsilon");
  }
  if (!(augment_prob >= 0.0 && augment_prob <= 1.0)) {
    throw ConfigError("defense.augment_prob must lie in [0, 1]");
  }
  if (criteria.empty()) throw ConfigError("eval.criteria must be nonempty");
  for (const auto& name : criteria) criterion_from_string(name);
  if (behavior_prompts < 0) throw ConfigError("eval.behavior_prompts >= 0");
  if (max_new_tokens < 1) throw ConfigError("eval.max_new_tokens >= 1");
  if (hardened_attack_iterations < 0) {
    throw ConfigError("eval.hardened_attack_iterations >= 0");
  }
  if (hardened_attack_prompts < 1) {
    throw ConfigError("eval.hardened_attack_prompts >= 1");
  }
  if (attack_train_prompts > counts.n_poisoned_train ||
      pool_prompts > counts.n_poisoned_train) {
    throw ConfigError("attack prompt counts exceed poisoned train records");
  }
}

inline nlohmann::json ExperimentConfig::to_json() const {
  return nlohmann::json{
      {"seed", seed},
      {"out_dir", out_dir},
      {"model",
       {{"vocab_size", model.vocab_size},
        {"d_model", model.d_model},
        {"n_layers", model.n_layers},
        {"n_heads", model.n_heads},
        {"d_ff", model.d_ff},
        {"max_seq_len", model.max_seq_len},
        {"pooling", model.pooling == Pooling::final_token ? "final_token" : "mean"},
        {"probed_layers", model.probed_layers}}},
      {"corpus",
       {{"clean_train", counts.n_clean_train},
        {"poisoned_train", counts.n_poisoned_train},
        {"clean_test", counts.n_clean_test},
        {"poisoned_test", counts.n_poisoned_test},
        {"trigger_rate", trigger_rate},
        {"suffix_tokens", suffix_tokens}}},
      {"lm",
       {{"epochs", lm.epochs},
        {"lr", lm.lr},
        {"batch_size", lm.batch_size},
        {"clip_norm", lm.clip_norm}}},
      {"probes",
       {{"epochs", probes.epochs},
        {"lr", probes.lr},
        {"l2", probes.l2},
        {"val_fraction", probes.val_fraction}}},
      {"attack",
       {{"max_iterations", attack.max_iterations},
        {"tau", attack.tau},
        {"tau_exp", attack.tau_exp},
        {"confidence", attack.confidence},
        {"suffix_len", attack.suffix_len},
        {"top_k", attack.top_k},
        {"batch", attack.batch},
        {"lambdas", attack.lambdas},
        {"y_target", attack.y_target},
        {"train_prompts", attack_train_prompts}}},
      {"pool",
       {{"n_suffixes", pool_suffixes},
        {"train_fraction", pool_train_fraction},
        {"val_fraction", pool_val_fraction},
        {"max_retries", pool_max_retries},
        {"prompts", pool_prompts},
        {"max_iterations", pool_max_iterations}}},
      {"pgd",
       {{"epsilon", pgd_epsilon}, {"alpha", pgd_alpha}, {"steps", pgd_steps}}},
      {"defense", {{"augment_prob", augment_prob}}},
      {"eval",
       {{"criteria", criteria},
        {"behavior_prompts", behavior_prompts},
        {"max_new_tokens", max_new_tokens},
        {"hardened_attack_iterations", hardened_attack_iterations},
        {"hardened_attack_prompts", hardened_attack_prompts}}}};
}

// Hash over the resolved configuration. The artifact directory is
// excluded: moving outputs does not change the experiment.
inline std::string ExperimentConfig::hash() const {
  nlohmann::json j = to_json();
  j.erase("out_dir");
  return fnv1a64_hex(j.dump());
}

}  // namespace drift
