#pragma once

// Metrics and report emission: prediction matrices, attack success rates
// under the three criteria, agreement rates, fooled-count histograms,
// layer-wise misclassification, plus CSV/SVG/manifest artifact output.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "drift/attack.hpp"
#include "drift/corpus.hpp"
#include "drift/errors.hpp"
#include "drift/model.hpp"
#include "drift/probes.hpp"

namespace drift {

// ------------------------------------------------------- prediction matrix
struct PredictionMatrix {
  std::vector<int> layers;                         // ascending probe layers
  std::vector<int> prompt_ids;
  std::vector<int> labels;                         // per prompt
  std::vector<std::vector<int>> predictions;       // [prompt][layer]
  std::vector<std::vector<double>> probabilities;  // [prompt][layer]
  std::string condition;  // "no_suffix" or "suffix:<id>"

  std::size_t n_prompts() const { return prompt_ids.size(); }
  std::size_t n_layers() const { return layers.size(); }

  void validate() const {
    if (labels.size() != n_prompts() || predictions.size() != n_prompts() ||
        probabilities.size() != n_prompts()) {
      throw DimensionError("PredictionMatrix: ragged prompt axis");
    }
    for (std::size_t i = 0; i < n_prompts(); ++i) {
      if (predictions[i].size() != n_layers() ||
          probabilities[i].size() != n_layers()) {
        throw DimensionError("PredictionMatrix: ragged layer axis");
      }
    }
  }
};

// Scores every record with every probe. When a suffix is given it is
// appended to every record uniformly; mixing suffixed and plain prompts
// in one matrix is the caller's mistake to avoid.
inline PredictionMatrix score(const ModelParams& params,
                              const ProbeSet& probes,
                              const std::vector<PromptRecord>& records,
                              const Vocabulary& vocab,
                              const TokenSeq* suffix = nullptr,
                              const std::string& suffix_id = std::string()) {
  if (records.empty()) throw InputError("score: no records");
  PredictionMatrix m;
  m.layers = probes.layers();
  m.condition =
      suffix ? "suffix:" + (suffix_id.empty() ? "0" : suffix_id) : "no_suffix";
  for (const auto& rec : records) {
    const AttackPrompt x = prepare_prompt(params, render(rec, vocab));
    const std::vector<double> probs =
        probe_probabilities(params, probes, x, suffix);
    std::vector<int> preds;
    for (double p : probs) preds.push_back(p >= probes.threshold ? 1 : 0);
    m.prompt_ids.push_back(rec.id);
    m.labels.push_back(rec.label);
    m.predictions.push_back(std::move(preds));
    m.probabilities.push_back(probs);
  }
  m.validate();
  return m;
}

namespace detail {

inline void require_poisoned(const PredictionMatrix& m, const char* who) {
  m.validate();
  if (m.n_prompts() == 0) {
    throw InputError(std::string(who) + ": empty matrix");
  }
  for (int label : m.labels) {
    if (label != 1) {
      throw InputError(std::string(who) + ": matrix has non-poisoned records");
    }
  }
}

}  // namespace detail

// Fraction of poisoned prompts whose prediction row satisfies the evasion
// criterion.
inline double asr(const PredictionMatrix& m, EvadeCriterion crit) {
  detail::require_poisoned(m, "asr");
  double hits = 0.0;
  for (const auto& row : m.predictions) hits += evades(row, crit);
  return hits / static_cast<double>(m.n_prompts());
}

struct AgreementRates {
  double all_probes = 0.0;  // every probe outputs the same label
  double deep_probes = 0.0;  // every probe past the shallowest does
};

inline AgreementRates agreement_rates(const PredictionMatrix& m) {
  m.validate();
  if (m.n_prompts() == 0) throw InputError("agreement_rates: empty matrix");
  AgreementRates out;
  for (const auto& row : m.predictions) {
    bool all_same = true;
    for (int p : row) all_same &= p == row[0];
    bool deep_same = true;
    for (std::size_t l = 2; l < row.size(); ++l) deep_same &= row[l] == row[1];
    out.all_probes += all_same;
    out.deep_probes += row.size() < 2 ? 1.0 : deep_same;
  }
  out.all_probes /= static_cast<double>(m.n_prompts());
  out.deep_probes /= static_cast<double>(m.n_prompts());
  return out;
}

// Histogram over k = number of probes predicting benign per poisoned
// prompt. Bin k = |probes| is exactly the all-probes evasion mass.
inline std::vector<int> fooled_distribution(const PredictionMatrix& m) {
  detail::require_poisoned(m, "fooled_distribution");
  std::vector<int> hist(m.n_layers() + 1, 0);
  for (const auto& row : m.predictions) {
    int k = 0;
    for (int p : row) k += p == 0;
    ++hist[static_cast<std::size_t>(k)];
  }
  return hist;
}

// Per-layer misclassification: prediction differs from the record label.
inline std::vector<double> layer_misclassification(const PredictionMatrix& m) {
  m.validate();
  if (m.n_prompts() == 0) {
    throw InputError("layer_misclassification: empty matrix");
  }
  std::vector<double> rates(m.n_layers(), 0.0);
  for (std::size_t i = 0; i < m.n_prompts(); ++i) {
    for (std::size_t l = 0; l < m.n_layers(); ++l) {
      rates[l] += m.predictions[i][l] != m.labels[i];
    }
  }
  for (double& r : rates) r /= static_cast<double>(m.n_prompts());
  return rates;
}

struct LayerwiseMisclassification {
  std::vector<int> layers;
  std::vector<double> before;
  std::vector<double> after;
};

inline LayerwiseMisclassification layerwise_misclassification(
    const PredictionMatrix& before, const PredictionMatrix& after) {
  if (before.layers != after.layers) {
    throw InputError("layerwise_misclassification: layer sets differ");
  }
  if (before.prompt_ids != after.prompt_ids) {
    throw InputError("layerwise_misclassification: prompt sets differ");
  }
  LayerwiseMisclassification out;
  out.layers = before.layers;
  out.before = layer_misclassification(before);
  out.after = layer_misclassification(after);
  return out;
}

// ---------------------------------------------------------- evasion report
struct EvasionReport {
  std::vector<int> layers;
  std::vector<std::string> criteria;
  std::vector<double> asr_rates;                 // aligned with criteria
  std::vector<double> misclassification_before;  // per layer, no suffix
  std::vector<double> misclassification_after;   // per layer, suffixed
  std::vector<int> fooled_histogram;             // suffixed condition
  double agreement_all = 0.0;
  double agreement_deep = 0.0;
  int n_prompts = 0;
  std::string condition;
};

inline EvasionReport make_evasion_report(
    const PredictionMatrix& before, const PredictionMatrix& after,
    const std::vector<EvadeCriterion>& criteria) {
  if (criteria.empty()) throw InputError("make_evasion_report: no criteria");
  detail::require_poisoned(before, "make_evasion_report");
  detail::require_poisoned(after, "make_evasion_report");
  const LayerwiseMisclassification lm =
      layerwise_misclassification(before, after);

  EvasionReport rep;
  rep.layers = lm.layers;
  rep.misclassification_before = lm.before;
  rep.misclassification_after = lm.after;
  for (EvadeCriterion c : criteria) {
    rep.criteria.push_back(criterion_name(c));
    rep.asr_rates.push_back(asr(after, c));
  }
  rep.fooled_histogram = fooled_distribution(after);
  const AgreementRates ar = agreement_rates(after);
  rep.agreement_all = ar.all_probes;
  rep.agreement_deep = ar.deep_probes;
  rep.n_prompts = static_cast<int>(after.n_prompts());
  rep.condition = after.condition;
  return rep;
}

inline nlohmann::json evasion_report_to_json(const EvasionReport& rep) {
  return nlohmann::json{
      {"layers", rep.layers},
      {"criteria", rep.criteria},
      {"asr", rep.asr_rates},
      {"misclassification_before", rep.misclassification_before},
      {"misclassification_after", rep.misclassification_after},
      {"fooled_histogram", rep.fooled_histogram},
      {"agreement_all", rep.agreement_all},
      {"agreement_deep", rep.agreement_deep},
      {"n_prompts", rep.n_prompts},
      {"condition", rep.condition}};
}

// -------------------------------------------------------------- emission
namespace detail {

inline std::string format_rate(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline std::string format_coord(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out += c;
  }
  out += '"';
  return out;
}

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline void write_file(const std::filesystem::path& path,
                       const std::string& body) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("emit_report: cannot open " + path.string());
  out << body;
  if (!out) throw InputError("emit_report: write failed for " + path.string());
}

}  // namespace detail

// A deterministic grouped-bar chart, emitted as standalone SVG 1.1.
struct SvgBarChart {
  std::string title;
  std::string y_label;
  std::vector<std::string> group_labels;
  std::vector<std::string> series_labels;
  std::vector<std::vector<double>> values;  // [series][group]
};

inline std::string render_grouped_bars(const SvgBarChart& chart) {
  const std::size_t n_series = chart.series_labels.size();
  const std::size_t n_groups = chart.group_labels.size();
  if (n_series == 0 || n_groups == 0) {
    throw InputError("render_grouped_bars: empty chart");
  }
  if (chart.values.size() != n_series) {
    throw DimensionError("render_grouped_bars: series count mismatch");
  }
  for (const auto& row : chart.values) {
    if (row.size() != n_groups) {
      throw DimensionError("render_grouped_bars: group count mismatch");
    }
  }

  const double width = 800.0, height = 500.0;
  const double left = 70.0, right = 20.0, top = 50.0, bottom = 60.0;
  const double plot_w = width - left - right;
  const double plot_h = height - top - bottom;

  double y_max = 0.0;
  for (const auto& row : chart.values) {
    for (double v : row) y_max = std::max(y_max, v);
  }
  if (y_max <= 0.0) y_max = 1.0;

  static const char* palette[] = {"#4c72b0", "#dd8452", "#55a868",
                                  "#c44e52", "#8172b3", "#937860"};
  const std::size_t n_colors = sizeof(palette) / sizeof(palette[0]);

  using detail::format_coord;
  using detail::xml_escape;
  std::string svg =
      "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" "
      "width=\"800\" height=\"500\" viewBox=\"0 0 800 500\">\n";
  svg += "<rect x=\"0\" y=\"0\" width=\"800\" height=\"500\" fill=\"#ffffff\"/>\n";
  svg += "<text x=\"400\" y=\"28\" font-family=\"sans-serif\" font-size=\"18\" "
         "text-anchor=\"middle\">" + xml_escape(chart.title) + "</text>\n";

  // Horizontal gridlines with tick labels.
  for (int t = 0; t <= 5; ++t) {
    const double frac = static_cast<double>(t) / 5.0;
    const double y = top + plot_h * (1.0 - frac);
    svg += "<line x1=\"" + format_coord(left) + "\" y1=\"" + format_coord(y) +
           "\" x2=\"" + format_coord(left + plot_w) + "\" y2=\"" +
           format_coord(y) + "\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n";
    svg += "<text x=\"" + format_coord(left - 8.0) + "\" y=\"" +
           format_coord(y + 4.0) +
           "\" font-family=\"sans-serif\" font-size=\"11\" "
           "text-anchor=\"end\">" + format_coord(y_max * frac) + "</text>\n";
  }

  const double group_w = plot_w / static_cast<double>(n_groups);
  const double bar_w = group_w * 0.8 / static_cast<double>(n_series);
  for (std::size_t s = 0; s < n_series; ++s) {
    const char* color = palette[s % n_colors];
    for (std::size_t g = 0; g < n_groups; ++g) {
      const double v = std::max(0.0, chart.values[s][g]);
      const double h = plot_h * v / y_max;
      const double x = left + group_w * static_cast<double>(g) +
                       group_w * 0.1 + bar_w * static_cast<double>(s);
      const double y = top + plot_h - h;
      svg += "<rect x=\"" + format_coord(x) + "\" y=\"" + format_coord(y) +
             "\" width=\"" + format_coord(bar_w) + "\" height=\"" +
             format_coord(h) + "\" fill=\"" + color + "\"/>\n";
    }
  }

  // Axes, group labels, y label, legend.
  svg += "<line x1=\"" + format_coord(left) + "\" y1=\"" + format_coord(top) +
         "\" x2=\"" + format_coord(left) + "\" y2=\"" +
         format_coord(top + plot_h) +
         "\" stroke=\"#000000\" stroke-width=\"1\"/>\n";
  svg += "<line x1=\"" + format_coord(left) + "\" y1=\"" +
         format_coord(top + plot_h) + "\" x2=\"" + format_coord(left + plot_w) +
         "\" y2=\"" + format_coord(top + plot_h) +
         "\" stroke=\"#000000\" stroke-width=\"1\"/>\n";
  for (std::size_t g = 0; g < n_groups; ++g) {
    const double x = left + group_w * (static_cast<double>(g) + 0.5);
    svg += "<text x=\"" + format_coord(x) + "\" y=\"" +
           format_coord(top + plot_h + 20.0) +
           "\" font-family=\"sans-serif\" font-size=\"12\" "
           "text-anchor=\"middle\">" + xml_escape(chart.group_labels[g]) +
           "</text>\n";
  }
  svg += "<text x=\"16\" y=\"" + format_coord(top + plot_h / 2.0) +
         "\" font-family=\"sans-serif\" font-size=\"12\" "
         "text-anchor=\"middle\" transform=\"rotate(-90 16 " +
         format_coord(top + plot_h / 2.0) + ")\">" +
         xml_escape(chart.y_label) + "</text>\n";
  for (std::size_t s = 0; s < n_series; ++s) {
    const double y = top + 10.0 + 18.0 * static_cast<double>(s);
    svg += "<rect x=\"" + format_coord(left + plot_w - 150.0) + "\" y=\"" +
           format_coord(y - 9.0) +
           "\" width=\"12\" height=\"12\" fill=\"" +
           palette[s % n_colors] + "\"/>\n";
    svg += "<text x=\"" + format_coord(left + plot_w - 132.0) + "\" y=\"" +
           format_coord(y + 1.0) +
           "\" font-family=\"sans-serif\" font-size=\"12\">" +
           xml_escape(chart.series_labels[s]) + "</text>\n";
  }
  svg += "</svg>\n";
  return svg;
}

// Everything one experiment run wants to publish. Sections left empty are
// simply not written.
struct ReportBundle {
  struct AccuracyRow {
    std::string probes;
    int layer = 0;
    double clean = 0.0;
    double poisoned = 0.0;
  };
  struct AgreementRow {
    std::string probes;
    std::string dataset;
    double all_probes = 0.0;
    double deep_probes = 0.0;
  };
  struct AsrRow {
    std::string probes;
    std::string condition;
    std::string criterion;
    double rate = 0.0;
  };
  struct DetectionRow {
    std::string probes;
    std::string suffix;
    std::string criterion;
    double rate = 0.0;
  };
  struct BehaviorRow {
    int prompt_id = 0;
    bool changed = false;
    std::string without_suffix;
    std::string with_suffix;
  };
  struct HistogramSeries {
    std::string label;
    std::vector<int> counts;
  };
  struct LayerSeries {
    std::string label;
    std::vector<int> layers;
    std::vector<double> rates;
  };

  std::vector<AccuracyRow> accuracy;
  std::vector<AgreementRow> agreement;
  std::vector<AsrRow> asr_rows;
  std::vector<DetectionRow> detection;
  std::vector<BehaviorRow> behavior;
  std::vector<HistogramSeries> fooled;
  std::vector<LayerSeries> misclassification;
  nlohmann::json run_info;  // config hash, seeds; copied into the manifest
};

// Writes CSV tables, SVG charts, and a manifest into dir. Returns the file
// names written (manifest last). Fixed-precision formatting keeps reruns
// byte-identical.
inline std::vector<std::string> emit_report(const ReportBundle& bundle,
                                            const std::string& dir) {
  namespace fs = std::filesystem;
  using detail::csv_escape;
  using detail::format_rate;
  fs::create_directories(dir);
  std::vector<std::string> files;

  auto emit_csv = [&](const std::string& name, const std::string& header,
                      const std::vector<std::string>& rows) {
    std::string body = header + "\r\n";
    for (const auto& r : rows) body += r + "\r\n";
    detail::write_file(fs::path(dir) / name, body);
    files.push_back(name);
  };

  if (!bundle.accuracy.empty()) {
    std::vector<std::string> rows;
    for (const auto& r : bundle.accuracy) {
      rows.push_back(csv_escape(r.probes) + "," + std::to_string(r.layer) +
                     "," + format_rate(r.clean) + "," +
                     format_rate(r.poisoned));
    }
    emit_csv("accuracy.csv", "probes,layer,clean_accuracy,poisoned_accuracy",
             rows);
  }
  if (!bundle.agreement.empty()) {
    std::vector<std::string> rows;
    for (const auto& r : bundle.agreement) {
      rows.push_back(csv_escape(r.probes) + "," + csv_escape(r.dataset) + "," +
                     format_rate(r.all_probes) + "," +
                     format_rate(r.deep_probes));
    }
    emit_csv("agreement.csv", "probes,dataset,all_probes_agree,deep_probes_agree",
             rows);
  }
  if (!bundle.asr_rows.empty()) {
    std::vector<std::string> rows;
    for (const auto& r : bundle.asr_rows) {
      rows.push_back(csv_escape(r.probes) + "," + csv_escape(r.condition) +
                     "," + csv_escape(r.criterion) + "," +
                     format_rate(r.rate));
    }
    emit_csv("asr.csv", "probes,condition,criterion,asr", rows);
  }
  if (!bundle.detection.empty()) {
    std::vector<std::string> rows;
    for (const auto& r : bundle.detection) {
      rows.push_back(csv_escape(r.probes) + "," + csv_escape(r.suffix) + "," +
                     csv_escape(r.criterion) + "," + format_rate(r.rate));
    }
    emit_csv("detection.csv", "probes,suffix,criterion,detection", rows);
  }
  if (!bundle.behavior.empty()) {
    std::vector<std::string> rows;
    for (const auto& r : bundle.behavior) {
      rows.push_back(std::to_string(r.prompt_id) + "," +
                     (r.changed ? "true" : "false") + "," +
                     csv_escape(r.without_suffix) + "," +
                     csv_escape(r.with_suffix));
    }
    emit_csv("behavior.csv", "prompt_id,response_changed,without_suffix,with_suffix",
             rows);
  }

  if (!bundle.fooled.empty()) {
    SvgBarChart chart;
    chart.title = "Prompts by number of probes predicting benign";
    chart.y_label = "prompts";
    const std::size_t bins = bundle.fooled.front().counts.size();
    for (const auto& s : bundle.fooled) {
      if (s.counts.size() != bins) {
        throw InputError("emit_report: fooled histogram bin mismatch");
      }
      chart.series_labels.push_back(s.label);
      std::vector<double> vals(s.counts.begin(), s.counts.end());
      chart.values.push_back(std::move(vals));
    }
    for (std::size_t k = 0; k < bins; ++k) {
      chart.group_labels.push_back(std::to_string(k));
    }
    detail::write_file(fs::path(dir) / "fooled_histogram.svg",
                       render_grouped_bars(chart));
    files.push_back("fooled_histogram.svg");
  }
  if (!bundle.misclassification.empty()) {
    SvgBarChart chart;
    chart.title = "Layer-wise misclassification";
    chart.y_label = "rate";
    const std::vector<int>& layers = bundle.misclassification.front().layers;
    for (const auto& s : bundle.misclassification) {
      if (s.layers != layers) {
        throw InputError("emit_report: misclassification layer mismatch");
      }
      if (s.rates.size() != layers.size()) {
        throw InputError("emit_report: misclassification rate arity");
      }
      chart.series_labels.push_back(s.label);
      chart.values.push_back(s.rates);
    }
    for (int layer : layers) {
      chart.group_labels.push_back("layer " + std::to_string(layer));
    }
    detail::write_file(fs::path(dir) / "misclassification.svg",
                       render_grouped_bars(chart));
    files.push_back("misclassification.svg");
  }

  nlohmann::json manifest{{"run", bundle.run_info.is_null()
                                      ? nlohmann::json::object()
                                      : bundle.run_info},
                          {"files", files}};
  detail::write_file(fs::path(dir) / "manifest.json", manifest.dump(2) + "\n");
  files.push_back("manifest.json");
  return files;
}

}  // namespace drift
