#pragma once

// Per-layer logistic-regression drift detectors over activation deltas.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "drift/errors.hpp"
#include "drift/rng.hpp"
#include "drift/tape.hpp"
#include "drift/tensor.hpp"

namespace drift {

struct LinearProbe {
  int layer = 0;
  Tensor W;  // rank-1, d_model
  double b = 0.0;
  std::string training_tag = "baseline";
};

struct ProbeSet {
  std::vector<LinearProbe> probes;  // ascending unique layers
  double threshold = 0.5;

  const LinearProbe& at_layer(int layer) const {
    for (const auto& p : probes) {
      if (p.layer == layer) return p;
    }
    throw InputError("ProbeSet: no probe for layer " + std::to_string(layer));
  }

  std::vector<int> layers() const {
    std::vector<int> out;
    out.reserve(probes.size());
    for (const auto& p : probes) out.push_back(p.layer);
    return out;
  }
};

inline double probe_logit(const LinearProbe& probe, const Tensor& d) {
  if (probe.W.rank() != 1 || d.rank() != 1 ||
      probe.W.shape[0] != d.shape[0]) {
    throw DimensionError("probe_logit: delta dimension " + shape_str(d) +
                         " does not match probe " + shape_str(probe.W));
  }
  double z = probe.b;
  for (int i = 0; i < d.shape[0]; ++i) z += probe.W.at(i) * d.at(i);
  return z;
}

inline double predict(const LinearProbe& probe, const Tensor& d) {
  return Tape::sigmoid_scalar(probe_logit(probe, d));
}

// d(bce(sigma(W.d+b), y_t))/dd in closed form.
inline Tensor probe_loss_gradient(const LinearProbe& probe, const Tensor& d,
                                  double y_t) {
  const double p = predict(probe, d);
  Tensor g = probe.W;
  for (double& v : g.data) v *= (p - y_t);
  return g;
}

struct ProbeTrainConfig {
  int epochs = 500;
  double lr = 0.1;
  double l2 = 1e-4;
  double val_fraction = 0.2;
};

struct ProbeTrainReport {
  std::vector<int> layers;
  std::vector<double> train_accuracy;
  std::vector<double> val_accuracy;
};

namespace detail {

struct LabeledDelta {
  const Tensor* d;
  double y;
};

inline double split_accuracy(const LinearProbe& probe,
                             const std::vector<LabeledDelta>& rows,
                             std::size_t begin, std::size_t end,
                             double threshold) {
  if (begin == end) return 0.0;
  int hit = 0;
  for (std::size_t i = begin; i < end; ++i) {
    const int pred = predict(probe, *rows[i].d) >= threshold ? 1 : 0;
    hit += pred == static_cast<int>(rows[i].y);
  }
  return double(hit) / double(end - begin);
}

}  // namespace detail

// One independent full-batch logistic regression per layer. clean[i] and
// poisoned[i] hold record i's per-layer deltas aligned with `layers`.
inline ProbeSet train_probe_set(const std::vector<std::vector<Tensor>>& clean,
                                const std::vector<std::vector<Tensor>>& poisoned,
                                const std::vector<int>& layers,
                                const ProbeTrainConfig& cfg, std::uint64_t seed,
                                const std::string& training_tag = "baseline",
                                ProbeTrainReport* report = nullptr) {
  if (clean.empty() || poisoned.empty()) {
    throw TrainingError("train_probe_set: both classes must be nonempty");
  }
  for (const auto* set : {&clean, &poisoned}) {
    for (const auto& row : *set) {
      if (row.size() != layers.size()) {
        throw DimensionError("train_probe_set: delta row arity mismatch");
      }
    }
  }

  ProbeSet out;
  if (report) *report = ProbeTrainReport{};

  for (std::size_t li = 0; li < layers.size(); ++li) {
    std::vector<detail::LabeledDelta> rows;
    rows.reserve(clean.size() + poisoned.size());
    for (const auto& row : clean) rows.push_back({&row[li], 0.0});
    for (const auto& row : poisoned) rows.push_back({&row[li], 1.0});

    Rng rng(Rng::mix(seed, static_cast<std::uint64_t>(layers[li])));
    rng.shuffle(rows);
    const auto n_val = static_cast<std::size_t>(
        std::llround(cfg.val_fraction * double(rows.size())));
    const std::size_t n_train = rows.size() - n_val;
    if (n_train == 0) throw TrainingError("train_probe_set: empty train split");

    const int d_model = rows[0].d->shape[0];
    LinearProbe probe;
    probe.layer = layers[li];
    probe.W = Tensor::zeros({d_model});
    probe.b = 0.0;
    probe.training_tag = training_tag;

    Tensor grad_w = Tensor::zeros({d_model});
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      std::fill(grad_w.data.begin(), grad_w.data.end(), 0.0);
      double grad_b = 0.0;
      for (std::size_t i = 0; i < n_train; ++i) {
        const Tensor& d = *rows[i].d;
        const double err = predict(probe, d) - rows[i].y;
        for (int k = 0; k < d_model; ++k) grad_w.at(k) += err * d.at(k);
        grad_b += err;
      }
      const double inv_n = 1.0 / double(n_train);
      for (int k = 0; k < d_model; ++k) {
        probe.W.at(k) -=
            cfg.lr * (grad_w.at(k) * inv_n + cfg.l2 * probe.W.at(k));
      }
      probe.b -= cfg.lr * grad_b * inv_n;
    }
    if (!all_finite(probe.W) || !std::isfinite(probe.b)) {
      throw NumericalError("train_probe_set: diverged at layer " +
                           std::to_string(layers[li]));
    }

    if (report) {
      report->layers.push_back(layers[li]);
      report->train_accuracy.push_back(
          detail::split_accuracy(probe, rows, 0, n_train, out.threshold));
      report->val_accuracy.push_back(detail::split_accuracy(
          probe, rows, n_train, rows.size(), out.threshold));
    }
    out.probes.push_back(std::move(probe));
  }
  return out;
}

// ---------------------------------------------------------- JSON checkpoint
// W entries are serialized as %.17g decimal strings so reload restores the
// exact bit pattern.
inline std::string double_to_string(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline double double_from_string(const std::string& s) {
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) {
    throw ParseError("probe checkpoint: malformed float '" + s + "'");
  }
  return v;
}

inline nlohmann::json probe_set_to_json(const ProbeSet& set) {
  nlohmann::json probes = nlohmann::json::array();
  for (const auto& p : set.probes) {
    nlohmann::json w = nlohmann::json::array();
    for (double v : p.W.data) w.push_back(double_to_string(v));
    probes.push_back({{"layer", p.layer},
                      {"W", std::move(w)},
                      {"b", double_to_string(p.b)},
                      {"training_tag", p.training_tag}});
  }
  return nlohmann::json{{"threshold", set.threshold},
                        {"probes", std::move(probes)}};
}

inline ProbeSet probe_set_from_json(const nlohmann::json& j) {
  ProbeSet set;
  set.threshold = j.at("threshold").get<double>();
  for (const auto& pj : j.at("probes")) {
    LinearProbe p;
    p.layer = pj.at("layer").get<int>();
    const auto& w = pj.at("W");
    p.W = Tensor::zeros({static_cast<int>(w.size())});
    for (std::size_t i = 0; i < w.size(); ++i) {
      p.W.data[i] = double_from_string(w[i].get<std::string>());
    }
    p.b = double_from_string(pj.at("b").get<std::string>());
    p.training_tag = pj.at("training_tag").get<std::string>();
    if (!all_finite(p.W)) {
      throw ParseError("probe checkpoint: non-finite weights at layer " +
                       std::to_string(p.layer));
    }
    set.probes.push_back(std::move(p));
  }
  return set;
}

inline void save_probes(const ProbeSet& set, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InputError("save_probes: cannot open " + path);
  out << probe_set_to_json(set).dump(2) << "\n";
}

inline ProbeSet load_probes(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("load_probes: cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("load_probes: " + std::string(e.what()));
  }
  return probe_set_from_json(j);
}

}  // namespace drift
