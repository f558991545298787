#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>

#include "drift/probes.hpp"

using namespace drift;

namespace {

Tensor unit(int dim, int axis, double scale = 1.0) {
  Tensor t = Tensor::zeros({dim});
  t.at(axis) = scale;
  return t;
}

// Gaussian cloud around center*e0, one per-layer row per sample.
std::vector<std::vector<Tensor>> gaussian_rows(Rng& rng, int n, int dim,
                                               double center, double sigma) {
  std::vector<std::vector<Tensor>> out;
  for (int i = 0; i < n; ++i) {
    Tensor d = Tensor::zeros({dim});
    d.at(0) = center + rng.normal(0.0, sigma);
    for (int k = 1; k < dim; ++k) d.at(k) = rng.normal(0.0, sigma);
    out.push_back({std::move(d)});
  }
  return out;
}

}  // namespace

TEST_CASE("predict basics") {
  LinearProbe p;
  p.W = Tensor::zeros({4});
  p.b = 0.0;
  REQUIRE(predict(p, Tensor::zeros({4})) == 0.5);

  LinearProbe q;
  q.W = Tensor::from({4}, {1.5, -2.0, 0.25, 9.0});
  q.b = 0.0;
  REQUIRE(predict(q, Tensor::zeros({4})) == 0.5);

  LinearProbe r;
  r.W = unit(4, 0, 10.0);
  r.b = 0.0;
  const double p10 = predict(r, unit(4, 0));
  REQUIRE(p10 == Catch::Approx(1.0 / (1.0 + std::exp(-10.0))).epsilon(1e-15));
  REQUIRE(p10 == Catch::Approx(0.9999546021312976).epsilon(1e-12));

  REQUIRE_THROWS_AS(predict(r, Tensor::zeros({5})), DimensionError);
}

TEST_CASE("threshold crossing is invariant under positive rescaling") {
  Rng rng(77);
  for (int trial = 0; trial < 50; ++trial) {
    LinearProbe p;
    p.W = Tensor::zeros({6});
    for (double& v : p.W.data) v = rng.normal();
    p.b = rng.normal();
    Tensor d = Tensor::zeros({6});
    for (double& v : d.data) v = rng.normal();

    const double c = std::exp(rng.normal());  // any c > 0
    LinearProbe scaled = p;
    for (double& v : scaled.W.data) v *= c;
    scaled.b *= c;
    REQUIRE((predict(p, d) >= 0.5) == (predict(scaled, d) >= 0.5));
  }
}

TEST_CASE("probe_loss_gradient closed form") {
  SECTION("p equal to target gives zero") {
    LinearProbe p;
    p.W = Tensor::from({3}, {2.0, -1.0, 0.5});
    p.b = 0.0;
    const Tensor g = probe_loss_gradient(p, Tensor::zeros({3}), 0.5);
    for (double v : g.data) REQUIRE(v == 0.0);
  }
  SECTION("zero weights give zero") {
    LinearProbe p;
    p.W = Tensor::zeros({3});
    p.b = 1.3;
    const Tensor g = probe_loss_gradient(p, Tensor::from({3}, {1, 2, 3}), 0.0);
    for (double v : g.data) REQUIRE(v == 0.0);
  }
  SECTION("matches finite differences of the bce loss") {
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
      LinearProbe p;
      p.W = Tensor::zeros({5});
      for (double& v : p.W.data) v = rng.normal();
      p.b = 0.3 * rng.normal();
      Tensor d = Tensor::zeros({5});
      for (double& v : d.data) v = 0.5 * rng.normal();
      const double y_t = trial % 2 ? 1.0 : 0.0;

      const Tensor g = probe_loss_gradient(p, d, y_t);
      const double h = 1e-6;
      for (int k = 0; k < 5; ++k) {
        Tensor hi = d, lo = d;
        hi.at(k) += h;
        lo.at(k) -= h;
        const double fd = (Tape::bce_scalar(predict(p, hi), y_t) -
                           Tape::bce_scalar(predict(p, lo), y_t)) /
                          (2.0 * h);
        const double denom = std::max({std::fabs(fd), std::fabs(g.at(k)), 1e-6});
        REQUIRE(std::fabs(fd - g.at(k)) / denom < 1e-6);
      }
    }
  }
}

TEST_CASE("training separates two well-split gaussians") {
  Rng rng(11);
  auto clean = gaussian_rows(rng, 200, 8, -3.0, 0.5);
  auto poisoned = gaussian_rows(rng, 200, 8, 3.0, 0.5);
  const auto clean_before = clean;

  ProbeTrainReport report;
  const ProbeSet set = train_probe_set(clean, poisoned, {0},
                                       ProbeTrainConfig{}, 42, "baseline",
                                       &report);
  REQUIRE(set.probes.size() == 1);
  REQUIRE(report.val_accuracy.at(0) >= 0.99);
  REQUIRE(report.train_accuracy.at(0) >= 0.99);
  REQUIRE(clean == clean_before);  // inputs untouched

  // Orientation: the weight vector points from clean toward poisoned.
  REQUIRE(set.probes[0].W.at(0) > 0.0);
}

TEST_CASE("flipping labels negates the learned weights") {
  Rng rng(13);
  const auto a = gaussian_rows(rng, 120, 6, -2.0, 0.8);
  const auto b = gaussian_rows(rng, 120, 6, 2.0, 0.8);

  ProbeTrainConfig cfg;
  cfg.val_fraction = 0.0;  // identical train sets either way round
  const ProbeSet fwd = train_probe_set(a, b, {0}, cfg, 9);
  const ProbeSet rev = train_probe_set(b, a, {0}, cfg, 9);

  // Class-mean separation direction: mu1 - mu0 for the forward labeling.
  Tensor mu_diff = Tensor::zeros({6});
  for (const auto& row : b) {
    for (int k = 0; k < 6; ++k) mu_diff.at(k) += row[0].at(k) / double(b.size());
  }
  for (const auto& row : a) {
    for (int k = 0; k < 6; ++k) mu_diff.at(k) -= row[0].at(k) / double(a.size());
  }
  double fwd_proj = 0.0, rev_proj = 0.0;
  for (int k = 0; k < 6; ++k) {
    fwd_proj += fwd.probes[0].W.at(k) * mu_diff.at(k);
    rev_proj += rev.probes[0].W.at(k) * mu_diff.at(k);
  }
  REQUIRE(fwd_proj > 0.0);
  REQUIRE(rev_proj < 0.0);

  for (int k = 0; k < 6; ++k) {
    REQUIRE(fwd.probes[0].W.at(k) ==
            Catch::Approx(-rev.probes[0].W.at(k)).epsilon(1e-6).margin(1e-9));
  }
  REQUIRE(fwd.probes[0].b ==
          Catch::Approx(-rev.probes[0].b).epsilon(1e-6).margin(1e-9));
}

TEST_CASE("identical class distributions give chance accuracy") {
  Rng rng(17);
  const auto a = gaussian_rows(rng, 300, 6, 0.0, 1.0);
  const auto b = gaussian_rows(rng, 300, 6, 0.0, 1.0);
  ProbeTrainReport report;
  train_probe_set(a, b, {0}, ProbeTrainConfig{}, 21, "baseline", &report);
  REQUIRE(report.val_accuracy.at(0) >= 0.4);
  REQUIRE(report.val_accuracy.at(0) <= 0.6);
}

TEST_CASE("training rejects degenerate inputs") {
  Rng rng(19);
  const auto a = gaussian_rows(rng, 10, 4, 0.0, 1.0);
  REQUIRE_THROWS_AS(train_probe_set({}, a, {0}, ProbeTrainConfig{}, 1),
                    TrainingError);
  REQUIRE_THROWS_AS(train_probe_set(a, {}, {0}, ProbeTrainConfig{}, 1),
                    TrainingError);
  REQUIRE_THROWS_AS(train_probe_set(a, a, {0, 1}, ProbeTrainConfig{}, 1),
                    DimensionError);
}

TEST_CASE("same seed trains bit-identical probes") {
  Rng rng(23);
  const auto a = gaussian_rows(rng, 50, 5, -1.0, 1.0);
  const auto b = gaussian_rows(rng, 50, 5, 1.0, 1.0);
  const ProbeSet s1 = train_probe_set(a, b, {0}, ProbeTrainConfig{}, 3);
  const ProbeSet s2 = train_probe_set(a, b, {0}, ProbeTrainConfig{}, 3);
  REQUIRE(s1.probes[0].W.data == s2.probes[0].W.data);
  REQUIRE(s1.probes[0].b == s2.probes[0].b);
}

TEST_CASE("multi-layer sets cover requested layers") {
  Rng rng(29);
  std::vector<std::vector<Tensor>> clean, poisoned;
  for (int i = 0; i < 40; ++i) {
    std::vector<Tensor> c, p;
    for (int l = 0; l < 3; ++l) {
      Tensor dc = Tensor::zeros({4});
      Tensor dp = Tensor::zeros({4});
      dc.at(0) = rng.normal(-1.0, 0.5);
      dp.at(0) = rng.normal(1.0, 0.5);
      c.push_back(dc);
      p.push_back(dp);
    }
    clean.push_back(c);
    poisoned.push_back(p);
  }
  const ProbeSet set =
      train_probe_set(clean, poisoned, {0, 2, 5}, ProbeTrainConfig{}, 7);
  REQUIRE(set.layers() == std::vector<int>{0, 2, 5});
  REQUIRE(set.at_layer(2).layer == 2);
  REQUIRE_THROWS_AS(set.at_layer(1), InputError);
}

TEST_CASE("probe checkpoint round-trips bit-exactly") {
  Rng rng(31);
  ProbeSet set;
  set.threshold = 0.5;
  for (int l : {0, 3}) {
    LinearProbe p;
    p.layer = l;
    p.W = Tensor::zeros({6});
    for (double& v : p.W.data) v = rng.normal() * std::pow(10.0, l - 2);
    p.b = rng.normal();
    p.training_tag = l ? "suffix_augmented" : "baseline";
    set.probes.push_back(p);
  }
  // Awkward values that expose short round-trip formatting.
  set.probes[0].W.at(0) = 0.1;
  set.probes[0].W.at(1) = 1.0 / 3.0;
  set.probes[0].W.at(2) = 1e-300;

  const std::string path = "/tmp/drift_probes_roundtrip.json";
  save_probes(set, path);
  const ProbeSet back = load_probes(path);
  std::remove(path.c_str());

  REQUIRE(back.threshold == set.threshold);
  REQUIRE(back.probes.size() == set.probes.size());
  for (std::size_t i = 0; i < set.probes.size(); ++i) {
    REQUIRE(back.probes[i].layer == set.probes[i].layer);
    REQUIRE(back.probes[i].training_tag == set.probes[i].training_tag);
    REQUIRE(back.probes[i].W.data == set.probes[i].W.data);
    REQUIRE(back.probes[i].b == set.probes[i].b);
  }
}

TEST_CASE("probe checkpoint rejects malformed floats") {
  REQUIRE_THROWS_AS(double_from_string("0.5x"), ParseError);
  REQUIRE(double_from_string(double_to_string(1.0 / 3.0)) == 1.0 / 3.0);
}
