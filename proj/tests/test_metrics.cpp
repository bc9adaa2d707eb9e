#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "hsi/metrics.hpp"
#include "hsi/rng.hpp"
#include "oracles.hpp"

using namespace hsi;

TEST_CASE("auc of the four-point example is three quarters") {
  const std::vector<double> s{0.1, 0.4, 0.35, 0.8};
  const std::vector<std::uint8_t> y{0, 0, 1, 1};
  CHECK(auc_roc(s, y) == 0.75);
}

TEST_CASE("auc matches pairwise ordering on random tied scores") {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.below(60);
    const std::uint64_t levels = 1 + rng.below(trial % 2 ? 4 : 1000);
    std::vector<double> s(n);
    std::vector<std::uint8_t> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng.below(levels)) / static_cast<double>(levels);
      y[i] = rng.below(3) == 0;
    }
    y[0] = 1;
    y[1] = 0;
    CHECK(std::abs(auc_roc(s, y) - oracle::pairwise_auc(s, y)) <= 1e-12);
  }
}

TEST_CASE("auc edge cases") {
  const std::vector<float> s{0.5f, 0.5f, 0.5f};
  const std::vector<std::uint8_t> y{1, 0, 1};
  CHECK(auc_roc(s, y) == 0.5);
  const std::vector<std::uint8_t> single{1, 1, 1};
  CHECK_THROWS_AS(auc_roc(s, single), DataError);
  const std::vector<double> perfect{0.1, 0.2, 0.9};
  const std::vector<std::uint8_t> py{0, 0, 1};
  CHECK(auc_roc(perfect, py) == 1.0);
}

TEST_CASE("confusion counts and derived scores") {
  ProbabilityMap p(2, 2);
  p << 0.9f, 0.5f, 0.49f, 0.1f;
  LabelMask y(2, 2);
  y << 1, 0, 1, 0;
  const auto c = confusion(p, y);
  CHECK(c == ConfusionCounts{1, 1, 1, 1});
  CHECK(precision(c) == 0.5);
  CHECK(recall(c) == 0.5);
  CHECK(f1(c) == 0.5);
  CHECK(accuracy(c) == 0.5);

  LabelMask pad(2, 2);
  pad << 0, 1, 0, 1;
  const auto masked = confusion(p, y, 0.5, &pad);
  CHECK(masked == ConfusionCounts{1, 0, 0, 1});

  const ConfusionCounts empty{};
  CHECK(precision(empty) == 0.0);
  CHECK(recall(empty) == 0.0);
  CHECK(f1(empty) == 0.0);
}

TEST_CASE("pooled report equals recomputation from per-tile counts") {
  Rng rng(5);
  std::vector<ProbabilityMap> preds;
  std::vector<LabelMask> truths, pads;
  for (int t = 0; t < 6; ++t) {
    ProbabilityMap p(8, 8);
    LabelMask y(8, 8), pad = LabelMask::Zero(8, 8);
    for (Index i = 0; i < p.size(); ++i) {
      y.data()[i] = rng.below(4) == 0;
      p.data()[i] = static_cast<float>(0.6 * y.data()[i] + 0.5 * rng.uniform());
      pad.data()[i] = t == 5 && i % 3 == 0;
    }
    preds.push_back(p);
    truths.push_back(y);
    pads.push_back(pad);
  }
  const auto report = evaluate_maps(preds, truths, pads);
  ConfusionCounts pooled;
  for (std::size_t t = 0; t < preds.size(); ++t) pooled += confusion(preds[t], truths[t], 0.5, &pads[t]);
  CHECK(report.counts == pooled);
  CHECK(report.f1 == f1(pooled));
  CHECK(report.pixel_count == pooled.total());
}

TEST_CASE("tile F1 distribution skips oil-free tiles and bins edges") {
  const auto make = [](std::int64_t tp, std::int64_t fp, std::int64_t fn) {
    // One tile of 10x10 with the requested counts.
    ProbabilityMap p = ProbabilityMap::Zero(10, 10);
    LabelMask y = LabelMask::Zero(10, 10);
    Index i = 0;
    for (std::int64_t k = 0; k < tp; ++k, ++i) {
      p.data()[i] = 1.0f;
      y.data()[i] = 1;
    }
    for (std::int64_t k = 0; k < fp; ++k, ++i) p.data()[i] = 1.0f;
    for (std::int64_t k = 0; k < fn; ++k, ++i) y.data()[i] = 1;
    return std::pair{p, y};
  };
  std::vector<ProbabilityMap> preds;
  std::vector<LabelMask> truths;
  // f1 = 1.0, 0.7 (tp 7, fp 3, fn 3), 0.0, and one tile without oil.
  for (auto [tp, fp, fn] : {std::tuple{5, 0, 0}, std::tuple{7, 3, 3}, std::tuple{0, 2, 4}, std::tuple{0, 3, 0}}) {
    auto [p, y] = make(tp, fp, fn);
    preds.push_back(p);
    truths.push_back(y);
  }
  const std::vector<LabelMask> pads(4, LabelMask::Zero(10, 10));
  const std::vector<std::int64_t> ids{10, 11, 12, 13};
  const auto dist = tile_f1_distribution(preds, truths, pads, ids);
  REQUIRE(dist.per_tile.size() == 4);
  CHECK_FALSE(dist.per_tile[3].included);
  CHECK(dist.histogram[19] == 1);
  CHECK(dist.histogram[14] == 1);
  CHECK(dist.histogram[0] == 1);
  CHECK(std::accumulate(dist.histogram.begin(), dist.histogram.end(), std::int64_t{0}) == 3);
  REQUIRE(dist.fraction_below);
  CHECK(*dist.fraction_below == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("metrics csv lists both models") {
  const auto dir = std::filesystem::temp_directory_path() / "hsi_metrics_csv";
  std::filesystem::create_directories(dir);
  std::vector<NamedReport> rows{{"rf", MetricsReport{}}, {"rf+cnn", MetricsReport{}}};
  write_metrics_csv(dir / "metrics.csv", rows);
  std::ifstream in(dir / "metrics.csv");
  std::string header, a, b;
  std::getline(in, header);
  std::getline(in, a);
  std::getline(in, b);
  CHECK(header.rfind("model,", 0) == 0);
  CHECK(a.rfind("rf,", 0) == 0);
  CHECK(b.rfind("rf+cnn,", 0) == 0);
}
