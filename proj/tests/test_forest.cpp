#include <doctest.h>

#include <filesystem>

#include "hsi/forest.hpp"
#include "hsi/rng.hpp"
#include "oracles.hpp"

using namespace hsi;

namespace {

struct Dataset {
  Eigen::MatrixXf x;
  std::vector<std::uint8_t> y;
};

Dataset random_dataset(Rng& rng, Index n, Index k, std::uint64_t levels) {
  Dataset d{Eigen::MatrixXf(n, k), std::vector<std::uint8_t>(static_cast<std::size_t>(n))};
  for (Index i = 0; i < n; ++i) {
    for (Index f = 0; f < k; ++f) d.x(i, f) = static_cast<float>(rng.below(levels)) * 0.25f - 1.0f;
    d.y[static_cast<std::size_t>(i)] = rng.uniform() < 0.4;
  }
  return d;
}

}  // namespace

TEST_CASE("single tree without bootstrap matches exhaustive CART") {
  Rng rng(2024);
  for (int trial = 0; trial < 50; ++trial) {
    const Index n = 2 + static_cast<Index>(rng.below(29));
    const Index k = 1 + static_cast<Index>(rng.below(3));
    const int depth = 1 + static_cast<int>(rng.below(3));
    const auto d = random_dataset(rng, n, k, trial % 2 ? 4 : 40);

    ForestParams p;
    p.n_trees = 1;
    p.bootstrap = false;
    p.max_features.rule = MaxFeatures::Rule::All;
    p.max_depth = depth;
    p.threads = 1;
    const auto model = train_forest(d.x, d.y, p);

    std::vector<std::vector<float>> rows;
    std::vector<int> labels;
    std::vector<int> idx;
    for (Index i = 0; i < n; ++i) {
      rows.emplace_back();
      for (Index f = 0; f < k; ++f) rows.back().push_back(d.x(i, f));
      labels.push_back(d.y[static_cast<std::size_t>(i)]);
      idx.push_back(static_cast<int>(i));
    }
    const auto expected = oracle::brute_cart(rows, labels, idx, 0, depth, 1);
    CHECK_MESSAGE(oracle::same_tree(*expected, model.trees[0]), "trial " << trial);
  }
}

TEST_CASE("min_samples_leaf is honoured like the oracle") {
  Rng rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    const auto d = random_dataset(rng, 30, 2, 12);
    ForestParams p;
    p.n_trees = 1;
    p.bootstrap = false;
    p.max_features.rule = MaxFeatures::Rule::All;
    p.min_samples_leaf = 4;
    p.threads = 1;
    const auto model = train_forest(d.x, d.y, p);
    std::vector<std::vector<float>> rows;
    std::vector<int> labels, idx;
    for (Index i = 0; i < 30; ++i) {
      rows.push_back({d.x(i, 0), d.x(i, 1)});
      labels.push_back(d.y[static_cast<std::size_t>(i)]);
      idx.push_back(static_cast<int>(i));
    }
    const auto expected = oracle::brute_cart(rows, labels, idx, 0, 1000, 4);
    CHECK(oracle::same_tree(*expected, model.trees[0]));
  }
}

TEST_CASE("larger datasets agree with the oracle") {
  Rng rng(3);
  const auto d = random_dataset(rng, 900, 3, 1000);
  ForestParams p;
  p.n_trees = 1;
  p.bootstrap = false;
  p.max_features.rule = MaxFeatures::Rule::All;
  p.max_depth = 3;
  p.threads = 1;
  const auto model = train_forest(d.x, d.y, p);
  std::vector<std::vector<float>> rows;
  std::vector<int> labels, idx;
  for (Index i = 0; i < 900; ++i) {
    rows.push_back({d.x(i, 0), d.x(i, 1), d.x(i, 2)});
    labels.push_back(d.y[static_cast<std::size_t>(i)]);
    idx.push_back(static_cast<int>(i));
  }
  CHECK(oracle::same_tree(*oracle::brute_cart(rows, labels, idx, 0, 3, 1), model.trees[0]));
}

TEST_CASE("forest probabilities, determinism, and thread independence") {
  Rng rng(8);
  const auto d = random_dataset(rng, 400, 5, 50);
  ForestParams p;
  p.n_trees = 12;
  p.threads = 1;
  const auto a = train_forest(d.x, d.y, p);
  p.threads = 4;
  const auto b = train_forest(d.x, d.y, p);
  CHECK(forest_to_json(a) == forest_to_json(b));
  for (Index i = 0; i < 400; ++i) {
    std::vector<float> x(5);
    for (Index f = 0; f < 5; ++f) x[static_cast<std::size_t>(f)] = d.x(i, f);
    const double prob = predict_proba(a, x);
    CHECK(prob >= 0.0);
    CHECK(prob <= 1.0);
  }
  p.seed = 43;
  CHECK(forest_to_json(train_forest(d.x, d.y, p)) != forest_to_json(a));
}

TEST_CASE("pure data yields single-leaf trees") {
  Eigen::MatrixXf x(4, 1);
  x << 1, 2, 3, 4;
  const std::vector<std::uint8_t> y{1, 1, 1, 1};
  ForestParams p;
  p.n_trees = 3;
  const auto m = train_forest(x, y, p);
  for (const auto& t : m.trees) {
    CHECK(t.nodes.size() == 1);
    CHECK(t.nodes[0].oil_fraction == 1.0);
  }
  const std::vector<float> probe{2.5f};
  CHECK(predict_proba(m, probe) == 1.0);
}

TEST_CASE("max_depth zero gives the class prior") {
  Eigen::MatrixXf x(4, 1);
  x << 1, 2, 3, 4;
  const std::vector<std::uint8_t> y{0, 0, 0, 1};
  ForestParams p;
  p.n_trees = 1;
  p.bootstrap = false;
  p.max_depth = 0;
  const auto m = train_forest(x, y, p);
  REQUIRE(m.trees[0].nodes.size() == 1);
  CHECK(m.trees[0].nodes[0].oil_fraction == 0.25);
}

TEST_CASE("forest file round trip predicts identically") {
  Rng rng(21);
  const auto d = random_dataset(rng, 200, 4, 100);
  ForestParams p;
  p.n_trees = 5;
  p.max_depth = 6;
  const auto m = train_forest(d.x, d.y, p);
  const auto path = std::filesystem::temp_directory_path() / "hsi_forest_roundtrip.rf.json";
  save_forest(m, path);
  const auto back = load_forest(path);
  CHECK(forest_to_json(back) == forest_to_json(m));
  for (Index i = 0; i < 200; ++i) {
    std::vector<float> x(4);
    for (Index f = 0; f < 4; ++f) x[static_cast<std::size_t>(f)] = d.x(i, f);
    CHECK(predict_proba(back, x) == predict_proba(m, x));
  }
}

TEST_CASE("tile training skips padded pixels") {
  TileRecord t;
  t.features = Eigen::MatrixXf::Zero(4, 1);
  t.features << 0, 1, 5, 9;
  t.labels = LabelMask::Zero(2, 2);
  t.labels << 0, 1, 0, 0;
  t.pad_mask = LabelMask::Zero(2, 2);
  t.pad_mask << 0, 0, 1, 1;
  ForestParams p;
  p.n_trees = 1;
  p.bootstrap = false;
  const std::vector<TileRecord> tiles{t};
  const auto m = train_forest(tiles, p);
  CHECK(m.trees[0].nodes[0].sample_count == 2.0);
  p.exclude_padded = false;
  CHECK(train_forest(tiles, p).trees[0].nodes[0].sample_count == 4.0);
}

TEST_CASE("parameter validation") {
  ForestParams p;
  p.n_trees = 0;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  CHECK_THROWS_AS(ForestParams::from_json(nlohmann::json{{"max_features", "half"}}), ConfigError);
  const auto q = ForestParams::from_json(nlohmann::json{{"n_trees", 7}, {"max_features", 2}});
  CHECK(q.n_trees == 7);
  CHECK(q.max_features.resolve(10) == 2);
  CHECK(MaxFeatures{}.resolve(32) == 6);
  CHECK(MaxFeatures{}.resolve(16) == 4);
  CHECK(MaxFeatures{}.resolve(1) == 1);
}
