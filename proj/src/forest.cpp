#include "hsi/forest.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <thread>

#include "hsi/rng.hpp"

namespace hsi {

using nlohmann::json;

Index MaxFeatures::resolve(Index k) const {
  switch (rule) {
    case Rule::Sqrt: return std::max<Index>(1, static_cast<Index>(std::ceil(std::sqrt(static_cast<double>(k)) - 1e-12)));
    case Rule::All: return k;
    case Rule::Fixed: return std::clamp<Index>(fixed, 1, k);
  }
  return k;
}

void ForestParams::validate() const {
  if (n_trees < 1) throw ConfigError("forest: n_trees must be >= 1");
  if (min_samples_leaf < 1) throw ConfigError("forest: min_samples_leaf must be >= 1");
  if (max_depth && *max_depth < 0) throw ConfigError("forest: max_depth must be >= 0");
  if (max_features.rule == MaxFeatures::Rule::Fixed && max_features.fixed < 1) {
    throw ConfigError("forest: fixed max_features must be >= 1");
  }
}

ForestParams ForestParams::from_json(const json& j) {
  ForestParams p;
  try {
    p.n_trees = j.value("n_trees", p.n_trees);
    p.seed = j.value("seed", p.seed);
    p.min_samples_leaf = j.value("min_samples_leaf", p.min_samples_leaf);
    if (j.contains("max_depth") && !j["max_depth"].is_null()) p.max_depth = j["max_depth"].get<Index>();
    p.bootstrap = j.value("bootstrap", p.bootstrap);
    p.exclude_padded = j.value("exclude_padded", p.exclude_padded);
    p.threads = j.value("threads", p.threads);
    if (j.contains("max_features")) {
      const json& mf = j["max_features"];
      if (mf.is_number_integer()) {
        p.max_features = {MaxFeatures::Rule::Fixed, mf.get<Index>()};
      } else if (mf == "sqrt") {
        p.max_features = {MaxFeatures::Rule::Sqrt, 0};
      } else if (mf == "all") {
        p.max_features = {MaxFeatures::Rule::All, 0};
      } else {
        throw ConfigError("forest: max_features must be \"sqrt\", \"all\" or an integer");
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("forest config: ") + e.what());
  }
  p.validate();
  return p;
}

json ForestParams::to_json() const {
  json mf;
  switch (max_features.rule) {
    case MaxFeatures::Rule::Sqrt: mf = "sqrt"; break;
    case MaxFeatures::Rule::All: mf = "all"; break;
    case MaxFeatures::Rule::Fixed: mf = max_features.fixed; break;
  }
  return {{"n_trees", n_trees},
          {"max_features", mf},
          {"seed", seed},
          {"min_samples_leaf", min_samples_leaf},
          {"max_depth", max_depth ? json(*max_depth) : json(nullptr)},
          {"bootstrap", bootstrap},
          {"exclude_padded", exclude_padded}};
}

Index DecisionTree::depth() const {
  std::function<Index(std::int32_t)> walk = [&](std::int32_t i) -> Index {
    const TreeNode& n = nodes[static_cast<std::size_t>(i)];
    return n.is_leaf() ? 0 : 1 + std::max(walk(n.left), walk(n.right));
  };
  return nodes.empty() ? 0 : walk(0);
}

namespace {

using u128 = unsigned __int128;

/// Split quality as the exact fraction (A*nr + B*nl) / (nl*nr), where A and B
/// are the sums of squared class weights on each side. Maximising it
/// minimises weighted Gini impurity; integer weights keep comparisons exact.
struct SplitScore {
  u128 num = 0;
  u128 den = 1;

  bool better_than(const SplitScore& o) const { return num * o.den > o.num * den; }
};

/// Row indices ordered by value, one list per feature; computed once per forest.
std::vector<std::vector<std::uint32_t>> presort(const Eigen::MatrixXf& x) {
  std::vector<std::vector<std::uint32_t>> order(static_cast<std::size_t>(x.cols()));
  for (Index f = 0; f < x.cols(); ++f) {
    auto& o = order[static_cast<std::size_t>(f)];
    o.resize(static_cast<std::size_t>(x.rows()));
    std::iota(o.begin(), o.end(), 0u);
    const float* column = x.col(f).data();
    std::stable_sort(o.begin(), o.end(), [column](std::uint32_t a, std::uint32_t b) { return column[a] < column[b]; });
  }
  return order;
}

// Every node owns the same range [begin, end) in each feature's sorted list;
// splitting a node stably partitions all lists, so no node is ever re-sorted.
class TreeBuilder {
 public:
  TreeBuilder(const Eigen::MatrixXf& x, std::span<const std::uint8_t> y, const ForestParams& params, Index mtry,
              const std::vector<std::vector<std::uint32_t>>& order)
      : x_(x), y_(y), params_(params), mtry_(mtry), order_(order) {}

  DecisionTree build(std::uint64_t tree_seed) {
    Rng rng(tree_seed);
    const auto n = static_cast<std::size_t>(x_.rows());
    weight_.assign(n, 0);
    if (params_.bootstrap) {
      for (std::size_t i = 0; i < n; ++i) ++weight_[rng.below(n)];
    } else {
      std::fill(weight_.begin(), weight_.end(), 1u);
    }
    yw_.resize(n);
    for (std::size_t i = 0; i < n; ++i) yw_[i] = (weight_[i] << 1) | (y_[i] ? 1u : 0u);
    const auto n_features = static_cast<std::size_t>(x_.cols());
    sorted_.resize(n_features);
    for (std::size_t f = 0; f < n_features; ++f) {
      const float* column = x_.col(static_cast<Index>(f)).data();
      sorted_[f].clear();
      for (const auto s : order_[f]) {
        if (weight_[s]) sorted_[f].push_back({column[s], s});
      }
    }
    const std::size_t m = sorted_[0].size();
    tmp_.resize(m);
    goes_left_.assign(n, 0);

    DecisionTree tree;
    struct Work {
      std::size_t begin, end;
      Index depth;
      std::int32_t parent;
      bool is_left;
    };
    std::vector<Work> stack{{0, m, 0, -1, false}};
    std::vector<Index> features(n_features);

    while (!stack.empty()) {
      const Work w = stack.back();
      stack.pop_back();
      const auto id = static_cast<std::int32_t>(tree.nodes.size());
      tree.nodes.emplace_back();
      if (w.parent >= 0) {
        auto& parent = tree.nodes[static_cast<std::size_t>(w.parent)];
        (w.is_left ? parent.left : parent.right) = id;
      }

      std::uint64_t w0 = 0, w1 = 0;
      for (std::size_t k = w.begin; k < w.end; ++k) {
        const auto s = sorted_[0][k].sample;
        (y_[s] ? w1 : w0) += weight_[s];
      }
      const std::uint64_t total = w0 + w1;
      TreeNode& node = tree.nodes.back();
      node.sample_count = static_cast<double>(total);
      node.oil_fraction = total ? static_cast<double>(w1) / static_cast<double>(total) : 0.0;

      const auto msl = static_cast<std::uint64_t>(params_.min_samples_leaf);
      const bool pure = w0 == 0 || w1 == 0;
      const bool depth_capped = params_.max_depth && w.depth >= *params_.max_depth;
      if (pure || depth_capped || total < 2 * msl) continue;

      // Candidate features, ascending so ties resolve to the lowest index.
      std::iota(features.begin(), features.end(), Index{0});
      if (mtry_ < x_.cols()) {
        for (Index i = 0; i < mtry_; ++i) {
          const auto j = static_cast<std::size_t>(i) + rng.below(features.size() - static_cast<std::size_t>(i));
          std::swap(features[static_cast<std::size_t>(i)], features[j]);
        }
        std::sort(features.begin(), features.begin() + mtry_);
      }

      const SplitScore parent{u128(w0) * w0 + u128(w1) * w1, total};
      SplitScore best = parent;
      double best_approx = static_cast<double>(parent.num) / static_cast<double>(parent.den);
      std::int32_t best_feature = -1;
      double best_threshold = 0.0;

      for (Index fi = 0; fi < mtry_; ++fi) {
        const Index f = features[static_cast<std::size_t>(fi)];
        const Entry* list = sorted_[static_cast<std::size_t>(f)].data();
        std::uint64_t l0 = 0, l1 = 0;
        for (std::size_t k = w.begin; k + 1 < w.end; ++k) {
          const std::uint32_t yw = yw_[list[k].sample];
          ((yw & 1u) ? l1 : l0) += yw >> 1;
          const float v = list[k].value;
          const float next = list[k + 1].value;
          if (!(v < next)) continue;
          const std::uint64_t nl = l0 + l1;
          const std::uint64_t nr = total - nl;
          if (nl < msl || nr < msl) continue;
          const std::uint64_t r0 = w0 - l0, r1 = w1 - l1;
          // Exact in double for any realistic sample count; the exact test
          // below only runs for candidates that can win.
          const double dl0 = static_cast<double>(l0), dl1 = static_cast<double>(l1);
          const double dr0 = static_cast<double>(r0), dr1 = static_cast<double>(r1);
          const double approx = (dl0 * dl0 + dl1 * dl1) / static_cast<double>(nl) +
                                (dr0 * dr0 + dr1 * dr1) / static_cast<double>(nr);
          if (approx < best_approx * (1.0 - 1e-12)) continue;
          const u128 a = u128(l0) * l0 + u128(l1) * l1;
          const u128 b = u128(r0) * r0 + u128(r1) * r1;
          const SplitScore score{a * nr + b * nl, u128(nl) * nr};
          if (score.better_than(best)) {
            best = score;
            best_approx = approx;
            best_feature = static_cast<std::int32_t>(f);
            best_threshold = 0.5 * (static_cast<double>(v) + static_cast<double>(next));
          }
        }
      }
      if (best_feature < 0) continue;

      node.feature = best_feature;
      node.threshold = best_threshold;
      std::size_t left_count = 0;
      for (std::size_t k = w.begin; k < w.end; ++k) {
        const Entry& e = sorted_[static_cast<std::size_t>(best_feature)][k];
        const bool left = static_cast<double>(e.value) <= best_threshold;
        goes_left_[e.sample] = left;
        left_count += left;
      }
      for (auto& list : sorted_) {
        std::size_t l = w.begin, r = 0;
        for (std::size_t k = w.begin; k < w.end; ++k) {
          const Entry e = list[k];
          if (goes_left_[e.sample]) {
            list[l++] = e;
          } else {
            tmp_[r++] = e;
          }
        }
        std::copy(tmp_.begin(), tmp_.begin() + static_cast<std::ptrdiff_t>(r),
                  list.begin() + static_cast<std::ptrdiff_t>(l));
      }
      const std::size_t split = w.begin + left_count;
      stack.push_back({split, w.end, w.depth + 1, id, false});
      stack.push_back({w.begin, split, w.depth + 1, id, true});
    }
    return tree;
  }

 private:
  const Eigen::MatrixXf& x_;
  std::span<const std::uint8_t> y_;
  const ForestParams& params_;
  Index mtry_;
  const std::vector<std::vector<std::uint32_t>>& order_;

  struct Entry {
    float value;
    std::uint32_t sample;
  };

  std::vector<std::uint32_t> weight_;
  std::vector<std::uint32_t> yw_;  // weight << 1 | label
  std::vector<std::vector<Entry>> sorted_;
  std::vector<Entry> tmp_;
  std::vector<std::uint8_t> goes_left_;
};

}  // namespace

ForestModel train_forest(const Eigen::MatrixXf& samples, std::span<const std::uint8_t> labels,
                         const ForestParams& params) {
  params.validate();
  if (samples.rows() == 0 || samples.cols() == 0) throw DataError("train_forest: empty training set");
  if (static_cast<std::size_t>(samples.rows()) != labels.size()) throw DataError("train_forest: label count mismatch");
  if (samples.rows() > std::numeric_limits<std::int32_t>::max()) throw DataError("train_forest: too many samples");
  if (!samples.allFinite()) throw DataError("train_forest: non-finite feature value");
  const auto oil = std::count_if(labels.begin(), labels.end(), [](std::uint8_t v) { return v != 0; });
  if (oil == 0 || oil == static_cast<std::ptrdiff_t>(labels.size())) {
    std::clog << "warning: training data contains a single class; the forest is constant\n";
  }

  ForestModel model;
  model.params = params;
  model.feature_count = samples.cols();
  model.trees.resize(static_cast<std::size_t>(params.n_trees));
  const Index mtry = params.max_features.resolve(samples.cols());

  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  const unsigned workers = std::min<unsigned>(params.threads ? params.threads : hw, static_cast<unsigned>(params.n_trees));
  const auto order = presort(samples);
  const auto grow = [&](unsigned worker) {
    TreeBuilder builder(samples, labels, params, mtry, order);
    for (auto t = static_cast<std::size_t>(worker); t < model.trees.size(); t += workers) {
      model.trees[t] = builder.build(derive_seed(params.seed, t));
    }
  };
  if (workers <= 1) {
    grow(0);
  } else {
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < workers; ++w) pool.emplace_back(grow, w);
  }
  return model;
}

ForestModel train_forest(std::span<const TileRecord> tiles, const ForestParams& params) {
  if (tiles.empty()) throw DataError("train_forest: empty training set");
  const Index k = tiles.front().channels();
  Index count = 0;
  for (const auto& t : tiles) {
    if (t.channels() != k) throw DataError("train_forest: tiles disagree on channel count");
    count += params.exclude_padded ? (t.pad_mask.array() == 0).count() : t.labels.size();
  }
  if (count == 0) throw DataError("train_forest: empty training set");
  Eigen::MatrixXf x(count, k);
  std::vector<std::uint8_t> y;
  y.reserve(static_cast<std::size_t>(count));
  Index row = 0;
  for (const auto& t : tiles) {
    for (Index p = 0; p < t.labels.size(); ++p) {
      if (params.exclude_padded && t.pad_mask.data()[p]) continue;
      x.row(row++) = t.features.row(p);
      y.push_back(t.labels.data()[p] ? 1 : 0);
    }
  }
  return train_forest(x, y, params);
}

double predict_proba(const ForestModel& model, std::span<const float> x) {
  if (static_cast<Index>(x.size()) != model.feature_count) throw DataError("predict_proba: feature count mismatch");
  if (model.trees.empty()) throw DataError("predict_proba: empty forest");
  double sum = 0.0;
  for (const auto& tree : model.trees) sum += tree.leaf_for(x.data()).oil_fraction;
  return sum / static_cast<double>(model.trees.size());
}

ProbabilityMap predict_map(const ForestModel& model, const TileRecord& tile) {
  if (tile.channels() != model.feature_count) throw DataError("predict_map: tile channel count mismatch");
  const Index side = tile.side();
  ProbabilityMap map(side, side);
  // Row-major copy so each pixel's feature vector is contiguous.
  const RowMajorMatrix<float> rows = tile.features;
  for (Index p = 0; p < side * side; ++p) {
    const std::span<const float> x(rows.row(p).data(), static_cast<std::size_t>(rows.cols()));
    map.data()[p] = static_cast<float>(predict_proba(model, x));
  }
  return map;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

json node_to_json(const DecisionTree& tree, std::int32_t i) {
  const TreeNode& n = tree.nodes[static_cast<std::size_t>(i)];
  if (n.is_leaf()) return {{"p", n.oil_fraction}, {"n", n.sample_count}};
  return {{"f", n.feature}, {"t", n.threshold}, {"l", node_to_json(tree, n.left)}, {"r", node_to_json(tree, n.right)}};
}

std::int32_t node_from_json(const json& j, DecisionTree& tree, Index feature_count) {
  const auto id = static_cast<std::int32_t>(tree.nodes.size());
  tree.nodes.emplace_back();
  if (j.contains("p")) {
    const double p = j.at("p").get<double>();
    if (!(p >= 0.0 && p <= 1.0)) throw DataError("forest: leaf probability outside [0,1]");
    tree.nodes[static_cast<std::size_t>(id)].oil_fraction = p;
    tree.nodes[static_cast<std::size_t>(id)].sample_count = j.at("n").get<double>();
    return id;
  }
  const auto f = j.at("f").get<std::int32_t>();
  if (f < 0 || f >= feature_count) throw DataError("forest: split feature out of range");
  const double t = j.at("t").get<double>();
  const auto left = node_from_json(j.at("l"), tree, feature_count);
  const auto right = node_from_json(j.at("r"), tree, feature_count);
  TreeNode& n = tree.nodes[static_cast<std::size_t>(id)];
  n.feature = f;
  n.threshold = t;
  n.left = left;
  n.right = right;
  return id;
}

}  // namespace

json forest_to_json(const ForestModel& model) {
  json trees = json::array();
  for (const auto& tree : model.trees) trees.push_back(node_to_json(tree, 0));
  return {{"format", "hsi-forest/1"}, {"params", model.params.to_json()}, {"feature_count", model.feature_count},
          {"trees", std::move(trees)}};
}

ForestModel forest_from_json(const json& j) {
  ForestModel model;
  try {
    if (j.at("format") != "hsi-forest/1") throw DataError("forest: unknown format");
    model.params = ForestParams::from_json(j.at("params"));
    model.feature_count = j.at("feature_count").get<Index>();
    if (model.feature_count < 1) throw DataError("forest: feature_count must be >= 1");
    for (const json& t : j.at("trees")) {
      DecisionTree tree;
      node_from_json(t, tree, model.feature_count);
      model.trees.push_back(std::move(tree));
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed forest file: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(std::string("malformed forest file: ") + e.what());
  }
  if (static_cast<Index>(model.trees.size()) != model.params.n_trees) {
    throw DataError("forest: tree count does not match n_trees");
  }
  return model;
}

void save_forest(const ForestModel& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << forest_to_json(model).dump() << "\n";
}

ForestModel load_forest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed forest file: ") + e.what());
  }
  return forest_from_json(j);
}

}  // namespace hsi
