#pragma once

#include <filesystem>
#include <optional>
#include <span>

#include <json.hpp>

#include "hsi/types.hpp"

namespace hsi {

struct MaxFeatures {
  enum class Rule : std::uint8_t { Sqrt, All, Fixed };
  Rule rule = Rule::Sqrt;
  Index fixed = 0;

  /// Number of candidate features per node for `k` input features.
  Index resolve(Index k) const;
};

struct ForestParams {
  Index n_trees = 100;
  MaxFeatures max_features;
  std::uint64_t seed = 42;
  Index min_samples_leaf = 1;
  std::optional<Index> max_depth;
  bool bootstrap = true;
  bool exclude_padded = true;
  /// Worker threads for tree-level parallelism; 0 = hardware concurrency.
  /// Does not affect the trained model.
  unsigned threads = 0;

  void validate() const;
  static ForestParams from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

/// Internal nodes route x[feature] <= threshold to `left`; leaves carry the
/// (bootstrap-weighted) oil fraction of their training samples.
struct TreeNode {
  std::int32_t feature = -1;
  double threshold = 0.0;
  std::int32_t left = -1;
  std::int32_t right = -1;
  double oil_fraction = 0.0;
  double sample_count = 0.0;

  bool is_leaf() const { return feature < 0; }
};

struct DecisionTree {
  std::vector<TreeNode> nodes;  // preorder, root at 0

  const TreeNode& leaf_for(const float* x) const {
    const TreeNode* node = &nodes.front();
    while (!node->is_leaf()) {
      node = &nodes[static_cast<std::size_t>(static_cast<double>(x[node->feature]) <= node->threshold ? node->left
                                                                                                    : node->right)];
    }
    return *node;
  }
  Index depth() const;
};

struct ForestModel {
  std::vector<DecisionTree> trees;
  ForestParams params;
  Index feature_count = 0;
};

/// Grows the forest on an N x K sample matrix with {0,1} labels.
ForestModel train_forest(const Eigen::MatrixXf& samples, std::span<const std::uint8_t> labels,
                         const ForestParams& params);

/// Flattens training tiles into independent pixels (padded pixels dropped
/// when `exclude_padded`) and grows the forest.
ForestModel train_forest(std::span<const TileRecord> tiles, const ForestParams& params);

double predict_proba(const ForestModel& model, std::span<const float> x);
ProbabilityMap predict_map(const ForestModel& model, const TileRecord& tile);

nlohmann::json forest_to_json(const ForestModel& model);
ForestModel forest_from_json(const nlohmann::json& j);
void save_forest(const ForestModel& model, const std::filesystem::path& path);
ForestModel load_forest(const std::filesystem::path& path);

}  // namespace hsi
