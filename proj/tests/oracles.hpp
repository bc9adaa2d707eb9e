#pragma once
// Slow, obviously-correct reference implementations used as test oracles.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <set>
#include <vector>

#include "hsi/cnn.hpp"
#include "hsi/forest.hpp"
#include "hsi/rng.hpp"
#include "hsi/types.hpp"

namespace oracle {

using hsi::Index;

// ---------------------------------------------------------------------------
// Exact rationals, enough for Gini on a few dozen samples.

struct Fraction {
  std::int64_t num = 0;
  std::int64_t den = 1;

  static Fraction make(std::int64_t n, std::int64_t d) {
    const std::int64_t g = std::gcd(n, d);
    return g ? Fraction{n / g, d / g} : Fraction{0, 1};
  }
  Fraction operator+(const Fraction& o) const { return make(num * o.den + o.num * den, den * o.den); }
  Fraction operator*(const Fraction& o) const { return make(num * o.num, den * o.den); }
  bool operator<(const Fraction& o) const {
    return static_cast<__int128>(num) * o.den < static_cast<__int128>(o.num) * den;
  }
};

inline Fraction gini(std::int64_t n0, std::int64_t n1) {
  const std::int64_t n = n0 + n1;
  return Fraction::make(n * n - n0 * n0 - n1 * n1, n * n);
}

struct CartNode {
  int feature = -1;
  double threshold = 0.0;
  double oil_fraction = 0.0;
  std::int64_t count = 0;
  std::unique_ptr<CartNode> left, right;
};

/// Exhaustive CART: every feature, every midpoint between consecutive
/// distinct values; a node splits only when weighted Gini strictly drops.
/// Ties keep the first candidate in (feature, threshold) order.
inline std::unique_ptr<CartNode> brute_cart(const std::vector<std::vector<float>>& x, const std::vector<int>& y,
                                            const std::vector<int>& idx, int depth, int max_depth,
                                            std::int64_t min_leaf) {
  auto node = std::make_unique<CartNode>();
  std::int64_t n1 = 0;
  for (int i : idx) n1 += y[static_cast<std::size_t>(i)];
  const auto n = static_cast<std::int64_t>(idx.size());
  node->count = n;
  node->oil_fraction = n ? static_cast<double>(n1) / static_cast<double>(n) : 0.0;
  if (n1 == 0 || n1 == n || depth >= max_depth || n < 2 * min_leaf) return node;

  const Fraction parent = gini(n - n1, n1);
  Fraction best = parent;
  int best_f = -1;
  double best_t = 0.0;
  const std::size_t features = x.front().size();
  for (std::size_t f = 0; f < features; ++f) {
    std::set<float> values;
    for (int i : idx) values.insert(x[static_cast<std::size_t>(i)][f]);
    for (auto it = values.begin(); std::next(it) != values.end(); ++it) {
      const double t = 0.5 * (static_cast<double>(*it) + static_cast<double>(*std::next(it)));
      std::int64_t l0 = 0, l1 = 0, r0 = 0, r1 = 0;
      for (int i : idx) {
        const bool left = static_cast<double>(x[static_cast<std::size_t>(i)][f]) <= t;
        const int yi = y[static_cast<std::size_t>(i)];
        (left ? (yi ? l1 : l0) : (yi ? r1 : r0)) += 1;
      }
      const std::int64_t nl = l0 + l1, nr = r0 + r1;
      if (nl < min_leaf || nr < min_leaf) continue;
      const Fraction impurity =
          Fraction::make(nl, n) * gini(l0, l1) + Fraction::make(nr, n) * gini(r0, r1);
      if (impurity < best) {
        best = impurity;
        best_f = static_cast<int>(f);
        best_t = t;
      }
    }
  }
  if (best_f < 0) return node;
  node->feature = best_f;
  node->threshold = best_t;
  std::vector<int> li, ri;
  for (int i : idx) {
    (static_cast<double>(x[static_cast<std::size_t>(i)][static_cast<std::size_t>(best_f)]) <= best_t ? li : ri)
        .push_back(i);
  }
  node->left = brute_cart(x, y, li, depth + 1, max_depth, min_leaf);
  node->right = brute_cart(x, y, ri, depth + 1, max_depth, min_leaf);
  return node;
}

/// Structural equality of an oracle tree and a trained tree rooted at `at`.
inline bool same_tree(const CartNode& o, const hsi::DecisionTree& tree, std::int32_t at = 0) {
  const auto& node = tree.nodes[static_cast<std::size_t>(at)];
  if (node.oil_fraction != o.oil_fraction || node.sample_count != static_cast<double>(o.count)) return false;
  if (o.feature < 0) return node.is_leaf();
  if (node.is_leaf() || node.feature != o.feature || node.threshold != o.threshold) return false;
  return same_tree(*o.left, tree, node.left) && same_tree(*o.right, tree, node.right);
}

// ---------------------------------------------------------------------------
// AUC as the fraction of positive/negative pairs ordered correctly, ties half.

template <typename T>
double pairwise_auc(const std::vector<T>& scores, const std::vector<std::uint8_t>& labels) {
  double wins = 0.0;
  double pairs = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!labels[i]) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j]) continue;
      pairs += 1.0;
      if (scores[i] > scores[j]) wins += 1.0;
      else if (scores[i] == scores[j]) wins += 0.5;
    }
  }
  return wins / pairs;
}

// ---------------------------------------------------------------------------
// Central finite differences of the CNN loss, in double.

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t worst_tensor = 0;
  Index worst_index = 0;
};

/// Zero-initialised biases put ReLU pre-activations exactly on the kink
/// wherever a layer sees an all-zero neighbourhood; finite differences are
/// meaningless there, so gradient checks run with small random biases.
inline void randomize_biases(hsi::CnnModel<double>& model, std::uint64_t seed) {
  hsi::Rng rng(seed);
  const auto layout = hsi::parameter_layout(model.arch);
  for (std::size_t t = 0; t < layout.size(); ++t) {
    if (layout[t].dims.size() != 1) continue;
    for (Index i = 0; i < model.params[t].size(); ++i) model.params[t][i] = rng.uniform(-0.1, 0.1);
  }
}

/// Central difference that tolerates ReLU kinks: the step shrinks by 4x until
/// two successive estimates agree, so a kink inside the first step cannot
/// masquerade as a gradient error. A wrong analytic gradient disagrees with
/// every converged estimate.
template <typename Loss>
double converged_difference(Loss&& loss, hsi::CnnModel<double>& probe, std::size_t t, Index i, double step,
                            double floor, double agree) {
  const double orig = probe.params[t][i];
  const auto central = [&](double h) {
    probe.params[t][i] = orig + h;
    const double up = loss(probe);
    probe.params[t][i] = orig - h;
    const double down = loss(probe);
    probe.params[t][i] = orig;
    return (up - down) / (2.0 * h);
  };
  double prev = central(step);
  for (int level = 1; level <= 6; ++level) {
    const double cur = central(step / std::pow(4.0, level));
    if (std::abs(cur - prev) <= agree * std::max({std::abs(cur), std::abs(prev), floor})) return prev;
    prev = cur;
  }
  return prev;
}

/// Max relative error |a - n| / max(|a|, |n|, floor) over every parameter.
/// The floor sits near the roundoff of a double loss differenced over the
/// step, below which relative error measures noise.
inline GradCheck check_cnn_gradients(const hsi::CnnModel<double>& model,
                                     const std::vector<hsi::RowMajorMatrix<double>>& batch,
                                     const std::vector<hsi::LabelMask>& targets,
                                     const std::vector<hsi::LabelMask>& pads, double step = 1e-5,
                                     double floor = 1e-6) {
  const auto loss = [&](const hsi::CnnModel<double>& m) {
    const auto preds = hsi::forward<double>(m, batch);
    return hsi::bce_loss<double>(preds, targets, pads);
  };
  const auto analytic = hsi::backward<double>(model, batch, targets, pads);
  GradCheck out;
  hsi::CnnModel<double> probe = model;
  for (std::size_t t = 0; t < model.params.size(); ++t) {
    for (Index i = 0; i < model.params[t].size(); ++i) {
      const double numeric = converged_difference(loss, probe, t, i, step, floor, 2.5e-5);
      const double a = analytic.grads[t][i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      if (rel > out.max_rel_error) {
        out.max_rel_error = rel;
        out.worst_tensor = t;
        out.worst_index = i;
      }
    }
  }
  return out;
}

}  // namespace oracle
