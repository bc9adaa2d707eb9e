#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <unordered_set>

#include <xmmintrin.h>

#include "hsi/cnn.hpp"
#include "hsi/forest.hpp"
#include "hsi/metrics.hpp"
#include "hsi/rng.hpp"

namespace hsi {

namespace {

// Late in training many gradients and Adam moments go subnormal, which slows
// float arithmetic by an order of magnitude. Flush them to zero while
// training; the result is still deterministic.
class FlushDenormals {
 public:
  FlushDenormals() : saved_(_mm_getcsr()) { _mm_setcsr(saved_ | 0x8040u); }  // FTZ | DAZ
  ~FlushDenormals() { _mm_setcsr(saved_); }
  FlushDenormals(const FlushDenormals&) = delete;
  FlushDenormals& operator=(const FlushDenormals&) = delete;

 private:
  unsigned saved_;
};

}  // namespace

CnnDataset make_cnn_dataset(std::vector<CnnExample> val_examples, std::vector<CnnExample> test_examples,
                            std::uint64_t split_seed, std::span<const std::int64_t> rf_train_ids) {
  if (val_examples.empty()) throw DataError("make_cnn_dataset: empty validation set");
  const std::unordered_set<std::int64_t> seen(rf_train_ids.begin(), rf_train_ids.end());
  for (const auto* group : {&val_examples, &test_examples}) {
    for (const auto& ex : *group) {
      if (seen.contains(ex.tile_id)) {
        throw DataError("make_cnn_dataset: tile " + std::to_string(ex.tile_id) +
                        " was used to train the forest; its map would be optimistically biased");
      }
    }
  }

  Rng rng(split_seed);
  rng.shuffle(std::span<CnnExample>(val_examples));
  const auto n_train = static_cast<std::size_t>(std::floor(0.8 * static_cast<double>(val_examples.size()) + 1e-9));

  CnnDataset data;
  data.train.assign(std::make_move_iterator(val_examples.begin()),
                    std::make_move_iterator(val_examples.begin() + static_cast<std::ptrdiff_t>(n_train)));
  data.val.assign(std::make_move_iterator(val_examples.begin() + static_cast<std::ptrdiff_t>(n_train)),
                  std::make_move_iterator(val_examples.end()));
  data.test = std::move(test_examples);
  return data;
}

CnnDataset make_cnn_dataset(const ForestModel& forest, std::span<const TileRecord> val_tiles,
                            std::span<const TileRecord> test_tiles, std::uint64_t split_seed,
                            std::span<const std::int64_t> rf_train_ids) {
  const auto to_examples = [&](std::span<const TileRecord> tiles, Split expected) {
    std::vector<CnnExample> out;
    for (const auto& t : tiles) {
      if (t.split != expected) {
        throw DataError("make_cnn_dataset: tile " + std::to_string(t.tile_id) + " is tagged " + to_string(t.split));
      }
      out.push_back({t.tile_id, predict_map(forest, t), t.labels, t.pad_mask});
    }
    return out;
  };
  return make_cnn_dataset(to_examples(val_tiles, Split::Val), to_examples(test_tiles, Split::Test), split_seed,
                          rf_train_ids);
}

std::vector<ProbabilityMap> refine(const CnnModel<float>& model, std::span<const CnnExample> examples) {
  const FlushDenormals ftz;
  std::vector<ProbabilityMap> inputs;
  inputs.reserve(examples.size());
  for (const auto& ex : examples) inputs.push_back(ex.input);
  return forward<float>(model, inputs);
}

namespace {

struct ValScore {
  double auc = std::numeric_limits<double>::quiet_NaN();
  double loss = 0.0;
};

ValScore score_validation(const CnnModel<float>& model, std::span<const CnnExample> val) {
  const auto preds = refine(model, val);
  std::vector<float> scores;
  std::vector<std::uint8_t> labels;
  std::vector<LabelMask> targets, masks;
  for (std::size_t i = 0; i < val.size(); ++i) {
    targets.push_back(val[i].labels);
    masks.push_back(val[i].pad_mask);
    for (Index p = 0; p < preds[i].size(); ++p) {
      if (val[i].pad_mask.data()[p]) continue;
      scores.push_back(preds[i].data()[p]);
      labels.push_back(val[i].labels.data()[p] ? 1 : 0);
    }
  }
  ValScore s;
  s.loss = bce_loss<float>(preds, targets, masks);
  const bool both = std::find(labels.begin(), labels.end(), 1) != labels.end() &&
                    std::find(labels.begin(), labels.end(), 0) != labels.end();
  if (both) s.auc = auc_roc(scores, labels);
  return s;
}

}  // namespace

TrainResult train_cnn(CnnModel<float> model, std::span<const CnnExample> train, std::span<const CnnExample> val,
                      const TrainConfig& cfg) {
  cfg.validate();
  const FlushDenormals ftz;
  if (train.empty() || val.empty()) throw DataError("train_cnn: training and validation sets must be nonempty");

  Rng rng(cfg.seed);
  auto state = AdamState<float>::zeros_like(model);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  double best_auc = -1.0;
  double best_loss = std::numeric_limits<double>::infinity();
  const auto batch = static_cast<std::size_t>(cfg.batch_size);

  for (Index epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    double loss_sum = 0.0;
    Index pixel_sum = 0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      std::vector<ProbabilityMap> inputs;
      std::vector<LabelMask> targets, masks;
      for (std::size_t k = start; k < end; ++k) {
        const auto& ex = train[order[k]];
        inputs.push_back(ex.input);
        targets.push_back(ex.labels);
        masks.push_back(ex.pad_mask);
      }
      const auto step = backward<float>(model, inputs, targets, masks);
      if (!std::isfinite(step.loss)) {
        throw NumericError("train_cnn: non-finite loss at epoch " + std::to_string(epoch));
      }
      adam_step(model, step.grads, state, cfg);
      loss_sum += step.loss * static_cast<double>(step.pixels);
      pixel_sum += step.pixels;
    }

    const ValScore vs = score_validation(model, val);
    if (!std::isfinite(vs.loss)) throw NumericError("train_cnn: non-finite validation loss");
    result.log.push_back({epoch, loss_sum / static_cast<double>(pixel_sum), vs.auc, vs.loss});

    const bool improved = std::isnan(vs.auc) ? vs.loss < best_loss : vs.auc > best_auc;
    if (improved) {
      best_auc = std::isnan(vs.auc) ? best_auc : vs.auc;
      best_loss = vs.loss;
      result.best = model;
      result.best_epoch = epoch;
    }
  }
  return result;
}

}  // namespace hsi
