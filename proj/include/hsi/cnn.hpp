#pragma once

#include <filesystem>
#include <span>

#include <json.hpp>

#include "hsi/types.hpp"

namespace hsi {

/// Encoder-decoder layout: per encoder level two 3x3 same-padded conv+ReLU
/// and a 2x2 max-pool; a two-conv bottleneck; per decoder level a 2x2
/// stride-2 transposed conv, concatenation with the matching encoder
/// features, and two conv+ReLU; then a 1x1 conv with sigmoid.
struct CnnArch {
  Index input_channels = 1;
  std::vector<Index> enc_channels{16, 32};
  Index bottleneck_channels = 64;
  Index tile = 64;

  void validate() const;
  nlohmann::json to_json() const;
  static CnnArch from_json(const nlohmann::json& j);
};

struct TensorShape {
  std::string name;
  std::vector<Index> dims;

  Index size() const;
  /// Inputs feeding one output unit: in_channels * kernel height * kernel width.
  Index fan_in() const { return dims.size() == 4 ? dims[1] * dims[2] * dims[3] : 0; }
};

/// Parameter tensors in manifest order.
std::vector<TensorShape> parameter_layout(const CnnArch& arch);

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
struct CnnModel {
  CnnArch arch;
  std::uint64_t init_seed = 0;
  std::vector<Vector<Scalar>> params;  // parallel to parameter_layout(arch)

  template <typename Other>
  CnnModel<Other> cast() const {
    CnnModel<Other> out;
    out.arch = arch;
    out.init_seed = init_seed;
    for (const auto& p : params) out.params.push_back(p.template cast<Other>());
    return out;
  }
  Index parameter_count() const {
    Index n = 0;
    for (const auto& p : params) n += p.size();
    return n;
  }
};


/// He-uniform kernels (bound sqrt(6/fan_in)) and zero biases.
template <typename Scalar>
CnnModel<Scalar> init_model(const CnnArch& arch, std::uint64_t seed);

/// B maps of tile x tile in, B refined maps out, each value in (0,1).
template <typename Scalar>
std::vector<RowMajorMatrix<Scalar>> forward(const CnnModel<Scalar>& model,
                                            std::span<const RowMajorMatrix<Scalar>> batch);

/// Mean binary cross-entropy over pixels whose pad mask is 0 (all pixels
/// when `pad_masks` is empty); predictions are clamped to [1e-7, 1-1e-7].
template <typename Scalar>
double bce_loss(std::span<const RowMajorMatrix<Scalar>> preds, std::span<const LabelMask> targets,
                std::span<const LabelMask> pad_masks = {});

template <typename Scalar>
struct BackwardResult {
  double loss = 0.0;
  Index pixels = 0;
  std::vector<Vector<Scalar>> grads;
};

/// Analytic gradient of `bce_loss(forward(batch), targets, pad_masks)`.
/// The head uses d loss / d logit = (p - y) / pixels.
template <typename Scalar>
BackwardResult<Scalar> backward(const CnnModel<Scalar>& model, std::span<const RowMajorMatrix<Scalar>> batch,
                                std::span<const LabelMask> targets, std::span<const LabelMask> pad_masks = {});

struct TrainConfig {
  Index epochs = 50;
  Index batch_size = 16;
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 1234;
  std::uint64_t init_seed = 42;
  std::uint64_t split_seed = 99;

  void validate() const;
  static TrainConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

template <typename Scalar>
struct AdamState {
  std::vector<Vector<Scalar>> m;
  std::vector<Vector<Scalar>> v;
  std::int64_t step = 0;

  static AdamState zeros_like(const CnnModel<Scalar>& model) {
    AdamState s;
    for (const auto& p : model.params) {
      s.m.push_back(Vector<Scalar>::Zero(p.size()));
      s.v.push_back(Vector<Scalar>::Zero(p.size()));
    }
    return s;
  }
};

/// One bias-corrected Adam update.
template <typename Scalar>
void adam_step(CnnModel<Scalar>& model, const std::vector<Vector<Scalar>>& grads, AdamState<Scalar>& state,
               const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Dataset and training loop

struct CnnExample {
  std::int64_t tile_id = 0;
  ProbabilityMap input;
  LabelMask labels;
  LabelMask pad_mask;
};

struct CnnDataset {
  std::vector<CnnExample> train;
  std::vector<CnnExample> val;
  std::vector<CnnExample> test;
};

/// Shuffles validation-split examples with `split_seed` and cuts them 80/20
/// into CNN train/val; test examples pass through. Throws if any example
/// comes from a tile the forest was trained on.
CnnDataset make_cnn_dataset(std::vector<CnnExample> val_examples, std::vector<CnnExample> test_examples,
                            std::uint64_t split_seed, std::span<const std::int64_t> rf_train_ids);

struct ForestModel;

/// Forest-predicted maps for the val/test tiles, then as above.
CnnDataset make_cnn_dataset(const ForestModel& forest, std::span<const TileRecord> val_tiles,
                            std::span<const TileRecord> test_tiles, std::uint64_t split_seed,
                            std::span<const std::int64_t> rf_train_ids);

struct EpochLog {
  Index epoch = 0;
  double train_loss = 0.0;
  double val_auc = 0.0;  // NaN when the validation labels hold one class
  double val_loss = 0.0;
};

struct TrainResult {
  CnnModel<float> best;
  Index best_epoch = 0;
  std::vector<EpochLog> log;
};

/// Seeded minibatch Adam on BCE; keeps the snapshot with the highest
/// pixel-wise validation AUC (earliest on ties). When validation labels hold
/// a single class the AUC is undefined and the lowest validation loss picks
/// the snapshot instead.
TrainResult train_cnn(CnnModel<float> model, std::span<const CnnExample> train, std::span<const CnnExample> val,
                      const TrainConfig& cfg);

/// Refined maps for a set of examples.
std::vector<ProbabilityMap> refine(const CnnModel<float>& model, std::span<const CnnExample> examples);

// `<stem>.cnn.json` manifest plus `<stem>.cnn.raw` f32le tensors in manifest order.
void save_cnn(const CnnModel<float>& model, const std::filesystem::path& path);
CnnModel<float> load_cnn(const std::filesystem::path& path);

}  // namespace hsi
