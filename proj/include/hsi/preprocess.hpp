#pragma once

#include <filesystem>
#include <set>
#include <span>

#include <json.hpp>

#include "hsi/types.hpp"

namespace hsi {

// ---------------------------------------------------------------------------
// Channel screening

/// Channels flagged in every cube. A channel is flagged in one cube when its
/// variance relative to the median channel variance is below
/// `variance_floor`, when the mean absolute lag-1 spatial autocorrelation of
/// its band image is below `flatness_threshold`, or when it was flagged for
/// non-finite samples on ingestion.
std::vector<Index> detect_noisy_channels(std::span<const HsiCube> cubes, double variance_floor = 1e-4,
                                         double flatness_threshold = 0.1);

/// Mean of |horizontal| and |vertical| lag-1 Pearson autocorrelation of a band.
double lag1_autocorrelation(const Eigen::Ref<const RowMajorMatrix<float>>& band);

HsiCube remove_channels(const HsiCube& cube, std::span<const Index> indices);

// ---------------------------------------------------------------------------
// Standardisation

struct ScalerParams {
  Eigen::VectorXd means;
  Eigen::VectorXd stds;
};

/// Per-column mean and population standard deviation of an N x K sample matrix.
template <typename Derived>
ScalerParams fit_scaler(const Eigen::MatrixBase<Derived>& pixels) {
  const Index n = pixels.rows();
  if (n < 2) throw DataError("fit_scaler: need at least 2 samples");
  ScalerParams params;
  params.means.resize(pixels.cols());
  params.stds.resize(pixels.cols());
  for (Index c = 0; c < pixels.cols(); ++c) {
    const auto column = pixels.col(c).template cast<double>();
    const double mean = column.mean();
    const double var = (column.array() - mean).square().sum() / static_cast<double>(n);
    if (!(var > 0.0)) {
      throw DataError("fit_scaler: channel " + std::to_string(c) + " has zero variance; remove it first");
    }
    params.means[c] = mean;
    params.stds[c] = std::sqrt(var);
  }
  return params;
}

HsiCube apply_scaler(const HsiCube& cube, const ScalerParams& params);
void apply_scaler_inplace(Eigen::MatrixXf& pixels, const ScalerParams& params);

// ---------------------------------------------------------------------------
// PCA

struct PcaModel {
  Eigen::MatrixXd components;  // K_out x K_in, orthonormal rows
  Eigen::VectorXd explained_variance;
  Eigen::VectorXd explained_variance_ratio;
  Eigen::VectorXd mean;  // K_in

  Index input_channels() const { return components.cols(); }
  Index output_channels() const { return components.rows(); }
};

/// Accumulates mean and scatter in double over row blocks, so PCA can be fit
/// on pixels from several cubes without stacking them.
class CovarianceAccumulator {
 public:
  explicit CovarianceAccumulator(Index channels);

  template <typename Derived>
  void add(const Eigen::MatrixBase<Derived>& rows) {
    constexpr Index block = 4096;
    for (Index start = 0; start < rows.rows(); start += block) {
      const Index len = std::min(block, rows.rows() - start);
      add_block(rows.middleRows(start, len).template cast<double>());
    }
  }

  Index count() const { return count_; }
  Eigen::VectorXd mean() const;
  /// Sample covariance (divides by N-1).
  Eigen::MatrixXd covariance() const;

 private:
  void add_block(const Eigen::MatrixXd& block);

  Index count_ = 0;
  Eigen::VectorXd shift_;  // first observed row; keeps the scatter well conditioned
  Eigen::VectorXd sum_;
  Eigen::MatrixXd scatter_;
  bool has_shift_ = false;
};

PcaModel fit_pca(const CovarianceAccumulator& stats, double variance_target = 0.99, Index max_components = 32);

template <typename Derived>
PcaModel fit_pca(const Eigen::MatrixBase<Derived>& pixels, double variance_target = 0.99,
                 Index max_components = 32) {
  CovarianceAccumulator stats(pixels.cols());
  stats.add(pixels);
  return fit_pca(stats, variance_target, max_components);
}

/// Rows of `pixels` (N x K_in) projected to N x K_out.
Eigen::MatrixXf project(const Eigen::MatrixXf& pixels, const PcaModel& model);
HsiCube apply_pca(const HsiCube& cube, const PcaModel& model);

// ---------------------------------------------------------------------------
// Tiling, splitting, augmentation

/// Non-overlapping side x side tiles in row-major tile order. Edge tiles are
/// padded per channel with the mean over water pixels inside the tile, falling
/// back to the image-wide water mean, then to zero.
std::vector<TileRecord> tile_image(const HsiCube& cube, const LabelMask& mask, Index side = 64,
                                   std::int64_t first_id = 0);

struct SplitConfig {
  double train_frac = 0.6;
  double val_frac = 0.2;
  double test_frac = 0.2;
  std::uint64_t seed = 42;

  void validate() const;
};

/// Shuffles tile order with the seeded generator and tags the first
/// floor(n*train) tiles train, the next floor(n*val) val, the rest test.
void split_tiles(std::span<TileRecord> tiles, const SplitConfig& cfg);

enum class TileTransform : std::uint8_t { Rot90, Rot180, Rot270, FlipHorizontal, FlipVertical, Noise };

const char* to_string(TileTransform t);

struct AugmentConfig {
  std::vector<int> rotations{90, 180, 270};
  bool flip_horizontal = true;
  bool flip_vertical = true;
  double noise_sigma = 0.01;
  Index copies_per_oil_tile = 1;
  std::uint64_t seed = 7;

  /// Transforms a copy is drawn from; Noise joins when noise_sigma > 0.
  std::vector<TileTransform> transforms() const;
  void validate() const;
};

/// Geometric transforms move features, labels, and pad mask together.
/// Rotations turn counterclockwise with the row axis pointing up, so
/// Rot90 maps (r, c) to (c, side-1-r).
TileRecord transform_tile(const TileRecord& tile, TileTransform transform, double noise_sigma, std::uint64_t seed);

/// Water-only tiles pass through; each oil tile is followed by
/// `copies_per_oil_tile` transformed copies with fresh ids from `next_id`.
std::vector<TileRecord> augment_tiles(std::span<const TileRecord> train_tiles, const AugmentConfig& cfg,
                                      std::int64_t& next_id);

// ---------------------------------------------------------------------------
// Pipeline config and driver

struct PreprocessConfig {
  double variance_floor = 1e-4;
  double flatness_threshold = 0.1;
  std::optional<std::vector<Index>> fixed_noisy_channels;
  double variance_target = 0.99;
  Index max_components = 32;
  Index tile_size = 64;
  SplitConfig split;
  AugmentConfig augment;
  bool leakage_free = false;

  static PreprocessConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct PreprocessResult {
  std::vector<TileRecord> tiles;  // all splits, augmented copies included
  std::vector<Index> removed_channels;
  ScalerParams scaler;
  PcaModel pca;
  nlohmann::json stage_counts;
};

/// removal -> standardisation -> PCA -> tiling -> split -> augmentation.
/// With `leakage_free`, tiling and splitting come first and the scaler and
/// PCA are fit on non-padded training-tile pixels only.
PreprocessResult run_preprocess(std::span<const HsiCube> cubes, std::span<const LabelMask> masks,
                                const PreprocessConfig& cfg);

nlohmann::json scaler_to_json(const ScalerParams& params);
ScalerParams scaler_from_json(const nlohmann::json& j);
nlohmann::json pca_to_json(const PcaModel& model);
PcaModel pca_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Tile archive: tiles.manifest.json plus tNNNNNN.{feat,lab,pad}.raw

void write_tile_archive(const std::filesystem::path& dir, std::span<const TileRecord> tiles,
                        const nlohmann::json& extra = nlohmann::json::object());
std::vector<TileRecord> read_tile_archive(const std::filesystem::path& dir, nlohmann::json* manifest = nullptr);
std::string tile_stem(std::int64_t tile_id);

}  // namespace hsi
