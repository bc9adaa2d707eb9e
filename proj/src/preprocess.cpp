#include "hsi/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Eigenvalues>

#include "hsi/hsio.hpp"
#include "hsi/rng.hpp"

namespace hsi {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Channel screening

double lag1_autocorrelation(const Eigen::Ref<const RowMajorMatrix<float>>& band) {
  const auto pearson = [](const Eigen::ArrayXd& a, const Eigen::ArrayXd& b) {
    if (a.size() < 2) return 0.0;
    const Eigen::ArrayXd da = a - a.mean();
    const Eigen::ArrayXd db = b - b.mean();
    const double denom = std::sqrt(da.square().sum() * db.square().sum());
    return denom > 0.0 ? (da * db).sum() / denom : 0.0;
  };
  const RowMajorMatrix<double> img = band.cast<double>();
  const Index rows = img.rows();
  const Index cols = img.cols();
  double total = 0.0;
  int terms = 0;
  if (cols > 1) {
    const RowMajorMatrix<double> left = img.leftCols(cols - 1);
    const RowMajorMatrix<double> right = img.rightCols(cols - 1);
    total += std::abs(pearson(left.reshaped().array(), right.reshaped().array()));
    ++terms;
  }
  if (rows > 1) {
    const RowMajorMatrix<double> top = img.topRows(rows - 1);
    const RowMajorMatrix<double> bottom = img.bottomRows(rows - 1);
    total += std::abs(pearson(top.reshaped().array(), bottom.reshaped().array()));
    ++terms;
  }
  return terms ? total / terms : 0.0;
}

std::vector<Index> detect_noisy_channels(std::span<const HsiCube> cubes, double variance_floor,
                                         double flatness_threshold) {
  if (cubes.empty()) return {};
  const Index channels = cubes.front().channels();
  std::vector<int> votes(static_cast<std::size_t>(channels), 0);

  for (const HsiCube& cube : cubes) {
    if (cube.channels() != channels) throw DataError("detect_noisy_channels: cubes disagree on channel count");
    Eigen::VectorXd variance(channels);
    for (Index c = 0; c < channels; ++c) {
      const auto band = cube.data.col(c).cast<double>();
      variance[c] = (band.array() - band.mean()).square().mean();
    }
    std::vector<double> sorted(variance.data(), variance.data() + channels);
    std::nth_element(sorted.begin(), sorted.begin() + channels / 2, sorted.end());
    const double median = sorted[static_cast<std::size_t>(channels / 2)];

    std::vector<bool> flagged(static_cast<std::size_t>(channels), false);
    for (Index c : cube.flagged_channels) flagged[static_cast<std::size_t>(c)] = true;
    for (Index c = 0; c < channels; ++c) {
      const double relative = median > 0.0 ? variance[c] / median : 0.0;
      if (relative < variance_floor || lag1_autocorrelation(cube.band(c)) < flatness_threshold) {
        flagged[static_cast<std::size_t>(c)] = true;
      }
    }
    for (Index c = 0; c < channels; ++c) votes[static_cast<std::size_t>(c)] += flagged[static_cast<std::size_t>(c)];
  }

  std::vector<Index> noisy;
  for (Index c = 0; c < channels; ++c) {
    if (votes[static_cast<std::size_t>(c)] == static_cast<int>(cubes.size())) noisy.push_back(c);
  }
  return noisy;
}

HsiCube remove_channels(const HsiCube& cube, std::span<const Index> indices) {
  std::vector<bool> drop(static_cast<std::size_t>(cube.channels()), false);
  for (Index c : indices) {
    if (c < 0 || c >= cube.channels()) throw DataError("remove_channels: channel " + std::to_string(c) + " out of range");
    if (drop[static_cast<std::size_t>(c)]) throw DataError("remove_channels: duplicate channel " + std::to_string(c));
    drop[static_cast<std::size_t>(c)] = true;
  }
  std::vector<Index> keep;
  for (Index c = 0; c < cube.channels(); ++c) {
    if (!drop[static_cast<std::size_t>(c)]) keep.push_back(c);
  }
  if (keep.empty()) throw DataError("remove_channels: cannot remove every channel");

  HsiCube out;
  out.rows = cube.rows;
  out.cols = cube.cols;
  out.resolution_m = cube.resolution_m;
  out.name = cube.name;
  out.data = cube.data(Eigen::all, keep);
  for (std::size_t k = 0; k < keep.size(); ++k) {
    const auto& f = cube.flagged_channels;
    if (std::find(f.begin(), f.end(), keep[k]) != f.end()) out.flagged_channels.push_back(static_cast<Index>(k));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Standardisation

void apply_scaler_inplace(Eigen::MatrixXf& pixels, const ScalerParams& params) {
  if (pixels.cols() != params.means.size()) throw DataError("apply_scaler: channel count mismatch");
  for (Index c = 0; c < pixels.cols(); ++c) {
    const double mu = params.means[c];
    const double sigma = params.stds[c];
    pixels.col(c) = ((pixels.col(c).cast<double>().array() - mu) / sigma).cast<float>().matrix();
  }
}

HsiCube apply_scaler(const HsiCube& cube, const ScalerParams& params) {
  HsiCube out = cube;
  apply_scaler_inplace(out.data, params);
  return out;
}

namespace {

ScalerParams fit_scaler_over(std::span<const HsiCube> cubes) {
  const Index channels = cubes.front().channels();
  Index n = 0;
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(channels);
  for (const auto& cube : cubes) {
    sum += cube.data.cast<double>().colwise().sum().transpose();
    n += cube.pixels();
  }
  if (n < 2) throw DataError("fit_scaler: need at least 2 samples");
  ScalerParams params;
  params.means = sum / static_cast<double>(n);
  Eigen::VectorXd sq = Eigen::VectorXd::Zero(channels);
  for (const auto& cube : cubes) {
    for (Index c = 0; c < channels; ++c) {
      sq[c] += (cube.data.col(c).cast<double>().array() - params.means[c]).square().sum();
    }
  }
  params.stds = (sq / static_cast<double>(n)).cwiseSqrt();
  for (Index c = 0; c < channels; ++c) {
    if (!(params.stds[c] > 0.0)) {
      throw DataError("fit_scaler: channel " + std::to_string(c) + " has zero variance; remove it first");
    }
  }
  return params;
}

}  // namespace

// ---------------------------------------------------------------------------
// PCA

CovarianceAccumulator::CovarianceAccumulator(Index channels)
    : shift_(Eigen::VectorXd::Zero(channels)),
      sum_(Eigen::VectorXd::Zero(channels)),
      scatter_(Eigen::MatrixXd::Zero(channels, channels)) {}

void CovarianceAccumulator::add_block(const Eigen::MatrixXd& block) {
  if (block.cols() != sum_.size()) throw DataError("CovarianceAccumulator: channel count mismatch");
  if (block.rows() == 0) return;
  if (!has_shift_) {
    shift_ = block.row(0).transpose();
    has_shift_ = true;
  }
  const Eigen::MatrixXd centered = block.rowwise() - shift_.transpose();
  sum_ += centered.colwise().sum().transpose();
  scatter_.selfadjointView<Eigen::Lower>().rankUpdate(centered.transpose());
  count_ += block.rows();
}

Eigen::VectorXd CovarianceAccumulator::mean() const {
  return count_ ? Eigen::VectorXd(shift_ + sum_ / static_cast<double>(count_)) : shift_;
}

Eigen::MatrixXd CovarianceAccumulator::covariance() const {
  if (count_ < 2) throw DataError("covariance: need at least 2 samples");
  const Eigen::VectorXd m = sum_ / static_cast<double>(count_);
  Eigen::MatrixXd cov = scatter_.selfadjointView<Eigen::Lower>();
  cov -= static_cast<double>(count_) * m * m.transpose();
  return cov / static_cast<double>(count_ - 1);
}

PcaModel fit_pca(const CovarianceAccumulator& stats, double variance_target, Index max_components) {
  if (!(variance_target > 0.0 && variance_target <= 1.0)) throw ConfigError("fit_pca: variance_target must be in (0,1]");
  if (max_components < 1) throw ConfigError("fit_pca: max_components must be >= 1");

  const Eigen::MatrixXd cov = stats.covariance();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw NumericError("fit_pca: eigendecomposition failed");

  const Index k_in = cov.rows();
  // Eigen returns ascending order.
  Eigen::VectorXd values = solver.eigenvalues().reverse().cwiseMax(0.0);
  Eigen::MatrixXd vectors = solver.eigenvectors().rowwise().reverse();
  const double total = values.sum();
  if (!(total > 0.0)) throw DataError("fit_pca: degenerate input (rank 0)");

  const Eigen::VectorXd ratio = values / total;
  Index needed = k_in;
  double cumulative = 0.0;
  for (Index i = 0; i < k_in; ++i) {
    cumulative += ratio[i];
    if (cumulative >= variance_target) {
      needed = i + 1;
      break;
    }
  }
  const Index k_out = std::min(needed, max_components);

  PcaModel model;
  model.mean = stats.mean();
  model.components = vectors.leftCols(k_out).transpose();
  model.explained_variance = values.head(k_out);
  model.explained_variance_ratio = ratio.head(k_out);
  for (Index i = 0; i < k_out; ++i) {
    Index arg = 0;
    model.components.row(i).cwiseAbs().maxCoeff(&arg);
    if (model.components(i, arg) < 0.0) model.components.row(i) *= -1.0;
  }
  return model;
}

Eigen::MatrixXf project(const Eigen::MatrixXf& pixels, const PcaModel& model) {
  if (pixels.cols() != model.input_channels()) throw DataError("apply_pca: channel count mismatch");
  Eigen::MatrixXf out(pixels.rows(), model.output_channels());
  const Eigen::MatrixXd basis = model.components.transpose();
  constexpr Index block = 4096;
  for (Index start = 0; start < pixels.rows(); start += block) {
    const Index len = std::min(block, pixels.rows() - start);
    const Eigen::MatrixXd centered =
        pixels.middleRows(start, len).cast<double>().rowwise() - model.mean.transpose();
    out.middleRows(start, len) = (centered * basis).cast<float>();
  }
  return out;
}

HsiCube apply_pca(const HsiCube& cube, const PcaModel& model) {
  HsiCube out;
  out.rows = cube.rows;
  out.cols = cube.cols;
  out.resolution_m = cube.resolution_m;
  out.name = cube.name;
  out.data = project(cube.data, model);
  return out;
}

// ---------------------------------------------------------------------------
// Tiling

std::vector<TileRecord> tile_image(const HsiCube& cube, const LabelMask& mask, Index side, std::int64_t first_id) {
  check_pairing(cube, mask);
  if (side < 1) throw ConfigError("tile_image: tile size must be >= 1");
  const Index channels = cube.channels();
  const Index tile_rows = (cube.rows + side - 1) / side;
  const Index tile_cols = (cube.cols + side - 1) / side;

  std::optional<Eigen::VectorXf> image_water_mean;
  const auto image_fallback = [&]() -> const Eigen::VectorXf& {
    if (!image_water_mean) {
      Eigen::VectorXd sum = Eigen::VectorXd::Zero(channels);
      Index count = 0;
      for (Index p = 0; p < cube.pixels(); ++p) {
        if (mask.data()[p] == 0) {
          sum += cube.data.row(p).cast<double>().transpose();
          ++count;
        }
      }
      image_water_mean = count ? Eigen::VectorXf((sum / static_cast<double>(count)).cast<float>())
                               : Eigen::VectorXf(Eigen::VectorXf::Zero(channels));
    }
    return *image_water_mean;
  };

  std::vector<TileRecord> tiles;
  tiles.reserve(static_cast<std::size_t>(tile_rows * tile_cols));
  std::int64_t id = first_id;
  for (Index tr = 0; tr < tile_rows; ++tr) {
    for (Index tc = 0; tc < tile_cols; ++tc) {
      TileRecord tile;
      tile.tile_id = id++;
      tile.source_image = cube.name;
      tile.origin_row = tr * side;
      tile.origin_col = tc * side;
      tile.features = Eigen::MatrixXf::Zero(side * side, channels);
      tile.labels = LabelMask::Zero(side, side);
      tile.pad_mask = LabelMask::Ones(side, side);

      const Index h = std::min(side, cube.rows - tile.origin_row);
      const Index w = std::min(side, cube.cols - tile.origin_col);
      Eigen::VectorXd water_sum = Eigen::VectorXd::Zero(channels);
      Index water_count = 0;
      for (Index r = 0; r < h; ++r) {
        for (Index c = 0; c < w; ++c) {
          const Index src = (tile.origin_row + r) * cube.cols + tile.origin_col + c;
          const Index dst = r * side + c;
          tile.features.row(dst) = cube.data.row(src);
          const std::uint8_t label = mask.data()[src] ? 1 : 0;
          tile.labels(r, c) = label;
          tile.pad_mask(r, c) = 0;
          if (label == 0) {
            water_sum += cube.data.row(src).cast<double>().transpose();
            ++water_count;
          }
        }
      }
      if (h < side || w < side) {
        const Eigen::VectorXf fill = water_count
                                         ? Eigen::VectorXf((water_sum / static_cast<double>(water_count)).cast<float>())
                                         : image_fallback();
        for (Index r = 0; r < side; ++r) {
          for (Index c = 0; c < side; ++c) {
            if (tile.pad_mask(r, c)) tile.features.row(r * side + c) = fill.transpose();
          }
        }
      }
      tiles.push_back(std::move(tile));
    }
  }
  return tiles;
}

// ---------------------------------------------------------------------------
// Splitting

void SplitConfig::validate() const {
  for (double f : {train_frac, val_frac, test_frac}) {
    if (!(f > 0.0 && f < 1.0)) throw ConfigError("split fractions must lie in (0,1)");
  }
  if (std::abs(train_frac + val_frac + test_frac - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");
}

void split_tiles(std::span<TileRecord> tiles, const SplitConfig& cfg) {
  cfg.validate();
  const std::size_t n = tiles.size();
  if (n < 3) throw DataError("split_tiles: need at least 3 tiles");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(cfg.seed);
  rng.shuffle(std::span<std::size_t>(order));
  const auto n_train = static_cast<std::size_t>(std::floor(static_cast<double>(n) * cfg.train_frac + 1e-9));
  const auto n_val = static_cast<std::size_t>(std::floor(static_cast<double>(n) * cfg.val_frac + 1e-9));
  for (std::size_t k = 0; k < n; ++k) {
    tiles[order[k]].split = k < n_train ? Split::Train : (k < n_train + n_val ? Split::Val : Split::Test);
  }
}

// ---------------------------------------------------------------------------
// Augmentation

const char* to_string(TileTransform t) {
  switch (t) {
    case TileTransform::Rot90: return "rot90";
    case TileTransform::Rot180: return "rot180";
    case TileTransform::Rot270: return "rot270";
    case TileTransform::FlipHorizontal: return "flip_h";
    case TileTransform::FlipVertical: return "flip_v";
    case TileTransform::Noise: return "noise";
  }
  return "?";
}

std::vector<TileTransform> AugmentConfig::transforms() const {
  std::vector<TileTransform> out;
  for (int deg : rotations) {
    switch (deg) {
      case 90: out.push_back(TileTransform::Rot90); break;
      case 180: out.push_back(TileTransform::Rot180); break;
      case 270: out.push_back(TileTransform::Rot270); break;
      default: throw ConfigError("augment: rotations must be 90, 180 or 270");
    }
  }
  if (flip_horizontal) out.push_back(TileTransform::FlipHorizontal);
  if (flip_vertical) out.push_back(TileTransform::FlipVertical);
  if (noise_sigma > 0.0) out.push_back(TileTransform::Noise);
  return out;
}

void AugmentConfig::validate() const {
  if (!(noise_sigma >= 0.0)) throw ConfigError("augment: noise_sigma must be >= 0");
  if (copies_per_oil_tile < 0) throw ConfigError("augment: copies_per_oil_tile must be >= 0");
  if (copies_per_oil_tile > 0 && transforms().empty()) {
    throw ConfigError("augment: empty transform set with copies_per_oil_tile > 0");
  }
}

TileRecord transform_tile(const TileRecord& tile, TileTransform transform, double noise_sigma, std::uint64_t seed) {
  const Index n = tile.side();
  TileRecord out = tile;
  if (transform == TileTransform::Noise) {
    Rng rng(seed);
    for (Index c = 0; c < tile.channels(); ++c) {
      const auto column = tile.features.col(c).cast<double>();
      const double sd = std::sqrt((column.array() - column.mean()).square().mean());
      const double sigma = noise_sigma * sd;
      for (Index p = 0; p < n * n; ++p) {
        const double z = rng.normal();
        if (tile.pad_mask.data()[p] == 0) out.features(p, c) = static_cast<float>(tile.features(p, c) + sigma * z);
      }
    }
    return out;
  }

  const auto destination = [&](Index r, Index c) -> std::pair<Index, Index> {
    switch (transform) {
      case TileTransform::Rot90: return {c, n - 1 - r};
      case TileTransform::Rot180: return {n - 1 - r, n - 1 - c};
      case TileTransform::Rot270: return {n - 1 - c, r};
      case TileTransform::FlipHorizontal: return {r, n - 1 - c};
      case TileTransform::FlipVertical: return {n - 1 - r, c};
      default: return {r, c};
    }
  };
  for (Index r = 0; r < n; ++r) {
    for (Index c = 0; c < n; ++c) {
      const auto [dr, dc] = destination(r, c);
      out.features.row(dr * n + dc) = tile.features.row(r * n + c);
      out.labels(dr, dc) = tile.labels(r, c);
      out.pad_mask(dr, dc) = tile.pad_mask(r, c);
    }
  }
  return out;
}

std::vector<TileRecord> augment_tiles(std::span<const TileRecord> train_tiles, const AugmentConfig& cfg,
                                      std::int64_t& next_id) {
  cfg.validate();
  const auto transforms = cfg.transforms();
  Rng rng(cfg.seed);
  std::vector<TileRecord> out;
  out.reserve(train_tiles.size());
  for (const TileRecord& tile : train_tiles) {
    if (tile.split != Split::Train) throw DataError("augment_tiles: only training tiles may be augmented");
    out.push_back(tile);
    if (!tile.has_oil()) continue;
    for (Index k = 0; k < cfg.copies_per_oil_tile; ++k) {
      const TileTransform t = transforms[rng.below(transforms.size())];
      const std::uint64_t noise_seed = rng.next();
      TileRecord copy = transform_tile(tile, t, cfg.noise_sigma, noise_seed);
      copy.tile_id = next_id++;
      copy.augmented = true;
      out.push_back(std::move(copy));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Config

PreprocessConfig PreprocessConfig::from_json(const json& j) {
  PreprocessConfig cfg;
  try {
    cfg.variance_floor = j.value("variance_floor", cfg.variance_floor);
    cfg.flatness_threshold = j.value("flatness_threshold", cfg.flatness_threshold);
    if (j.contains("fixed_noisy_channels") && !j["fixed_noisy_channels"].is_null()) {
      cfg.fixed_noisy_channels = j["fixed_noisy_channels"].get<std::vector<Index>>();
    }
    cfg.variance_target = j.value("variance_target", cfg.variance_target);
    cfg.max_components = j.value("max_components", cfg.max_components);
    cfg.tile_size = j.value("tile_size", cfg.tile_size);
    cfg.leakage_free = j.value("leakage_free", cfg.leakage_free);
    if (j.contains("split")) {
      const json& s = j["split"];
      if (s.contains("fracs")) {
        const auto f = s["fracs"].get<std::vector<double>>();
        if (f.size() != 3) throw ConfigError("split.fracs must have three entries");
        cfg.split.train_frac = f[0];
        cfg.split.val_frac = f[1];
        cfg.split.test_frac = f[2];
      }
      cfg.split.train_frac = s.value("train_frac", cfg.split.train_frac);
      cfg.split.val_frac = s.value("val_frac", cfg.split.val_frac);
      cfg.split.test_frac = s.value("test_frac", cfg.split.test_frac);
      cfg.split.seed = s.value("seed", cfg.split.seed);
    }
    if (j.contains("augment")) {
      const json& a = j["augment"];
      cfg.augment.rotations = a.value("rotations", cfg.augment.rotations);
      if (a.contains("flips")) {
        const auto flips = a["flips"].get<std::vector<std::string>>();
        cfg.augment.flip_horizontal = std::find(flips.begin(), flips.end(), "horizontal") != flips.end();
        cfg.augment.flip_vertical = std::find(flips.begin(), flips.end(), "vertical") != flips.end();
        for (const auto& f : flips) {
          if (f != "horizontal" && f != "vertical") throw ConfigError("augment.flips: unknown flip '" + f + "'");
        }
      }
      cfg.augment.noise_sigma = a.value("noise_sigma", cfg.augment.noise_sigma);
      cfg.augment.copies_per_oil_tile = a.value("copies_per_oil_tile", cfg.augment.copies_per_oil_tile);
      cfg.augment.seed = a.value("seed", cfg.augment.seed);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("preprocess config: ") + e.what());
  }
  cfg.split.validate();
  cfg.augment.validate();
  if (cfg.tile_size < 1) throw ConfigError("tile_size must be >= 1");
  return cfg;
}

json PreprocessConfig::to_json() const {
  json flips = json::array();
  if (augment.flip_horizontal) flips.push_back("horizontal");
  if (augment.flip_vertical) flips.push_back("vertical");
  json j = {{"variance_floor", variance_floor},
            {"flatness_threshold", flatness_threshold},
            {"fixed_noisy_channels", nullptr},
            {"variance_target", variance_target},
            {"max_components", max_components},
            {"tile_size", tile_size},
            {"split", {{"train_frac", split.train_frac}, {"val_frac", split.val_frac}, {"test_frac", split.test_frac},
                       {"seed", split.seed}}},
            {"augment", {{"rotations", augment.rotations}, {"flips", flips}, {"noise_sigma", augment.noise_sigma},
                         {"copies_per_oil_tile", augment.copies_per_oil_tile}, {"seed", augment.seed}}},
            {"leakage_free", leakage_free}};
  if (fixed_noisy_channels) j["fixed_noisy_channels"] = *fixed_noisy_channels;
  return j;
}

json scaler_to_json(const ScalerParams& params) {
  return {{"means", std::vector<double>(params.means.data(), params.means.data() + params.means.size())},
          {"stds", std::vector<double>(params.stds.data(), params.stds.data() + params.stds.size())}};
}

ScalerParams scaler_from_json(const json& j) {
  const auto means = j.at("means").get<std::vector<double>>();
  const auto stds = j.at("stds").get<std::vector<double>>();
  if (means.size() != stds.size()) throw DataError("scaler: means/stds length mismatch");
  ScalerParams p;
  p.means = Eigen::Map<const Eigen::VectorXd>(means.data(), static_cast<Index>(means.size()));
  p.stds = Eigen::Map<const Eigen::VectorXd>(stds.data(), static_cast<Index>(stds.size()));
  return p;
}

json pca_to_json(const PcaModel& model) {
  json rows = json::array();
  for (Index i = 0; i < model.components.rows(); ++i) {
    const Eigen::VectorXd row = model.components.row(i).transpose();
    rows.push_back(std::vector<double>(row.data(), row.data() + row.size()));
  }
  const auto vec = [](const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  return {{"components", rows},
          {"explained_variance", vec(model.explained_variance)},
          {"explained_variance_ratio", vec(model.explained_variance_ratio)},
          {"mean", vec(model.mean)}};
}

PcaModel pca_from_json(const json& j) {
  PcaModel model;
  const auto rows = j.at("components").get<std::vector<std::vector<double>>>();
  const auto mean = j.at("mean").get<std::vector<double>>();
  const auto ev = j.at("explained_variance").get<std::vector<double>>();
  const auto ratio = j.at("explained_variance_ratio").get<std::vector<double>>();
  if (rows.empty() || ev.size() != rows.size() || ratio.size() != rows.size()) throw DataError("pca: inconsistent sizes");
  model.components.resize(static_cast<Index>(rows.size()), static_cast<Index>(mean.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != mean.size()) throw DataError("pca: component length mismatch");
    for (std::size_t k = 0; k < mean.size(); ++k) model.components(static_cast<Index>(i), static_cast<Index>(k)) = rows[i][k];
  }
  model.mean = Eigen::Map<const Eigen::VectorXd>(mean.data(), static_cast<Index>(mean.size()));
  model.explained_variance = Eigen::Map<const Eigen::VectorXd>(ev.data(), static_cast<Index>(ev.size()));
  model.explained_variance_ratio = Eigen::Map<const Eigen::VectorXd>(ratio.data(), static_cast<Index>(ratio.size()));
  return model;
}

// ---------------------------------------------------------------------------
// Driver

namespace {

double oil_fraction(std::span<const TileRecord> tiles, std::optional<Split> split) {
  Index oil = 0;
  Index total = 0;
  for (const auto& t : tiles) {
    if (split && t.split != *split) continue;
    for (Index p = 0; p < t.labels.size(); ++p) {
      if (t.pad_mask.data()[p]) continue;
      oil += t.labels.data()[p];
      ++total;
    }
  }
  return total ? static_cast<double>(oil) / static_cast<double>(total) : 0.0;
}

Eigen::MatrixXf training_pixels(std::span<const TileRecord> tiles) {
  Index count = 0;
  for (const auto& t : tiles) {
    if (t.split == Split::Train) count += (t.pad_mask.array() == 0).count();
  }
  if (count == 0) throw DataError("preprocess: no training pixels");
  Eigen::MatrixXf out(count, tiles.front().channels());
  Index row = 0;
  for (const auto& t : tiles) {
    if (t.split != Split::Train) continue;
    for (Index p = 0; p < t.labels.size(); ++p) {
      if (!t.pad_mask.data()[p]) out.row(row++) = t.features.row(p);
    }
  }
  return out;
}

}  // namespace

PreprocessResult run_preprocess(std::span<const HsiCube> cubes, std::span<const LabelMask> masks,
                                const PreprocessConfig& cfg) {
  if (cubes.empty()) throw DataError("preprocess: no input cubes");
  if (cubes.size() != masks.size()) throw DataError("preprocess: cube and mask counts differ");
  const Index channels_in = cubes.front().channels();
  for (std::size_t i = 0; i < cubes.size(); ++i) {
    check_pairing(cubes[i], masks[i]);
    if (cubes[i].channels() != channels_in) throw DataError("preprocess: cubes disagree on channel count");
  }

  PreprocessResult result;
  result.removed_channels = cfg.fixed_noisy_channels
                                ? *cfg.fixed_noisy_channels
                                : detect_noisy_channels(cubes, cfg.variance_floor, cfg.flatness_threshold);
  std::sort(result.removed_channels.begin(), result.removed_channels.end());

  std::vector<HsiCube> work;
  work.reserve(cubes.size());
  for (const auto& cube : cubes) work.push_back(remove_channels(cube, result.removed_channels));
  const Index channels_kept = work.front().channels();

  std::vector<TileRecord> tiles;
  std::int64_t next_id = 0;
  const auto cut_tiles = [&] {
    for (std::size_t i = 0; i < work.size(); ++i) {
      auto t = tile_image(work[i], masks[i], cfg.tile_size, next_id);
      next_id += static_cast<std::int64_t>(t.size());
      std::move(t.begin(), t.end(), std::back_inserter(tiles));
    }
  };

  if (!cfg.leakage_free) {
    result.scaler = fit_scaler_over(work);
    CovarianceAccumulator stats(channels_kept);
    for (auto& cube : work) {
      apply_scaler_inplace(cube.data, result.scaler);
      stats.add(cube.data);
    }
    result.pca = fit_pca(stats, cfg.variance_target, cfg.max_components);
    for (auto& cube : work) cube = apply_pca(cube, result.pca);
    cut_tiles();
    split_tiles(tiles, cfg.split);
  } else {
    cut_tiles();
    split_tiles(tiles, cfg.split);
    Eigen::MatrixXf train = training_pixels(tiles);
    result.scaler = fit_scaler(train);
    apply_scaler_inplace(train, result.scaler);
    result.pca = fit_pca(train, cfg.variance_target, cfg.max_components);
    for (auto& t : tiles) {
      apply_scaler_inplace(t.features, result.scaler);
      t.features = project(t.features, result.pca);
    }
  }
  work.clear();

  const double train_oil_before = oil_fraction(tiles, Split::Train);
  std::vector<TileRecord> train;
  for (const auto& t : tiles) {
    if (t.split == Split::Train) train.push_back(t);
  }
  auto augmented = augment_tiles(train, cfg.augment, next_id);
  Index copies = 0;
  for (auto& t : augmented) {
    if (t.augmented) {
      tiles.push_back(std::move(t));
      ++copies;
    }
  }

  const auto count_split = [&](Split s, bool include_aug) {
    return std::count_if(tiles.begin(), tiles.end(),
                         [&](const TileRecord& t) { return t.split == s && (include_aug || !t.augmented); });
  };
  result.stage_counts = {
      {"channels_in", channels_in},
      {"channels_removed", result.removed_channels},
      {"channels_after_removal", channels_kept},
      {"pca_components", result.pca.output_channels()},
      {"pca_cumulative_variance_ratio", result.pca.explained_variance_ratio.sum()},
      {"tiles_total", count_split(Split::Train, false) + count_split(Split::Val, false) + count_split(Split::Test, false)},
      {"tiles_per_split",
       {{"train", count_split(Split::Train, false)}, {"val", count_split(Split::Val, false)}, {"test", count_split(Split::Test, false)}}},
      {"augmented_copies", copies},
      {"train_tiles_after_augmentation", count_split(Split::Train, true)},
      {"oil_pixel_fraction",
       {{"train_before_augmentation", train_oil_before},
        {"train", oil_fraction(tiles, Split::Train)},
        {"val", oil_fraction(tiles, Split::Val)},
        {"test", oil_fraction(tiles, Split::Test)}}},
      {"leakage_free", cfg.leakage_free}};
  result.tiles = std::move(tiles);
  return result;
}

}  // namespace hsi
