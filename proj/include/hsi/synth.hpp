#pragma once

#include <json.hpp>

#include "hsi/types.hpp"

namespace hsi {

struct SceneConfig {
  Index rows = 256;
  Index cols = 256;
  Index channels = 224;
  double oil_fraction_target = 0.05;
  Index n_blobs = 200;  // placement attempts before giving up
  double blob_scale = 14.0;
  std::vector<Index> noisy_channel_indices;
  double sensor_noise_sigma = 0.15;
  double background_sigma = 0.12;  // amplitude of the smooth illumination fields
  double noisy_channel_sigma = 1.0;
  std::uint64_t seed = 1;

  void validate() const;
  static SceneConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct SpectralProfile {
  Eigen::VectorXd water_mean;
  Eigen::VectorXd oil_mean;
  double within_class_sigma = 0.02;

  /// True when the means differ by at least 2 * within_class_sigma on at
  /// least a quarter of the channels.
  bool separable() const;
};

/// Smooth low-order cosine pseudo-spectra satisfying `separable()`.
SpectralProfile default_profile(Index channels, std::uint64_t seed);

struct Scene {
  HsiCube cube;
  LabelMask mask;
};

/// Water background plus smooth illumination fields and per-pixel noise;
/// seeded elliptical slicks with soft edges until the oil share falls within
/// 20% (relative) of the target; listed channels replaced by white noise.
Scene generate_scene(const SceneConfig& cfg, const SpectralProfile& profile);

}  // namespace hsi
