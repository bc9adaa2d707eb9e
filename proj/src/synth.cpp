#include "hsi/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "hsi/rng.hpp"

namespace hsi {

using nlohmann::json;
using std::numbers::pi;

void SceneConfig::validate() const {
  if (rows < 1 || cols < 1) throw ConfigError("synth: rows and cols must be >= 1");
  if (channels < 8) throw ConfigError("synth: channels must be >= 8");
  if (!(oil_fraction_target > 0.0 && oil_fraction_target < 1.0)) {
    throw ConfigError("synth: oil_fraction_target must lie in (0,1)");
  }
  if (n_blobs < 1 || !(blob_scale > 0.0)) throw ConfigError("synth: n_blobs and blob_scale must be positive");
  if (sensor_noise_sigma < 0.0 || background_sigma < 0.0 || noisy_channel_sigma <= 0.0) {
    throw ConfigError("synth: noise amplitudes must be non-negative");
  }
  for (Index c : noisy_channel_indices) {
    if (c < 0 || c >= channels) throw ConfigError("synth: noisy channel index out of range");
  }
}

SceneConfig SceneConfig::from_json(const json& j) {
  SceneConfig c;
  try {
    c.rows = j.value("rows", c.rows);
    c.cols = j.value("cols", c.cols);
    c.channels = j.value("channels", c.channels);
    c.oil_fraction_target = j.value("oil_fraction_target", c.oil_fraction_target);
    c.n_blobs = j.value("n_blobs", c.n_blobs);
    c.blob_scale = j.value("blob_scale", c.blob_scale);
    c.noisy_channel_indices = j.value("noisy_channel_indices", c.noisy_channel_indices);
    c.sensor_noise_sigma = j.value("sensor_noise_sigma", c.sensor_noise_sigma);
    c.background_sigma = j.value("background_sigma", c.background_sigma);
    c.noisy_channel_sigma = j.value("noisy_channel_sigma", c.noisy_channel_sigma);
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("synth config: ") + e.what());
  }
  c.validate();
  return c;
}

json SceneConfig::to_json() const {
  return {{"rows", rows},
          {"cols", cols},
          {"channels", channels},
          {"oil_fraction_target", oil_fraction_target},
          {"n_blobs", n_blobs},
          {"blob_scale", blob_scale},
          {"noisy_channel_indices", noisy_channel_indices},
          {"sensor_noise_sigma", sensor_noise_sigma},
          {"background_sigma", background_sigma},
          {"noisy_channel_sigma", noisy_channel_sigma},
          {"seed", seed}};
}

bool SpectralProfile::separable() const {
  if (water_mean.size() != oil_mean.size() || water_mean.size() == 0) return false;
  const auto gaps = ((oil_mean - water_mean).array().abs() >= 2.0 * within_class_sigma).count();
  return 4 * gaps >= water_mean.size();
}

namespace {

// Sum of a few random low-order cosines over normalised wavelength.
Eigen::VectorXd cosine_mixture(Index channels, Rng& rng, int terms, double amp_lo, double amp_hi) {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(channels);
  for (int k = 1; k <= terms; ++k) {
    const double amp = rng.uniform(amp_lo, amp_hi);
    const double phase = rng.uniform(0.0, 2.0 * pi);
    for (Index c = 0; c < channels; ++c) {
      const double t = channels > 1 ? static_cast<double>(c) / static_cast<double>(channels - 1) : 0.0;
      out[c] += amp * std::cos(pi * k * t + phase);
    }
  }
  return out;
}

}  // namespace

SpectralProfile default_profile(Index channels, std::uint64_t seed) {
  if (channels < 8) throw ConfigError("default_profile: channels must be >= 8");
  Rng rng(seed);
  SpectralProfile p;
  p.within_class_sigma = 0.02;
  p.water_mean = Eigen::VectorXd::Constant(channels, 0.3) + cosine_mixture(channels, rng, 3, 0.02, 0.06);
  const double freq = rng.uniform(1.0, 3.0);
  const double phase = rng.uniform(0.0, 2.0 * pi);
  double amplitude = 6.0 * p.within_class_sigma;
  Eigen::VectorXd shape(channels);
  for (Index c = 0; c < channels; ++c) {
    const double t = static_cast<double>(c) / static_cast<double>(channels - 1);
    shape[c] = std::cos(pi * freq * t + phase);
  }
  do {
    p.oil_mean = p.water_mean + amplitude * shape;
    amplitude *= 1.25;
  } while (!p.separable());
  return p;
}

namespace {

struct Blob {
  double cy, cx, a, b, cos_t, sin_t, wobble1, wobble2, phase1, phase2;

  // Normalised radius; the slick boundary sits at 1.
  double rho(double y, double x) const {
    const double dy = y - cy;
    const double dx = x - cx;
    const double u = (dx * cos_t + dy * sin_t) / a;
    const double v = (-dx * sin_t + dy * cos_t) / b;
    const double theta = std::atan2(v, u);
    const double edge = 1.0 + wobble1 * std::sin(3.0 * theta + phase1) + wobble2 * std::sin(5.0 * theta + phase2);
    return std::sqrt(u * u + v * v) / edge;
  }
};

// Oil abundance ramps from 1 inside to 0 outside across rho in [0.85, 1.15].
double abundance(double rho) { return std::clamp((1.15 - rho) / 0.3, 0.0, 1.0); }

Eigen::MatrixXd smooth_field(Index rows, Index cols, Rng& rng) {
  Eigen::MatrixXd field = Eigen::MatrixXd::Zero(rows, cols);
  for (int m = 0; m < 4; ++m) {
    const double ky = rng.uniform(0.0, 2.5);
    const double kx = rng.uniform(0.0, 2.5);
    const double phase = rng.uniform(0.0, 2.0 * pi);
    const double amp = rng.uniform(0.5, 1.0);
    for (Index r = 0; r < rows; ++r) {
      for (Index c = 0; c < cols; ++c) {
        field(r, c) += amp * std::cos(2.0 * pi * (ky * static_cast<double>(r) / static_cast<double>(rows) +
                                                  kx * static_cast<double>(c) / static_cast<double>(cols)) +
                                      phase);
      }
    }
  }
  const double mean = field.mean();
  const double sd = std::sqrt((field.array() - mean).square().mean());
  return sd > 0.0 ? Eigen::MatrixXd((field.array() - mean) / sd) : Eigen::MatrixXd(field.array() - mean);
}

}  // namespace

Scene generate_scene(const SceneConfig& cfg, const SpectralProfile& profile) {
  cfg.validate();
  if (profile.water_mean.size() != cfg.channels || profile.oil_mean.size() != cfg.channels) {
    throw ConfigError("generate_scene: profile length does not match channel count");
  }
  Rng rng(cfg.seed);
  const Index rows = cfg.rows;
  const Index cols = cfg.cols;
  const double total = static_cast<double>(rows * cols);
  const double lo = 0.8 * cfg.oil_fraction_target;
  const double hi = 1.2 * cfg.oil_fraction_target;

  // Slick placement.
  Eigen::MatrixXd alpha = Eigen::MatrixXd::Zero(rows, cols);
  Index oil = 0;
  bool reached = false;
  for (Index attempt = 0; attempt < cfg.n_blobs && !reached; ++attempt) {
    Blob blob;
    blob.cy = rng.uniform(0.0, static_cast<double>(rows));
    blob.cx = rng.uniform(0.0, static_cast<double>(cols));
    blob.a = cfg.blob_scale * rng.uniform(0.6, 1.6);
    blob.b = blob.a * rng.uniform(0.3, 1.0);
    const double angle = rng.uniform(0.0, pi);
    blob.cos_t = std::cos(angle);
    blob.sin_t = std::sin(angle);
    blob.wobble1 = rng.uniform(0.0, 0.15);
    blob.wobble2 = rng.uniform(0.0, 0.08);
    blob.phase1 = rng.uniform(0.0, 2.0 * pi);
    blob.phase2 = rng.uniform(0.0, 2.0 * pi);

    const double reach = 1.3 * blob.a;
    const Index r0 = std::max<Index>(0, static_cast<Index>(std::floor(blob.cy - reach)));
    const Index r1 = std::min<Index>(rows - 1, static_cast<Index>(std::ceil(blob.cy + reach)));
    const Index c0 = std::max<Index>(0, static_cast<Index>(std::floor(blob.cx - reach)));
    const Index c1 = std::min<Index>(cols - 1, static_cast<Index>(std::ceil(blob.cx + reach)));
    Eigen::MatrixXd proposal = alpha;
    for (Index r = r0; r <= r1; ++r) {
      for (Index c = c0; c <= c1; ++c) {
        const double a = abundance(blob.rho(static_cast<double>(r) + 0.5, static_cast<double>(c) + 0.5));
        proposal(r, c) = std::max(proposal(r, c), a);
      }
    }
    const Index proposed_oil = (proposal.array() >= 0.5).count();
    if (static_cast<double>(proposed_oil) / total > hi) continue;
    alpha = std::move(proposal);
    oil = proposed_oil;
    reached = static_cast<double>(oil) / total >= lo;
  }
  if (!reached) {
    throw DataError("generate_scene: blob budget exhausted before reaching the oil fraction target");
  }

  Scene scene;
  scene.mask = LabelMask::Zero(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) scene.mask(r, c) = alpha(r, c) >= 0.5 ? 1 : 0;
  }

  // Smooth illumination fields with smooth, bounded spectral loadings.
  constexpr int n_fields = 3;
  std::vector<Eigen::MatrixXd> fields;
  std::vector<Eigen::VectorXd> loadings;
  for (int f = 0; f < n_fields; ++f) {
    fields.push_back(smooth_field(rows, cols, rng));
    Eigen::VectorXd shape = cosine_mixture(cfg.channels, rng, 2, 0.05, 0.15);
    loadings.push_back(cfg.background_sigma * (Eigen::VectorXd::Constant(cfg.channels, 0.85) + shape));
  }

  scene.cube = HsiCube(rows, cols, cfg.channels);
  scene.cube.name = "scene";
  std::vector<bool> noisy(static_cast<std::size_t>(cfg.channels), false);
  for (Index c : cfg.noisy_channel_indices) noisy[static_cast<std::size_t>(c)] = true;

  for (Index ch = 0; ch < cfg.channels; ++ch) {
    auto band = scene.cube.band(ch);
    if (noisy[static_cast<std::size_t>(ch)]) {
      for (Index r = 0; r < rows; ++r) {
        for (Index c = 0; c < cols; ++c) band(r, c) = static_cast<float>(profile.water_mean[ch] + cfg.noisy_channel_sigma * rng.normal());
      }
      continue;
    }
    const double water = profile.water_mean[ch];
    const double gap = profile.oil_mean[ch] - water;
    for (Index r = 0; r < rows; ++r) {
      for (Index c = 0; c < cols; ++c) {
        double v = water + alpha(r, c) * gap;
        for (int f = 0; f < n_fields; ++f) v += loadings[static_cast<std::size_t>(f)][ch] * fields[static_cast<std::size_t>(f)](r, c);
        v += cfg.sensor_noise_sigma * rng.normal();
        band(r, c) = static_cast<float>(v);
      }
    }
  }
  return scene;
}

}  // namespace hsi
