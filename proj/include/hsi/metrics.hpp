#pragma once

#include <filesystem>
#include <optional>
#include <span>

#include "hsi/types.hpp"

namespace hsi {

struct ConfusionCounts {
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::int64_t tn = 0;
  std::int64_t fn = 0;

  std::int64_t total() const { return tp + fp + tn + fn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    tn += o.tn;
    fn += o.fn;
    return *this;
  }
  bool operator==(const ConfusionCounts&) const = default;
};

/// A pixel is predicted oil iff p >= threshold; pixels with pad mask 1 are skipped.
ConfusionCounts confusion(const ProbabilityMap& pred, const LabelMask& truth, double threshold = 0.5,
                          const LabelMask* pad_mask = nullptr);

// Degenerate denominators yield 0.
double precision(const ConfusionCounts& c);
double recall(const ConfusionCounts& c);
double f1(const ConfusionCounts& c);
double accuracy(const ConfusionCounts& c);

/// Mann-Whitney AUC with midranks for tied scores. Throws DataError when
/// only one class is present.
double auc_roc(std::span<const float> scores, std::span<const std::uint8_t> labels);
double auc_roc(std::span<const double> scores, std::span<const std::uint8_t> labels);

struct MetricsReport {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double auc = 0.0;
  double threshold = 0.5;
  std::int64_t pixel_count = 0;
  ConfusionCounts counts;
};

/// Pooled pixel-wise metrics over a set of tiles, padded pixels excluded.
MetricsReport evaluate_maps(std::span<const ProbabilityMap> preds, std::span<const LabelMask> truths,
                            std::span<const LabelMask> pad_masks, double threshold = 0.5);

struct TileF1 {
  std::int64_t tile_id = 0;
  double f1 = 0.0;
  bool included = false;  // false for tiles without ground-truth oil
  ConfusionCounts counts;
};

struct TileF1Distribution {
  static constexpr double bin_width = 0.05;
  static constexpr double low_f1 = 0.7;

  std::vector<TileF1> per_tile;
  std::vector<std::int64_t> histogram;  // 20 bins over [0,1]; the last bin includes 1.0
  /// Share of included tiles with F1 below 0.7; empty when no tile is included.
  std::optional<double> fraction_below;
};

TileF1Distribution tile_f1_distribution(std::span<const ProbabilityMap> preds, std::span<const LabelMask> truths,
                                        std::span<const LabelMask> pad_masks, std::span<const std::int64_t> tile_ids,
                                        double threshold = 0.5);

struct NamedReport {
  std::string model;
  MetricsReport report;
};

void write_metrics_csv(const std::filesystem::path& path, std::span<const NamedReport> rows);
void write_tile_f1_csv(const std::filesystem::path& path, const TileF1Distribution& dist);
void write_tile_f1_hist_csv(const std::filesystem::path& path, const TileF1Distribution& dist);

}  // namespace hsi
