#include "hsi/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace hsi {

ConfusionCounts confusion(const ProbabilityMap& pred, const LabelMask& truth, double threshold,
                          const LabelMask* pad_mask) {
  if (pred.rows() != truth.rows() || pred.cols() != truth.cols()) throw DataError("confusion: dimension mismatch");
  if (pad_mask && (pad_mask->rows() != truth.rows() || pad_mask->cols() != truth.cols())) {
    throw DataError("confusion: pad mask dimension mismatch");
  }
  ConfusionCounts c;
  for (Index i = 0; i < pred.size(); ++i) {
    if (pad_mask && pad_mask->data()[i]) continue;
    const bool oil = static_cast<double>(pred.data()[i]) >= threshold;
    const bool truth_oil = truth.data()[i] != 0;
    if (oil) {
      (truth_oil ? c.tp : c.fp) += 1;
    } else {
      (truth_oil ? c.fn : c.tn) += 1;
    }
  }
  return c;
}

double precision(const ConfusionCounts& c) {
  return c.tp + c.fp ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp) : 0.0;
}

double recall(const ConfusionCounts& c) {
  return c.tp + c.fn ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn) : 0.0;
}

double f1(const ConfusionCounts& c) {
  const double p = precision(c);
  const double r = recall(c);
  return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
}

double accuracy(const ConfusionCounts& c) {
  return c.total() ? static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total()) : 0.0;
}

namespace {

template <typename T>
double auc_impl(std::span<const T> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw DataError("auc_roc: scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  double positive_rank_sum = 0.0;
  std::int64_t positives = 0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && !(scores[order[i]] < scores[order[j + 1]])) ++j;
    // 1-based ranks i+1..j+1 share their midrank.
    const double midrank = 0.5 * static_cast<double>(i + j + 2);
    for (std::size_t k = i; k <= j; ++k) {
      if (labels[order[k]]) {
        positive_rank_sum += midrank;
        ++positives;
      }
    }
    i = j + 1;
  }
  const auto negatives = static_cast<std::int64_t>(n) - positives;
  if (positives == 0 || negatives == 0) throw DataError("auc_roc: undefined for single-class labels");
  const double np = static_cast<double>(positives);
  return (positive_rank_sum - np * (np + 1.0) / 2.0) / (np * static_cast<double>(negatives));
}

}  // namespace

double auc_roc(std::span<const float> scores, std::span<const std::uint8_t> labels) {
  return auc_impl(scores, labels);
}

double auc_roc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  return auc_impl(scores, labels);
}

MetricsReport evaluate_maps(std::span<const ProbabilityMap> preds, std::span<const LabelMask> truths,
                            std::span<const LabelMask> pad_masks, double threshold) {
  if (preds.size() != truths.size() || preds.size() != pad_masks.size()) {
    throw DataError("evaluate_maps: misaligned inputs");
  }
  MetricsReport report;
  report.threshold = threshold;
  std::vector<float> scores;
  std::vector<std::uint8_t> labels;
  for (std::size_t t = 0; t < preds.size(); ++t) {
    report.counts += confusion(preds[t], truths[t], threshold, &pad_masks[t]);
    for (Index i = 0; i < preds[t].size(); ++i) {
      if (pad_masks[t].data()[i]) continue;
      scores.push_back(preds[t].data()[i]);
      labels.push_back(truths[t].data()[i] ? 1 : 0);
    }
  }
  report.pixel_count = report.counts.total();
  report.accuracy = accuracy(report.counts);
  report.precision = precision(report.counts);
  report.recall = recall(report.counts);
  report.f1 = f1(report.counts);
  report.auc = auc_roc(scores, labels);
  return report;
}

TileF1Distribution tile_f1_distribution(std::span<const ProbabilityMap> preds, std::span<const LabelMask> truths,
                                        std::span<const LabelMask> pad_masks, std::span<const std::int64_t> tile_ids,
                                        double threshold) {
  if (preds.size() != truths.size() || preds.size() != pad_masks.size() || preds.size() != tile_ids.size()) {
    throw DataError("tile_f1_distribution: misaligned inputs");
  }
  constexpr int bins = 20;
  TileF1Distribution dist;
  dist.histogram.assign(bins, 0);
  std::int64_t included = 0;
  std::int64_t below = 0;
  for (std::size_t t = 0; t < preds.size(); ++t) {
    const ConfusionCounts c = confusion(preds[t], truths[t], threshold, &pad_masks[t]);
    TileF1 entry{tile_ids[t], f1(c), c.tp + c.fn > 0, c};
    if (entry.included) {
      ++included;
      below += entry.f1 < TileF1Distribution::low_f1;
      const int bin = std::min(bins - 1, static_cast<int>(std::floor(entry.f1 / TileF1Distribution::bin_width + 1e-9)));
      ++dist.histogram[static_cast<std::size_t>(bin)];
    }
    dist.per_tile.push_back(entry);
  }
  if (included > 0) dist.fraction_below = static_cast<double>(below) / static_cast<double>(included);
  return dist;
}

namespace {

std::ofstream open_csv(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

void write_metrics_csv(const std::filesystem::path& path, std::span<const NamedReport> rows) {
  auto out = open_csv(path);
  out << "model,accuracy,precision,recall,f1,auc,threshold,pixels\n";
  for (const auto& [name, r] : rows) {
    out << name << ',' << fmt(r.accuracy) << ',' << fmt(r.precision) << ',' << fmt(r.recall) << ',' << fmt(r.f1)
        << ',' << fmt(r.auc) << ',' << fmt(r.threshold) << ',' << r.pixel_count << '\n';
  }
}

void write_tile_f1_csv(const std::filesystem::path& path, const TileF1Distribution& dist) {
  auto out = open_csv(path);
  out << "tile_id,f1,included,tp,fp,tn,fn\n";
  for (const auto& t : dist.per_tile) {
    out << t.tile_id << ',' << fmt(t.f1) << ',' << (t.included ? 1 : 0) << ',' << t.counts.tp << ',' << t.counts.fp
        << ',' << t.counts.tn << ',' << t.counts.fn << '\n';
  }
}

void write_tile_f1_hist_csv(const std::filesystem::path& path, const TileF1Distribution& dist) {
  auto out = open_csv(path);
  out << "bin_lo,bin_hi,count\n";
  for (std::size_t b = 0; b < dist.histogram.size(); ++b) {
    const double lo = static_cast<double>(b) * TileF1Distribution::bin_width;
    out << fmt(lo) << ',' << fmt(lo + TileF1Distribution::bin_width) << ',' << dist.histogram[b] << '\n';
  }
}

}  // namespace hsi
