#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "serpent/error.hpp"
#include "serpent/image.hpp"

namespace serpent {

/// Binary mask as a flat H x W grid of {0,1}.
struct Mask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> bits;

  Mask() = default;
  Mask(int h, int w) : height(h), width(w), bits(static_cast<std::size_t>(h) * w, 0) {}
  Mask(int h, int w, std::vector<std::uint8_t> b) : height(h), width(w), bits(std::move(b)) {
    detail::require(bits.size() == static_cast<std::size_t>(h) * w, "Mask: size does not match dims");
    for (auto v : bits) detail::require(v <= 1, "Mask: values must be 0 or 1");
  }

  static Mask from_image(const Image& img) {
    Mask m(img.height, img.width);
    for (std::size_t i = 0; i < img.size(); ++i) m.bits[i] = img.pixels[i] >= 0.5f ? 1 : 0;
    return m;
  }

  std::uint8_t at(int y, int x) const { return bits[static_cast<std::size_t>(y) * width + x]; }
};

struct ConfusionCounts {
  std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
};

inline ConfusionCounts confusion_counts(const Mask& pred, const Mask& gt) {
  if (pred.height != gt.height || pred.width != gt.width)
    detail::contract_fail("confusion_counts: mask shapes differ (" + std::to_string(pred.height) + "x" +
                          std::to_string(pred.width) + " vs " + std::to_string(gt.height) + "x" + std::to_string(gt.width) + ")");
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.bits.size(); ++i) {
    const bool p = pred.bits[i], g = gt.bits[i];
    c.tp += p && g;
    c.fp += p && !g;
    c.fn += !p && g;
    c.tn += !p && !g;
  }
  return c;
}

struct PixelMetrics {
  double iou = 0, precision = 0, recall = 0, f1 = 0;
};

/// Both masks empty -> every metric 1. Otherwise a zero denominator gives 0.
inline PixelMetrics pixel_metrics(const ConfusionCounts& c) {
  if (c.tp + c.fp + c.fn == 0) return {1, 1, 1, 1};
  auto ratio = [](double num, double den) { return den > 0 ? num / den : 0.0; };
  PixelMetrics m;
  m.iou = ratio(c.tp, c.tp + c.fp + c.fn);
  m.precision = ratio(c.tp, c.tp + c.fp);
  m.recall = ratio(c.tp, c.tp + c.fn);
  m.f1 = ratio(2 * m.precision * m.recall, m.precision + m.recall);
  return m;
}

/// Symmetric Hausdorff distance (pixels) between the positive-pixel sets,
/// by brute force. One empty set -> image diagonal; both empty -> 0.
inline double hausdorff(const Mask& a, const Mask& b) {
  if (a.height != b.height || a.width != b.width) detail::contract_fail("hausdorff: mask shapes differ");
  auto points = [](const Mask& m) {
    std::vector<std::pair<int, int>> pts;
    for (int y = 0; y < m.height; ++y)
      for (int x = 0; x < m.width; ++x)
        if (m.at(y, x)) pts.emplace_back(y, x);
    return pts;
  };
  const auto pa = points(a), pb = points(b);
  if (pa.empty() && pb.empty()) return 0.0;
  if (pa.empty() || pb.empty()) return std::sqrt(static_cast<double>(a.height) * a.height + static_cast<double>(a.width) * a.width);
  auto directed = [](const auto& from, const auto& to) {
    std::int64_t worst = 0;
    for (const auto& [y0, x0] : from) {
      std::int64_t best = std::numeric_limits<std::int64_t>::max();
      for (const auto& [y1, x1] : to) {
        const std::int64_t dy = y0 - y1, dx = x0 - x1;
        best = std::min(best, dy * dy + dx * dx);
        if (best <= worst) break;  // cannot raise the max any more
      }
      worst = std::max(worst, best);
    }
    return worst;
  };
  return std::sqrt(static_cast<double>(std::max(directed(pa, pb), directed(pb, pa))));
}

struct ImageMetrics {
  double iou = 0, precision = 0, recall = 0, f1 = 0, hausdorff = 0;
};

inline ImageMetrics image_metrics(const Mask& pred, const Mask& gt) {
  const auto m = pixel_metrics(confusion_counts(pred, gt));
  return {m.iou, m.precision, m.recall, m.f1, hausdorff(pred, gt)};
}

struct MetricStat {
  double mean = 0, std = 0;
};

struct MetricsReport {
  std::vector<ImageMetrics> per_image;
  MetricStat iou, precision, recall, f1, hausdorff;
};

/// Mean and population standard deviation of every metric.
inline MetricsReport aggregate(const std::vector<ImageMetrics>& per_image) {
  if (per_image.empty()) detail::contract_fail("aggregate: no per-image reports");
  MetricsReport r;
  r.per_image = per_image;
  auto stat = [&](double ImageMetrics::*field) {
    double sum = 0;
    for (const auto& m : per_image) sum += m.*field;
    const double mean = sum / per_image.size();
    double sq = 0;
    for (const auto& m : per_image) sq += (m.*field - mean) * (m.*field - mean);
    return MetricStat{mean, std::sqrt(sq / per_image.size())};
  };
  r.iou = stat(&ImageMetrics::iou);
  r.precision = stat(&ImageMetrics::precision);
  r.recall = stat(&ImageMetrics::recall);
  r.f1 = stat(&ImageMetrics::f1);
  r.hausdorff = stat(&ImageMetrics::hausdorff);
  return r;
}

/// Tab-separated per-image table with a header row.
inline void write_metrics_tsv(std::ostream& out, const MetricsReport& r) {
  out << "image\tiou\tprecision\trecall\tf1\thausdorff\n";
  for (std::size_t i = 0; i < r.per_image.size(); ++i) {
    const auto& m = r.per_image[i];
    out << i << '\t' << m.iou << '\t' << m.precision << '\t' << m.recall << '\t' << m.f1 << '\t' << m.hausdorff << '\n';
  }
}

/// key=value aggregate summary.
inline void write_metrics_kv(std::ostream& out, const MetricsReport& r) {
  const std::pair<const char*, MetricStat> rows[] = {
      {"iou", r.iou}, {"precision", r.precision}, {"recall", r.recall}, {"f1", r.f1}, {"hausdorff", r.hausdorff}};
  out << "images=" << r.per_image.size() << '\n';
  for (const auto& [name, s] : rows) out << name << "_mean=" << s.mean << '\n' << name << "_std=" << s.std << '\n';
}

}  // namespace serpent
