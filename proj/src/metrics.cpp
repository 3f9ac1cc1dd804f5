#include "headlab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>

namespace headlab {
namespace {

struct FlatDet {
  int image;
  int index;  // insertion index within its image
  const Detection* det;
};

struct GtSlot {
  const GroundTruth* gt;
  bool active;   // participates in this evaluation (in-bucket)
  bool matched;
};

// Which ground truths count for a given evaluation pass.
enum class GtFilter { kAll, kSmall, kMedium, kLarge };

bool passes(GtFilter f, const Box& b) {
  switch (f) {
    case GtFilter::kAll: return true;
    case GtFilter::kSmall: return area_bucket(b) == SizeBucket::kSmall;
    case GtFilter::kMedium: return area_bucket(b) == SizeBucket::kMedium;
    case GtFilter::kLarge: return area_bucket(b) == SizeBucket::kLarge;
  }
  return true;
}

double integrate_ap(const std::vector<double>& recall,
                    const std::vector<double>& precision,
                    ApInterpolation interp) {
  const size_t n = recall.size();
  if (n == 0) return 0.0;
  std::vector<double> envelope(precision);
  for (size_t i = n - 1; i-- > 0;)
    envelope[i] = std::max(envelope[i], envelope[i + 1]);
  if (interp == ApInterpolation::kAllPoints) {
    double ap = 0.0;
    double prev = 0.0;
    for (size_t i = 0; i < n; ++i) {
      ap += (recall[i] - prev) * envelope[i];
      prev = recall[i];
    }
    return ap;
  }
  // legacy 11-point average
  double ap = 0.0;
  for (int t = 0; t <= 10; ++t) {
    const double level = t / 10.0;
    double best = 0.0;
    for (size_t i = 0; i < n; ++i)
      if (recall[i] >= level) best = std::max(best, envelope[i]);
    ap += best / 11.0;
  }
  return ap;
}

struct ClassEval {
  double ap = 0.0;
  int gt_count = 0;
  int det_count = 0;  // detections that entered the precision/recall curve
};

// Greedy matching in score order: a detection takes the unmatched active gt of
// the highest IoU at or above the threshold; failing that, a hit on any
// ignored gt removes it from the pool; otherwise it is a false positive.
ClassEval evaluate_class(int category,
                         const std::vector<std::vector<Detection>>& capped,
                         std::span<const ImageEvalInput> images,
                         double iou_threshold, GtFilter filter,
                         ApInterpolation interp) {
  std::vector<FlatDet> dets;
  std::vector<std::vector<GtSlot>> gts(images.size());
  ClassEval out;
  for (size_t im = 0; im < images.size(); ++im) {
    for (size_t i = 0; i < capped[im].size(); ++i)
      if (capped[im][i].category == category)
        dets.push_back({static_cast<int>(im), static_cast<int>(i), &capped[im][i]});
    for (const GroundTruth& gt : images[im].ground_truths) {
      if (gt.category != category) continue;
      const bool active = passes(filter, gt.box);
      gts[im].push_back({&gt, active, false});
      if (active) ++out.gt_count;
    }
  }
  std::stable_sort(dets.begin(), dets.end(), [](const FlatDet& a, const FlatDet& b) {
    return a.det->score > b.det->score;
  });

  std::vector<double> recall, precision;
  int tp = 0, fp = 0;
  for (const FlatDet& d : dets) {
    auto& slots = gts[d.image];
    int best = -1;
    double best_iou = 0.0;
    bool ignored_hit = false;
    for (size_t j = 0; j < slots.size(); ++j) {
      const double v = iou(d.det->box, slots[j].gt->box);
      if (v < iou_threshold) continue;
      if (!slots[j].active) {
        ignored_hit = true;
        continue;
      }
      if (!slots[j].matched && v > best_iou) {
        best_iou = v;
        best = static_cast<int>(j);
      }
    }
    if (best >= 0) {
      slots[best].matched = true;
      ++tp;
    } else if (ignored_hit) {
      continue;  // matches only out-of-bucket annotation: not counted
    } else {
      ++fp;
    }
    ++out.det_count;
    recall.push_back(out.gt_count > 0 ? static_cast<double>(tp) / out.gt_count
                                      : 0.0);
    precision.push_back(static_cast<double>(tp) / (tp + fp));
  }
  out.ap = out.gt_count > 0 ? integrate_ap(recall, precision, interp) : 0.0;
  return out;
}

// score-descending per-image cap, ties by insertion order
std::vector<std::vector<Detection>> cap_detections(
    std::span<const ImageEvalInput> images, int max_dets) {
  std::vector<std::vector<Detection>> capped(images.size());
  for (size_t im = 0; im < images.size(); ++im) {
    std::vector<int> order(images[im].detections.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return images[im].detections[a].score > images[im].detections[b].score;
    });
    const size_t keep = std::min<size_t>(order.size(),
                                         static_cast<size_t>(max_dets));
    for (size_t i = 0; i < keep; ++i)
      capped[im].push_back(images[im].detections[order[i]]);
  }
  return capped;
}

std::vector<int> categories_present(std::span<const ImageEvalInput> images) {
  std::set<int> cats;
  for (const auto& im : images) {
    for (const auto& gt : im.ground_truths) cats.insert(gt.category);
    for (const auto& d : im.detections) cats.insert(d.category);
  }
  return {cats.begin(), cats.end()};
}

std::optional<double> bucket_ap(const std::vector<int>& cats,
                                const std::vector<std::vector<Detection>>& capped,
                                std::span<const ImageEvalInput> images,
                                double thr, GtFilter filter,
                                ApInterpolation interp) {
  double sum = 0.0;
  int classes = 0;
  for (int c : cats) {
    const ClassEval e = evaluate_class(c, capped, images, thr, filter, interp);
    if (e.gt_count == 0) continue;
    sum += e.ap;
    ++classes;
  }
  if (classes == 0) return std::nullopt;
  return sum / classes;
}

}  // namespace

EvalReport pascal_ap(std::span<const ImageEvalInput> images,
                     double iou_threshold, int max_dets,
                     ApInterpolation interp) {
  if (!(iou_threshold > 0 && iou_threshold <= 1))
    throw std::invalid_argument("pascal_ap: bad IoU threshold");
  if (max_dets < 1) throw std::invalid_argument("pascal_ap: bad detection cap");

  const auto capped = cap_detections(images, max_dets);
  const auto cats = categories_present(images);

  EvalReport report;
  for (size_t im = 0; im < images.size(); ++im) {
    for (const auto& gt : images[im].ground_truths)
      ++report.gt_count[static_cast<int>(area_bucket(gt.box))];
    for (const auto& d : capped[im])
      ++report.det_count[static_cast<int>(area_bucket(d.box))];
  }

  double sum = 0.0;
  for (int c : cats) {
    const ClassEval e =
        evaluate_class(c, capped, images, iou_threshold, GtFilter::kAll, interp);
    if (e.gt_count == 0) {
      report.diagnostics.push_back("class " + std::to_string(c) +
                                   " has detections but no ground truth; "
                                   "excluded from the mean");
      continue;
    }
    report.per_class.push_back({c, e.ap, e.gt_count, e.det_count});
    sum += e.ap;
  }
  report.mean_ap =
      report.per_class.empty() ? 0.0 : sum / report.per_class.size();

  report.ap_small =
      bucket_ap(cats, capped, images, iou_threshold, GtFilter::kSmall, interp);
  report.ap_medium =
      bucket_ap(cats, capped, images, iou_threshold, GtFilter::kMedium, interp);
  report.ap_large =
      bucket_ap(cats, capped, images, iou_threshold, GtFilter::kLarge, interp);
  return report;
}

SizeAps ap_by_size(std::span<const ImageEvalInput> images, double iou_threshold,
                   int max_dets, ApInterpolation interp) {
  const auto capped = cap_detections(images, max_dets);
  const auto cats = categories_present(images);
  SizeAps out;
  out.small =
      bucket_ap(cats, capped, images, iou_threshold, GtFilter::kSmall, interp);
  out.medium =
      bucket_ap(cats, capped, images, iou_threshold, GtFilter::kMedium, interp);
  out.large =
      bucket_ap(cats, capped, images, iou_threshold, GtFilter::kLarge, interp);
  return out;
}

DeltaStatsAccumulator::DeltaStatsAccumulator(double bin_width, DeltaScale scale)
    : bin_width_(bin_width), scale_(scale) {
  if (!(bin_width > 0))
    throw std::invalid_argument("delta stats: bin width must be positive");
}

void DeltaStatsAccumulator::add(const Box& proposal, const Box& intermediate,
                                const Box& ground_truth) {
  const Delta before = encode_delta(proposal, ground_truth, scale_);
  const Delta after = encode_delta(intermediate, ground_truth, scale_);
  before_dx_.push_back(before.dx);
  before_dy_.push_back(before.dy);
  after_dx_.push_back(after.dx);
  after_dy_.push_back(after.dy);
}

namespace {
ComponentStats summarize(const std::vector<double>& v, double bin_width) {
  ComponentStats s;
  s.count = static_cast<int>(v.size());
  if (v.empty()) return s;
  double sum = 0.0, sum2 = 0.0;
  for (double x : v) {
    sum += x;
    sum2 += x * x;
    ++s.histogram[static_cast<int>(std::floor(x / bin_width))];
  }
  s.mean = sum / s.count;
  s.stddev = std::sqrt(std::max(0.0, sum2 / s.count - s.mean * s.mean));
  return s;
}
}  // namespace

DeltaDistribution DeltaStatsAccumulator::finish() const {
  DeltaDistribution d;
  d.bin_width = bin_width_;
  d.before_dx = summarize(before_dx_, bin_width_);
  d.before_dy = summarize(before_dy_, bin_width_);
  d.after_dx = summarize(after_dx_, bin_width_);
  d.after_dy = summarize(after_dy_, bin_width_);
  return d;
}

}  // namespace headlab
