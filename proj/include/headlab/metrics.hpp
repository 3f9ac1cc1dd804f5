#pragma once

#include "headlab/box.hpp"

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace headlab {

// One evaluated image: its surviving detections and its annotation.
struct ImageEvalInput {
  std::vector<Detection> detections;
  std::vector<GroundTruth> ground_truths;
};

enum class ApInterpolation {
  kAllPoints,    // area under the precision envelope (default)
  kElevenPoint,  // legacy 11-recall-point average
};

struct ClassAp {
  int category = 0;
  double ap = 0.0;
  int gt_count = 0;
  int det_count = 0;  // after the per-image cap
};

struct EvalReport {
  std::vector<ClassAp> per_class;  // classes with at least one gt
  double mean_ap = 0.0;            // unweighted over per_class
  std::optional<double> ap_small, ap_medium, ap_large;
  int gt_count[3] = {0, 0, 0};     // per size bucket
  int det_count[3] = {0, 0, 0};
  std::vector<std::string> diagnostics;
};

struct SizeAps {
  std::optional<double> small, medium, large;
};

// Greedy-matched average precision at one IoU threshold, detections capped at
// `max_dets` per image (across classes, by score) before matching. Classes
// without ground truth are excluded from the mean with a diagnostic.
EvalReport pascal_ap(std::span<const ImageEvalInput> images,
                     double iou_threshold = 0.5, int max_dets = 100,
                     ApInterpolation interp = ApInterpolation::kAllPoints);

// Size-restricted evaluation: per bucket, out-of-bucket ground truths are
// ignored rather than penalized, and detections matching only an ignored gt
// are dropped from the false-positive pool. An empty bucket is absent, not 0.
SizeAps ap_by_size(std::span<const ImageEvalInput> images,
                   double iou_threshold = 0.5, int max_dets = 100,
                   ApInterpolation interp = ApInterpolation::kAllPoints);

// Summary of one delta component's residuals, with a fixed-width histogram.
struct ComponentStats {
  int count = 0;
  double mean = 0.0;
  double stddev = 0.0;               // population standard deviation
  std::map<int, int> histogram;      // bin index -> count; bin b covers
                                     // [b*bin_width, (b+1)*bin_width)
};

struct DeltaDistribution {
  double bin_width = 0.5;
  ComponentStats before_dx, before_dy;  // residuals against the proposal
  ComponentStats after_dx, after_dy;    // residuals against the shifted box
};

// Accumulates offset residual statistics over matched (proposal,
// intermediate, ground truth) triples.
class DeltaStatsAccumulator {
 public:
  explicit DeltaStatsAccumulator(double bin_width = 0.5,
                                 DeltaScale scale = {});
  void add(const Box& proposal, const Box& intermediate,
           const Box& ground_truth);
  DeltaDistribution finish() const;

 private:
  double bin_width_;
  DeltaScale scale_;
  std::vector<double> before_dx_, before_dy_, after_dx_, after_dy_;
};

}  // namespace headlab
