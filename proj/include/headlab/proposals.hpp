#pragma once

#include "headlab/box.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace headlab {

// First-stage stand-in: jitter statistics for proposals generated around the
// ground truths, plus uniformly placed background boxes.
struct JitterParams {
  double center_noise = 0.25;  // gaussian sigma as a fraction of object size
  double scale_noise = 0.35;   // log-space sigma on width and height
  int proposals_per_gt = 8;
  int background_count = 16;
};

// Proposals with their fixed foreground assignment. A proposal is foreground
// iff its best-IoU match reaches the threshold.
struct ProposalBatch {
  std::vector<Box> proposals;
  std::vector<int> matched_gt;      // index into the ground-truth list, -1 if none
  std::vector<double> matched_iou;
  std::vector<std::uint8_t> is_foreground;
  bool empty_ground_truth = false;  // diagnostic: generated without any gt
  bool no_foreground = false;       // diagnostic: sampled batch has no fg
};

// Generates jittered plus background proposals and assigns them at IoU 0.5.
// Deterministic per seed.
ProposalBatch jitter_proposals(std::span<const GroundTruth> ground_truths,
                               const JitterParams& params, std::uint64_t seed,
                               double image_w, double image_h);

// Max-IoU assignment at the given threshold; ties go to the lower gt index.
// A match at exactly the threshold is foreground.
ProposalBatch assign_targets(std::vector<Box> proposals,
                             std::span<const GroundTruth> ground_truths,
                             double threshold = 0.5);

// Samples at most `size` proposals without replacement, capping foreground at
// size / (1 + ratio). When one pool runs short the other fills the remainder.
ProposalBatch sample_minibatch(const ProposalBatch& batch, int size, int ratio,
                               std::uint64_t seed);

}  // namespace headlab
