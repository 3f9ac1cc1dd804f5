#include "headlab/proposals.hpp"

#include "headlab/random.hpp"

#include <algorithm>
#include <stdexcept>

namespace headlab {
namespace {

// partial Fisher-Yates: picks `take` indices from pool without replacement
std::vector<int> draw_without_replacement(std::vector<int> pool, size_t take,
                                          Rng& rng) {
  for (size_t i = 0; i < take; ++i) {
    const size_t j =
        i + static_cast<size_t>(rng.uniform_int(0, static_cast<std::int64_t>(
                                                       pool.size() - i - 1)));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(take);
  return pool;
}

}  // namespace

ProposalBatch jitter_proposals(std::span<const GroundTruth> ground_truths,
                               const JitterParams& params, std::uint64_t seed,
                               double image_w, double image_h) {
  if (params.center_noise < 0 || params.scale_noise < 0)
    throw std::invalid_argument("jitter_proposals: noise must be nonnegative");
  Rng rng(derive_seed(seed, "jitter"));

  std::vector<Box> proposals;
  for (const GroundTruth& gt : ground_truths) {
    if (!gt.box.valid())
      throw std::invalid_argument("jitter_proposals: invalid ground truth");
    for (int i = 0; i < params.proposals_per_gt; ++i) {
      Box p;
      p.x = gt.box.x + rng.normal() * params.center_noise * gt.box.w;
      p.y = gt.box.y + rng.normal() * params.center_noise * gt.box.h;
      p.w = std::max(1.0, gt.box.w * std::exp(rng.normal() * params.scale_noise));
      p.h = std::max(1.0, gt.box.h * std::exp(rng.normal() * params.scale_noise));
      proposals.push_back(p);
    }
  }
  const double max_bg = std::min(image_w, image_h) * 0.7;
  for (int i = 0; i < params.background_count; ++i) {
    Box p;
    p.w = rng.log_uniform(8.0, std::max(8.0, max_bg));
    p.h = rng.log_uniform(8.0, std::max(8.0, max_bg));
    p.x = rng.uniform(0.0, image_w);
    p.y = rng.uniform(0.0, image_h);
    proposals.push_back(p);
  }

  ProposalBatch batch = assign_targets(std::move(proposals), ground_truths);
  batch.empty_ground_truth = ground_truths.empty();
  return batch;
}

ProposalBatch assign_targets(std::vector<Box> proposals,
                             std::span<const GroundTruth> ground_truths,
                             double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0))
    throw std::invalid_argument("assign_targets: threshold must be in (0,1)");
  ProposalBatch batch;
  batch.proposals = std::move(proposals);
  const size_t n = batch.proposals.size();
  batch.matched_gt.assign(n, -1);
  batch.matched_iou.assign(n, 0.0);
  batch.is_foreground.assign(n, 0);
  bool any_fg = false;
  for (size_t i = 0; i < n; ++i) {
    double best = 0.0;
    int best_j = -1;
    for (size_t j = 0; j < ground_truths.size(); ++j) {
      const double v = iou(batch.proposals[i], ground_truths[j].box);
      if (v > best) {
        best = v;
        best_j = static_cast<int>(j);
      }
    }
    batch.matched_gt[i] = best_j;
    batch.matched_iou[i] = best;
    if (best_j >= 0 && best >= threshold) {
      batch.is_foreground[i] = 1;
      any_fg = true;
    }
  }
  batch.no_foreground = !any_fg;
  return batch;
}

ProposalBatch sample_minibatch(const ProposalBatch& batch, int size, int ratio,
                               std::uint64_t seed) {
  if (batch.proposals.empty())
    throw std::invalid_argument("sample_minibatch: empty batch");
  if (size < 4) throw std::invalid_argument("sample_minibatch: size must be >= 4");
  if (ratio < 0) throw std::invalid_argument("sample_minibatch: negative ratio");

  std::vector<int> fg_pool, bg_pool;
  for (size_t i = 0; i < batch.proposals.size(); ++i)
    (batch.is_foreground[i] ? fg_pool : bg_pool).push_back(static_cast<int>(i));

  Rng rng(derive_seed(seed, "minibatch"));
  const size_t fg_cap = static_cast<size_t>(size) / (1 + static_cast<size_t>(ratio));
  size_t fg_take = std::min(fg_cap, fg_pool.size());
  size_t bg_take = std::min(static_cast<size_t>(size) - fg_take, bg_pool.size());
  // short background pool: fill the remainder from foreground
  fg_take = std::min(fg_pool.size(), static_cast<size_t>(size) - bg_take);

  std::vector<int> chosen = draw_without_replacement(fg_pool, fg_take, rng);
  std::vector<int> bg = draw_without_replacement(bg_pool, bg_take, rng);
  chosen.insert(chosen.end(), bg.begin(), bg.end());

  ProposalBatch out;
  out.empty_ground_truth = batch.empty_ground_truth;
  bool any_fg = false;
  for (int idx : chosen) {
    out.proposals.push_back(batch.proposals[idx]);
    out.matched_gt.push_back(batch.matched_gt[idx]);
    out.matched_iou.push_back(batch.matched_iou[idx]);
    out.is_foreground.push_back(batch.is_foreground[idx]);
    any_fg = any_fg || batch.is_foreground[idx];
  }
  out.no_foreground = !any_fg;
  return out;
}

}  // namespace headlab
