#include "headlab/heads.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace headlab {
namespace {

struct ArchName {
  Architecture arch;
  const char* name;
};

constexpr ArchName kArchNames[] = {
    {Architecture::kSingle, "single"},
    {Architecture::kDouble, "double"},
    {Architecture::kDecoupledOffsetScaling, "decoupled_os"},
    {Architecture::kDecoupledHorizontalVertical, "decoupled_hv"},
    {Architecture::kDecoupledFull, "decoupled_full"},
    {Architecture::kSequentialOffsetScaling, "sequential_os"},
    {Architecture::kSequentialScalingOffset, "sequential_so"},
    {Architecture::kSequentialHorizontalVertical, "sequential_hv"},
    {Architecture::kSequentialVerticalHorizontal, "sequential_vh"},
    {Architecture::kDecoupledSequential, "decoupled_sequential"},
    {Architecture::kDecoupledSequentialCascade, "decoupled_sequential_cascade"},
};

Tensor boxes_to_tensor(std::span<const Box> boxes) {
  Tensor t = Tensor::zeros({static_cast<Eigen::Index>(boxes.size()), 4});
  for (size_t i = 0; i < boxes.size(); ++i) {
    t.at(i, 0) = boxes[i].x;
    t.at(i, 1) = boxes[i].y;
    t.at(i, 2) = boxes[i].w;
    t.at(i, 3) = boxes[i].h;
  }
  return t;
}

Box row_box(const Tensor& t, Eigen::Index r) {
  return {t.at(r, 0), t.at(r, 1), t.at(r, 2), t.at(r, 3)};
}

std::vector<Box> tensor_to_boxes(const Tensor& t) {
  std::vector<Box> out(t.dim(0));
  for (Eigen::Index r = 0; r < t.dim(0); ++r) out[r] = row_box(t, r);
  return out;
}

void write_box(Tensor& t, Eigen::Index r, const Box& b) {
  t.at(r, 0) = b.x;
  t.at(r, 1) = b.y;
  t.at(r, 2) = b.w;
  t.at(r, 3) = b.h;
}

Tensor decode_rows_full(const Tensor& boxes, const Tensor& delta,
                        const DeltaScale& scale, double clamp) {
  Tensor out = Tensor::zeros({boxes.dim(0), 4});
  for (Eigen::Index r = 0; r < boxes.dim(0); ++r) {
    const Box b = row_box(boxes, r);
    const Delta d{delta.at(r, 0), delta.at(r, 1), delta.at(r, 2),
                  delta.at(r, 3)};
    write_box(out, r, decode_full(b, d, scale, clamp));
  }
  return out;
}

Tensor decode_rows_view(const Tensor& boxes, DeltaView view, const Tensor& v,
                        const DeltaScale& scale, double clamp) {
  Tensor out = Tensor::zeros({boxes.dim(0), 4});
  for (Eigen::Index r = 0; r < boxes.dim(0); ++r) {
    const Box b = row_box(boxes, r);
    write_box(out, r, decode_view(b, view, v.at(r, 0), v.at(r, 1), scale, clamp));
  }
  return out;
}

std::pair<DeltaView, DeltaView> sequence_views(Architecture a) {
  switch (a) {
    case Architecture::kSequentialScalingOffset:
      return {DeltaView::kScaling, DeltaView::kOffset};
    case Architecture::kSequentialHorizontalVertical:
      return {DeltaView::kHorizontal, DeltaView::kVertical};
    case Architecture::kSequentialVerticalHorizontal:
      return {DeltaView::kVertical, DeltaView::kHorizontal};
    default:
      return {DeltaView::kOffset, DeltaView::kScaling};
  }
}

// Cascade target assignment: max-IoU match against the scene annotation,
// ties resolved toward the lower index.
void assign_stage_targets(const Tensor& boxes,
                          const std::vector<GroundTruth>& gts, double threshold,
                          std::vector<int>& labels, std::vector<Box>& matched) {
  const Eigen::Index n = boxes.dim(0);
  labels.assign(n, 0);
  matched.assign(n, Box{});
  for (Eigen::Index r = 0; r < n; ++r) {
    const Box b = row_box(boxes, r);
    double best = 0.0;
    int best_j = -1;
    for (size_t j = 0; j < gts.size(); ++j) {
      const double v = iou(b, gts[j].box);
      if (v > best) {
        best = v;
        best_j = static_cast<int>(j);
      }
    }
    if (best_j >= 0 && best >= threshold) {
      labels[r] = gts[best_j].category;
      matched[r] = gts[best_j].box;
    }
  }
}

}  // namespace

const char* architecture_name(Architecture a) {
  for (const auto& e : kArchNames)
    if (e.arch == a) return e.name;
  throw std::logic_error("unknown architecture");
}

Architecture architecture_from_name(const std::string& name) {
  for (const auto& e : kArchNames)
    if (name == e.name) return e.arch;
  throw std::invalid_argument("unknown architecture: " + name);
}

bool is_sequential(Architecture a) {
  switch (a) {
    case Architecture::kSequentialOffsetScaling:
    case Architecture::kSequentialScalingOffset:
    case Architecture::kSequentialHorizontalVertical:
    case Architecture::kSequentialVerticalHorizontal:
    case Architecture::kDecoupledSequential:
    case Architecture::kDecoupledSequentialCascade:
      return true;
    default:
      return false;
  }
}

bool is_cascade(Architecture a) {
  return a == Architecture::kDecoupledSequentialCascade;
}

NodeId HeadModel::Trunk::apply(Graph& g, NodeId grid) const {
  NodeId h = grid;
  int cin = in_channels;
  for (size_t i = 0; i < conv_w.size(); ++i) {
    h = g.relu(g.conv3x3(h, g.param(*conv_w[i]), g.param(*conv_b[i]),
                         resolution, cin));
    cin = conv_width;
  }
  for (size_t i = 0; i < fc_w.size(); ++i)
    h = g.relu(g.dense(h, g.param(*fc_w[i]), g.param(*fc_b[i])));
  return h;
}

NodeId HeadModel::Projection::apply(Graph& g, NodeId x) const {
  return g.dense(x, g.param(*w), g.param(*b));
}

HeadModel::Trunk HeadModel::make_trunk(const std::string& name,
                                       int in_channels, Rng& rng) {
  const BranchSpec& spec = config_.branch;
  Trunk t;
  t.resolution = config_.pool.resolution;
  t.in_channels = in_channels;
  t.conv_width = spec.conv_width;
  int cin = in_channels;
  for (int i = 0; i < spec.num_conv; ++i) {
    const int fan_in = 9 * cin;
    const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Tensor w = Tensor::zeros({spec.conv_width, fan_in});
    for (Eigen::Index k = 0; k < w.size(); ++k) w[k] = rng.uniform(-s, s);
    t.conv_w.push_back(&store_.create(
        name + ".conv" + std::to_string(i) + ".weight", std::move(w)));
    t.conv_b.push_back(&store_.create(name + ".conv" + std::to_string(i) + ".bias",
                                      Tensor::zeros({spec.conv_width})));
    cin = spec.conv_width;
  }
  int in_width = t.resolution * t.resolution * cin;
  for (int i = 0; i < spec.num_fc; ++i) {
    const double s = 1.0 / std::sqrt(static_cast<double>(in_width));
    Tensor w = Tensor::zeros({spec.fc_width, in_width});
    for (Eigen::Index k = 0; k < w.size(); ++k) w[k] = rng.uniform(-s, s);
    t.fc_w.push_back(&store_.create(name + ".fc" + std::to_string(i) + ".weight",
                                    std::move(w)));
    t.fc_b.push_back(&store_.create(name + ".fc" + std::to_string(i) + ".bias",
                                    Tensor::zeros({spec.fc_width})));
    in_width = spec.fc_width;
  }
  return t;
}

HeadModel::Projection HeadModel::make_projection(const std::string& name,
                                                 int in_width, int out_width,
                                                 Rng& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(in_width));
  Tensor w = Tensor::zeros({out_width, in_width});
  for (Eigen::Index k = 0; k < w.size(); ++k) w[k] = rng.uniform(-s, s);
  Projection p;
  p.w = &store_.create(name + ".weight", std::move(w));
  p.b = &store_.create(name + ".bias", Tensor::zeros({out_width}));
  return p;
}

HeadModel::StageNet HeadModel::make_stage(const std::string& prefix, Rng& rng) {
  const int k = config_.num_classes;
  const int fc = config_.branch.fc_width;
  const int reg_mul = config_.per_class_regression ? k : 1;
  const Architecture arch = is_cascade(config_.architecture)
                                ? Architecture::kDecoupledSequential
                                : config_.architecture;
  StageNet net;
  auto trunk = [&](const char* n) {
    net.trunks.push_back(make_trunk(prefix + n, feature_channels_, rng));
  };
  auto reg = [&](int width) {
    net.proj_reg.push_back(make_projection(
        prefix + "proj_reg" + std::to_string(net.proj_reg.size()), fc,
        width * reg_mul, rng));
  };
  switch (arch) {
    case Architecture::kSingle:
      trunk("h");
      net.proj_cls = make_projection(prefix + "proj_cls", fc, k + 1, rng);
      reg(4);
      break;
    case Architecture::kDouble:
      trunk("h1");
      trunk("h2");
      net.proj_cls = make_projection(prefix + "proj_cls", fc, k + 1, rng);
      reg(4);
      break;
    case Architecture::kDecoupledOffsetScaling:
    case Architecture::kDecoupledHorizontalVertical:
    case Architecture::kDecoupledSequential:
      trunk("h1");
      trunk("h2");
      trunk("h3");
      net.proj_cls = make_projection(prefix + "proj_cls", fc, k + 1, rng);
      reg(2);
      reg(2);
      break;
    case Architecture::kDecoupledFull:
      trunk("h1");
      trunk("h2");
      trunk("h3");
      trunk("h4");
      trunk("h5");
      net.proj_cls = make_projection(prefix + "proj_cls", fc, k + 1, rng);
      reg(1);
      reg(1);
      reg(1);
      reg(1);
      break;
    default:  // shared-branch sequential family
      trunk("h");
      net.proj_cls = make_projection(prefix + "proj_cls", fc, k + 1, rng);
      reg(2);
      reg(2);
      break;
  }
  return net;
}

HeadModel::HeadModel(HeadConfig config, int feature_channels,
                     std::uint64_t seed)
    : config_(std::move(config)), feature_channels_(feature_channels) {
  if (config_.branch.num_fc < 1)
    throw std::invalid_argument("branch needs at least one fc layer");
  if (config_.branch.num_conv < 0 || config_.branch.fc_width < 1 ||
      config_.branch.conv_width < 1)
    throw std::invalid_argument("invalid branch spec");
  if (config_.num_classes < 1)
    throw std::invalid_argument("need at least one foreground class");
  if (config_.loss.alpha < 0 || config_.loss.beta < 0)
    throw std::invalid_argument("loss weights must be nonnegative");
  if (feature_channels_ < 1)
    throw std::invalid_argument("feature channels must be positive");
  if (is_cascade(config_.architecture)) {
    if (config_.cascade_stages < 1)
      throw std::invalid_argument("cascade needs at least one stage");
    if (config_.cascade_fg_thresholds.empty())
      throw std::invalid_argument("cascade needs foreground thresholds");
  }

  Rng rng(derive_seed(seed, "head-init"));
  const int stage_count =
      is_cascade(config_.architecture) ? config_.cascade_stages : 1;
  for (int s = 0; s < stage_count; ++s) {
    const std::string prefix = is_cascade(config_.architecture)
                                   ? "stage" + std::to_string(s) + "."
                                   : "";
    stages_.push_back(make_stage(prefix, rng));
  }
}

NodeId HeadModel::reg_output(Graph& g, const Projection& proj, NodeId features,
                             Eigen::Index width,
                             const std::vector<int>* slice_classes) const {
  NodeId wide = proj.apply(g, features);
  if (!config_.per_class_regression) return wide;
  return g.select_slice(wide, *slice_classes, width);
}

HeadModel::StageTrace HeadModel::run_stage(
    Graph& g, const StageNet& net, NodeId map_node, double stride,
    const Tensor& in_boxes, const std::vector<int>* slice_classes,
    const Tensor* frozen_intermediate) const {
  const Architecture arch = is_cascade(config_.architecture)
                                ? Architecture::kDecoupledSequential
                                : config_.architecture;
  const Eigen::Index n = in_boxes.dim(0);
  const DeltaScale& ds = config_.delta_scale;
  const double clamp = config_.decode_clamp;

  StageTrace tr;
  NodeId boxes_p = g.constant(in_boxes);
  NodeId pooled_p = g.roi_align(map_node, stride, boxes_p, config_.pool, false);

  NodeId cls_feat = net.trunks[0].apply(g, pooled_p);
  tr.logits = net.proj_cls.apply(g, cls_feat);

  // slice indices for class-aware regression, from the matched labels in
  // training or the highest-scoring foreground class at inference
  std::vector<int> slice_idx;
  const std::vector<int>* slices = nullptr;
  if (config_.per_class_regression) {
    slice_idx.resize(n);
    if (slice_classes != nullptr) {
      for (Eigen::Index r = 0; r < n; ++r)
        slice_idx[r] = std::max((*slice_classes)[r], 1) - 1;
    } else {
      const Tensor& lv = g.value(tr.logits);
      for (Eigen::Index r = 0; r < n; ++r) {
        int best = 1;
        for (int c = 2; c <= config_.num_classes; ++c)
          if (lv.at(r, c) > lv.at(r, best)) best = c;
        slice_idx[r] = best - 1;
      }
    }
    slices = &slice_idx;
  }

  if (!is_sequential(arch)) {
    // parallel family: every component is predicted from proposal features
    std::array<NodeId, 4> comp{-1, -1, -1, -1};
    switch (arch) {
      case Architecture::kSingle: {
        NodeId d4 = reg_output(g, net.proj_reg[0], cls_feat, 4, slices);
        for (int i = 0; i < 4; ++i) comp[i] = g.slice_cols(d4, i, 1);
        break;
      }
      case Architecture::kDouble: {
        NodeId feat = net.trunks[1].apply(g, pooled_p);
        NodeId d4 = reg_output(g, net.proj_reg[0], feat, 4, slices);
        for (int i = 0; i < 4; ++i) comp[i] = g.slice_cols(d4, i, 1);
        break;
      }
      case Architecture::kDecoupledOffsetScaling:
      case Architecture::kDecoupledHorizontalVertical: {
        const DeltaView a = arch == Architecture::kDecoupledOffsetScaling
                                ? DeltaView::kOffset
                                : DeltaView::kHorizontal;
        const DeltaView b = arch == Architecture::kDecoupledOffsetScaling
                                ? DeltaView::kScaling
                                : DeltaView::kVertical;
        NodeId va = reg_output(g, net.proj_reg[0],
                               net.trunks[1].apply(g, pooled_p), 2, slices);
        NodeId vb = reg_output(g, net.proj_reg[1],
                               net.trunks[2].apply(g, pooled_p), 2, slices);
        const auto ca = view_components(a);
        const auto cb = view_components(b);
        comp[ca[0]] = g.slice_cols(va, 0, 1);
        comp[ca[1]] = g.slice_cols(va, 1, 1);
        comp[cb[0]] = g.slice_cols(vb, 0, 1);
        comp[cb[1]] = g.slice_cols(vb, 1, 1);
        break;
      }
      default: {  // kDecoupledFull
        for (int i = 0; i < 4; ++i)
          comp[i] = reg_output(g, net.proj_reg[i],
                               net.trunks[1 + i].apply(g, pooled_p), 1, slices);
        break;
      }
    }
    tr.comp = comp;
    Tensor delta = Tensor::zeros({n, 4});
    for (int i = 0; i < 4; ++i) {
      tr.ref[i] = in_boxes;
      delta.mat().col(i) = g.value(comp[i]).mat().col(0);
    }
    tr.refined = decode_rows_full(in_boxes, delta, ds, clamp);
    return tr;
  }

  // sequential family
  const auto [view1, view2] = sequence_views(arch);
  const bool standalone = arch == Architecture::kDecoupledSequential;

  NodeId step1_feat = standalone ? net.trunks[1].apply(g, pooled_p) : cls_feat;
  NodeId v1 = reg_output(g, net.proj_reg[0], step1_feat, 2, slices);
  const auto c1 = view_components(view1);
  tr.comp[c1[0]] = g.slice_cols(v1, 0, 1);
  tr.comp[c1[1]] = g.slice_cols(v1, 1, 1);
  tr.ref[c1[0]] = in_boxes;
  tr.ref[c1[1]] = in_boxes;

  tr.intermediate = frozen_intermediate
                        ? *frozen_intermediate
                        : decode_rows_view(in_boxes, view1, g.value(v1), ds, clamp);
  tr.has_intermediate = true;

  NodeId pooled_o;
  if (config_.through_box_gradients && frozen_intermediate == nullptr) {
    NodeId bo = g.decode_boxes(v1, in_boxes, view1, ds, clamp);
    pooled_o = g.roi_align(map_node, stride, bo, config_.pool, true);
  } else {
    pooled_o = g.roi_align(map_node, stride, g.constant(tr.intermediate),
                           config_.pool, false);
  }

  NodeId step2_feat = standalone ? net.trunks[2].apply(g, pooled_o)
                                 : net.trunks[0].apply(g, pooled_o);
  NodeId v2 = reg_output(g, net.proj_reg[1], step2_feat, 2, slices);
  const auto c2 = view_components(view2);
  tr.comp[c2[0]] = g.slice_cols(v2, 0, 1);
  tr.comp[c2[1]] = g.slice_cols(v2, 1, 1);
  tr.ref[c2[0]] = tr.intermediate;
  tr.ref[c2[1]] = tr.intermediate;

  tr.refined = decode_rows_view(tr.intermediate, view2, g.value(v2), ds, clamp);
  return tr;
}

HeadOutput HeadModel::forward(const FeatureMap& map,
                              std::span<const Box> proposals) const {
  if (proposals.empty())
    throw std::invalid_argument("forward: need at least one proposal");
  Graph g;
  NodeId map_node = g.constant_view(map.values);
  Tensor cur = boxes_to_tensor(proposals);

  const int stage_count = static_cast<int>(stages_.size());
  std::vector<NodeId> stage_logits;
  HeadOutput out;
  StageTrace last;
  for (int s = 0; s < stage_count; ++s) {
    last = run_stage(g, stages_[s], map_node, map.stride, cur, nullptr);
    stage_logits.push_back(last.logits);
    if (is_cascade(config_.architecture))
      out.stage_refined.push_back(tensor_to_boxes(last.refined));
    cur = last.refined;
  }

  NodeId logits = last.logits;
  if (stage_count > 1) {
    std::vector<double> w(stage_logits.size(), 1.0 / stage_logits.size());
    logits = g.linear_combination(stage_logits, w);
  }
  out.class_logits = g.value(logits);
  const Eigen::Index n = cur.dim(0);
  out.offset = Tensor::zeros({n, 2});
  out.scaling = Tensor::zeros({n, 2});
  for (Eigen::Index r = 0; r < n; ++r) {
    out.offset.at(r, 0) = g.value(last.comp[0]).at(r, 0);
    out.offset.at(r, 1) = g.value(last.comp[1]).at(r, 0);
    out.scaling.at(r, 0) = g.value(last.comp[2]).at(r, 0);
    out.scaling.at(r, 1) = g.value(last.comp[3]).at(r, 0);
  }
  out.refined_boxes = tensor_to_boxes(last.refined);
  if (last.has_intermediate)
    out.intermediate_boxes = tensor_to_boxes(last.intermediate);
  return out;
}

LossBreakdown HeadModel::compute_loss(const FeatureMap& map,
                                      const TrainingBatch& batch,
                                      bool backprop,
                                      const PipelineFreeze* use_freeze,
                                      PipelineFreeze* capture_freeze) {
  const size_t n = batch.proposals.size();
  if (n == 0) throw std::invalid_argument("compute_loss: empty batch");
  if (batch.labels.size() != n || batch.matched_gt.size() != n)
    throw std::invalid_argument("compute_loss: batch fields misaligned");
  for (int label : batch.labels)
    if (label < 0 || label > config_.num_classes)
      throw std::invalid_argument("compute_loss: label out of range");
  if (use_freeze != nullptr && capture_freeze != nullptr)
    throw std::invalid_argument("compute_loss: cannot capture and use a freeze");
  if (use_freeze != nullptr && use_freeze->stage_inputs.size() != stages_.size())
    throw std::invalid_argument("compute_loss: freeze does not match stages");

  Graph g;
  NodeId map_node = g.constant_view(map.values);
  Tensor cur = boxes_to_tensor(batch.proposals);

  std::vector<int> labels = batch.labels;
  std::vector<Box> matched = batch.matched_gt;

  std::vector<NodeId> ce_terms, off_terms, sca_terms;
  for (size_t s = 0; s < stages_.size(); ++s) {
    if (s > 0) {
      if (use_freeze != nullptr) {
        cur = use_freeze->stage_inputs[s];
        labels = use_freeze->stage_labels[s];
        matched = use_freeze->stage_matched[s];
      } else {
        const auto& thr = config_.cascade_fg_thresholds;
        assign_stage_targets(cur, batch.scene_gts,
                             thr[std::min(s, thr.size() - 1)], labels, matched);
      }
    }
    if (capture_freeze != nullptr) {
      capture_freeze->stage_inputs.push_back(cur);
      capture_freeze->stage_labels.push_back(labels);
      capture_freeze->stage_matched.push_back(matched);
    }
    StageTrace tr = run_stage(
        g, stages_[s], map_node, map.stride, cur, &labels,
        use_freeze != nullptr && use_freeze->stage_intermediates[s].size() > 0
            ? &use_freeze->stage_intermediates[s]
            : nullptr);
    if (capture_freeze != nullptr)
      capture_freeze->stage_intermediates.push_back(
          tr.has_intermediate ? tr.intermediate : Tensor());
    ce_terms.push_back(g.softmax_cross_entropy(tr.logits, labels));

    std::vector<Eigen::Index> fg;
    for (size_t r = 0; r < labels.size(); ++r)
      if (labels[r] > 0) fg.push_back(static_cast<Eigen::Index>(r));
    if (!fg.empty()) {
      const Eigen::Index m = static_cast<Eigen::Index>(fg.size());
      Tensor t_xy = Tensor::zeros({m, 2});
      Tensor t_wh = Tensor::zeros({m, 2});
      for (Eigen::Index i = 0; i < m; ++i) {
        const Eigen::Index r = fg[i];
        const Box& gt = matched[r];
        t_xy.at(i, 0) = encode_delta(row_box(tr.ref[0], r), gt, config_.delta_scale).dx;
        t_xy.at(i, 1) = encode_delta(row_box(tr.ref[1], r), gt, config_.delta_scale).dy;
        t_wh.at(i, 0) = encode_delta(row_box(tr.ref[2], r), gt, config_.delta_scale).dw;
        t_wh.at(i, 1) = encode_delta(row_box(tr.ref[3], r), gt, config_.delta_scale).dh;
      }
      NodeId pred_xy = g.concat_cols(
          {g.gather_rows(tr.comp[0], fg), g.gather_rows(tr.comp[1], fg)});
      NodeId pred_wh = g.concat_cols(
          {g.gather_rows(tr.comp[2], fg), g.gather_rows(tr.comp[3], fg)});
      off_terms.push_back(g.smooth_l1(pred_xy, std::move(t_xy)));
      sca_terms.push_back(g.smooth_l1(pred_wh, std::move(t_wh)));
    }
    cur = tr.refined;
  }

  LossBreakdown out;
  std::vector<NodeId> total_terms;
  std::vector<double> total_coeffs;

  std::vector<double> ones(ce_terms.size(), 1.0);
  NodeId cls_total = g.linear_combination(ce_terms, ones);
  out.cls = g.scalar(cls_total);
  total_terms.push_back(cls_total);
  total_coeffs.push_back(1.0);

  if (!off_terms.empty()) {
    std::vector<double> w(off_terms.size(), 1.0);
    NodeId off_total = g.linear_combination(off_terms, w);
    NodeId sca_total = g.linear_combination(sca_terms, w);
    out.off = g.scalar(off_total);
    out.sca = g.scalar(sca_total);
    total_terms.push_back(off_total);
    total_coeffs.push_back(config_.loss.alpha);
    total_terms.push_back(sca_total);
    total_coeffs.push_back(config_.loss.beta);
  } else {
    out.no_foreground = true;
  }

  NodeId total = g.linear_combination(total_terms, total_coeffs);
  out.total = g.scalar(total);

  if (backprop) {
    store_.zero_grads();
    g.backward(total);
  }
  return out;
}

}  // namespace headlab
