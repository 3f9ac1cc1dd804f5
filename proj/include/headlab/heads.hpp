#pragma once

#include "headlab/box.hpp"
#include "headlab/feature_map.hpp"
#include "headlab/graph.hpp"
#include "headlab/optim.hpp"
#include "headlab/random.hpp"

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace headlab {

// The detection-head family. Parallel members emit the whole delta (or its
// decoupled pieces) from proposal features; sequential members decode the
// first view, re-pool features at the shifted box, then emit the second view.
enum class Architecture {
  kSingle,                        // one shared branch for everything
  kDouble,                        // classification and regression branches
  kDecoupledOffsetScaling,        // standalone offset and scaling branches
  kDecoupledHorizontalVertical,   // x-axis and y-axis branches
  kDecoupledFull,                 // one branch per delta component
  kSequentialOffsetScaling,       // shared branch, offset step then scaling
  kSequentialScalingOffset,
  kSequentialHorizontalVertical,
  kSequentialVerticalHorizontal,
  kDecoupledSequential,           // standalone branches, offset then scaling
  kDecoupledSequentialCascade,
};

const char* architecture_name(Architecture a);
Architecture architecture_from_name(const std::string& name);
bool is_sequential(Architecture a);
bool is_cascade(Architecture a);

// Branch topology. The default "Conv-0 FC-2" with widths 256/1024 is shared
// by every branch of a model.
struct BranchSpec {
  int num_conv = 0;
  int num_fc = 2;
  int conv_width = 256;
  int fc_width = 1024;
};

struct LossWeights {
  double alpha = 1.0;
  double beta = 1.0;
};

struct HeadConfig {
  Architecture architecture = Architecture::kDecoupledSequential;
  BranchSpec branch;
  LossWeights loss;
  int num_classes = 10;  // K; logits are K+1 wide with background at 0
  RoiSpec pool;          // both poolings of a sequential head share this
  DeltaScale delta_scale;
  double decode_clamp = kDecodeClamp;
  // When set, the scaling loss of a sequential head backpropagates through
  // the coordinates of the intermediate box into the first-step branch.
  bool through_box_gradients = false;
  bool per_class_regression = false;
  int cascade_stages = 2;
  std::vector<double> cascade_fg_thresholds = {0.5, 0.6};
};

struct HeadOutput {
  Tensor class_logits;                 // N x (K+1)
  Tensor offset;                       // N x 2 predicted (dx, dy)
  Tensor scaling;                      // N x 2 predicted (dw, dh)
  std::vector<Box> refined_boxes;
  // The step-1 box of sequential architectures; absent otherwise.
  std::optional<std::vector<Box>> intermediate_boxes;
  // Per-stage refined boxes of the cascade; empty otherwise.
  std::vector<std::vector<Box>> stage_refined;
};

// One training minibatch with its fixed foreground assignment.
struct TrainingBatch {
  std::vector<Box> proposals;
  std::vector<int> labels;            // 0 background, 1..K foreground
  std::vector<Box> matched_gt;        // aligned with proposals; read where label > 0
  std::vector<GroundTruth> scene_gts; // full scene annotation, for cascade stages
};

struct LossBreakdown {
  double total = 0.0;
  double cls = 0.0;
  double off = 0.0;
  double sca = 0.0;
  bool no_foreground = false;
};

// Geometry that the detached (through_box_gradients = false) objective treats
// as constant: per-stage input boxes, intermediate boxes and the cascade's
// re-assigned targets. Capturing it at a base point and replaying it makes
// the loss a smooth function of the parameters alone, which is what a
// finite-difference check of the detached gradients must differentiate.
struct PipelineFreeze {
  std::vector<Tensor> stage_inputs;
  std::vector<Tensor> stage_intermediates;  // size 0 tensor for parallel stages
  std::vector<std::vector<int>> stage_labels;
  std::vector<std::vector<Box>> stage_matched;
};

// A detection head with its parameters. Forward passes on const models are
// safe to run concurrently; compute_loss with backprop mutates gradients and
// is single-writer.
class HeadModel {
 public:
  HeadModel(HeadConfig config, int feature_channels, std::uint64_t seed);

  const HeadConfig& config() const { return config_; }
  int feature_channels() const { return feature_channels_; }
  ParameterStore& params() { return store_; }
  const ParameterStore& params() const { return store_; }
  Eigen::Index parameter_count() const { return store_.total_size(); }

  HeadOutput forward(const FeatureMap& map,
                     std::span<const Box> proposals) const;

  // Builds the full multi-task loss; with backprop set, zeroes the stored
  // gradients and runs the tape backward before returning. `use_freeze`
  // replays previously captured pipeline geometry; `capture_freeze` records
  // it. At most one of the two may be set.
  LossBreakdown compute_loss(const FeatureMap& map, const TrainingBatch& batch,
                             bool backprop,
                             const PipelineFreeze* use_freeze = nullptr,
                             PipelineFreeze* capture_freeze = nullptr);

 private:
  struct Trunk {
    std::vector<Parameter*> conv_w, conv_b;
    std::vector<Parameter*> fc_w, fc_b;
    int resolution = 0;
    int in_channels = 0;
    int conv_width = 0;
    NodeId apply(Graph& g, NodeId grid_batch) const;
  };
  struct Projection {
    Parameter* w = nullptr;
    Parameter* b = nullptr;
    NodeId apply(Graph& g, NodeId x) const;
  };
  struct StageNet {
    std::vector<Trunk> trunks;        // [0] classification / shared
    Projection proj_cls;
    std::vector<Projection> proj_reg;
  };
  struct StageTrace {
    NodeId logits = -1;
    std::array<NodeId, 4> comp{-1, -1, -1, -1};  // N x 1 per delta component
    std::array<Tensor, 4> ref;                   // N x 4 reference boxes
    Tensor refined;                              // N x 4
    Tensor intermediate;
    bool has_intermediate = false;
  };

  Trunk make_trunk(const std::string& name, int in_channels, Rng& rng);
  Projection make_projection(const std::string& name, int in_width,
                             int out_width, Rng& rng);
  StageNet make_stage(const std::string& prefix, Rng& rng);

  StageTrace run_stage(Graph& g, const StageNet& net, NodeId map_node,
                       double stride, const Tensor& in_boxes,
                       const std::vector<int>* slice_classes,
                       const Tensor* frozen_intermediate = nullptr) const;
  NodeId reg_output(Graph& g, const Projection& proj, NodeId features,
                    Eigen::Index width,
                    const std::vector<int>* slice_classes) const;

  HeadConfig config_;
  int feature_channels_ = 0;
  ParameterStore store_;
  std::vector<StageNet> stages_;
};

}  // namespace headlab
