#pragma once

#include "headlab/box.hpp"
#include "headlab/roi_align.hpp"
#include "headlab/tensor.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace headlab {

// A trainable tensor with its gradient and momentum buffers. The three
// buffers always share one shape.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  Tensor velocity;

  Parameter(std::string n, Tensor init)
      : name(std::move(n)),
        value(std::move(init)),
        grad(Tensor::zeros(value.shape())),
        velocity(Tensor::zeros(value.shape())) {}
};

// Ordered, name-unique registry. Creation order defines the checkpoint and
// optimizer iteration order.
class ParameterStore {
 public:
  Parameter& create(std::string name, Tensor init);
  Parameter* find(std::string_view name);
  const Parameter* find(std::string_view name) const;
  const std::vector<std::unique_ptr<Parameter>>& all() const { return params_; }
  Eigen::Index total_size() const;
  void zero_grads();

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
};

using NodeId = std::int32_t;

// Reverse-mode tape over dense tensors. Values are computed eagerly as ops
// are recorded; backward() replays the tape in reverse, accumulating into
// node gradients and, for param nodes, directly into Parameter::grad.
//
// Single-writer: one thread builds and differentiates a graph. Param nodes
// alias the parameter's buffers, so the parameters must outlive the graph.
class Graph {
 public:
  // leaves
  NodeId constant(Tensor v);
  NodeId constant_view(const Tensor& v);  // caller keeps v alive
  NodeId input(Tensor v);                 // gradient-tracked non-parameter leaf
  NodeId param(Parameter& p);

  // dense algebra
  NodeId dense(NodeId x, NodeId weight, NodeId bias);  // y = x W^T + b
  NodeId relu(NodeId x);
  // 3x3 same-padded convolution over an N x (P*P*Cin) grid batch;
  // weight is Cout x (9*Cin), bias Cout.
  NodeId conv3x3(NodeId x, NodeId weight, NodeId bias, int resolution,
                 int in_channels);
  NodeId slice_cols(NodeId x, Eigen::Index start, Eigen::Index count);
  NodeId concat_cols(const std::vector<NodeId>& xs);
  NodeId gather_rows(NodeId x, std::vector<Eigen::Index> rows);
  // out[r, :] = x[r, classes[r]*width .. +width); classes are 0-based slices
  NodeId select_slice(NodeId x, const std::vector<int>& slices,
                      Eigen::Index width);
  // elementwise sum_i coeffs[i] * xs[i] over same-shape tensors
  NodeId linear_combination(const std::vector<NodeId>& xs,
                            const std::vector<double>& coeffs);

  // losses (scalar results, shape {1})
  NodeId smooth_l1(NodeId prediction, Tensor target);
  NodeId softmax_cross_entropy(NodeId logits, const std::vector<int>& labels);

  // detection-specific ops
  // Applies the view decode row-wise: base is N x 4 (cx, cy, w, h) constants,
  // view_values is N x 2 (or N x 4 for kFull). Result is an N x 4 box tensor.
  NodeId decode_boxes(NodeId view_values, const Tensor& base_boxes,
                      DeltaView view, const DeltaScale& scale,
                      double clamp = kDecodeClamp);
  // map is {H, W, C}; boxes is N x 4. Output N x (P*P*C). Box-coordinate
  // gradients flow only when grad_boxes is set.
  NodeId roi_align(NodeId map, double stride, NodeId boxes,
                   const RoiSpec& spec, bool grad_boxes);

  const Tensor& value(NodeId id) const { return nodes_[id].val(); }
  const Tensor& grad(NodeId id) const;
  double scalar(NodeId id) const { return value(id).scalar_value(); }
  bool requires_grad(NodeId id) const { return nodes_[id].requires_grad; }

  // Seeds d(root)/d(root) = 1 and runs the tape backward. Root must be a
  // scalar. Parameter gradients accumulate until ParameterStore::zero_grads.
  void backward(NodeId root);

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value_own;
    const Tensor* value_ext = nullptr;
    Tensor grad_own;
    Tensor* grad_ext = nullptr;
    bool requires_grad = false;
    std::function<void(Graph&)> backprop;

    const Tensor& val() const { return value_ext ? *value_ext : value_own; }
  };

  NodeId add_node(Tensor value, bool needs_grad);
  Tensor& grad_buf(NodeId id);
  void add_grad(NodeId id, const Tensor& g);

  std::vector<Node> nodes_;
};

}  // namespace headlab
