#include "headlab/graph.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace headlab {

Parameter& ParameterStore::create(std::string name, Tensor init) {
  if (find(name) != nullptr)
    throw std::invalid_argument("duplicate parameter name: " + name);
  params_.push_back(std::make_unique<Parameter>(std::move(name), std::move(init)));
  return *params_.back();
}

Parameter* ParameterStore::find(std::string_view name) {
  for (auto& p : params_)
    if (p->name == name) return p.get();
  return nullptr;
}

const Parameter* ParameterStore::find(std::string_view name) const {
  for (const auto& p : params_)
    if (p->name == name) return p.get();
  return nullptr;
}

Eigen::Index ParameterStore::total_size() const {
  Eigen::Index n = 0;
  for (const auto& p : params_) n += p->value.size();
  return n;
}

void ParameterStore::zero_grads() {
  for (auto& p : params_) p->grad.flat().setZero();
}

NodeId Graph::add_node(Tensor value, bool needs_grad) {
  Node n;
  n.value_own = std::move(value);
  n.requires_grad = needs_grad;
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

Tensor& Graph::grad_buf(NodeId id) {
  Node& n = nodes_[id];
  if (n.grad_ext != nullptr) return *n.grad_ext;
  if (n.grad_own.size() == 0) n.grad_own = Tensor::zeros(n.val().shape());
  return n.grad_own;
}

void Graph::add_grad(NodeId id, const Tensor& g) {
  grad_buf(id).flat() += g.flat();
}

const Tensor& Graph::grad(NodeId id) const {
  const Node& n = nodes_[id];
  if (n.grad_ext != nullptr) return *n.grad_ext;
  if (n.grad_own.size() == 0)
    throw std::logic_error("node has no accumulated gradient");
  return n.grad_own;
}

NodeId Graph::constant(Tensor v) { return add_node(std::move(v), false); }

NodeId Graph::constant_view(const Tensor& v) {
  Node n;
  n.value_ext = &v;
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Graph::input(Tensor v) { return add_node(std::move(v), true); }

NodeId Graph::param(Parameter& p) {
  Node n;
  n.value_ext = &p.value;
  n.grad_ext = &p.grad;
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Graph::dense(NodeId x, NodeId weight, NodeId bias) {
  const Tensor& xv = value(x);
  const Tensor& wv = value(weight);
  const Tensor& bv = value(bias);
  if (xv.rank() != 2 || wv.rank() != 2)
    throw std::invalid_argument("dense: operands must be rank 2");
  if (xv.dim(1) != wv.dim(1))
    throw std::invalid_argument("dense: input width does not match weight");
  if (bv.size() != wv.dim(0))
    throw std::invalid_argument("dense: bias size does not match weight rows");

  Tensor y = Tensor::zeros({xv.dim(0), wv.dim(0)});
  y.mat().noalias() = xv.mat() * wv.mat().transpose();
  y.mat().rowwise() += bv.flat().transpose();

  const bool req = requires_grad(x) || requires_grad(weight) || requires_grad(bias);
  NodeId id = add_node(std::move(y), req);
  if (req) {
    nodes_[id].backprop = [id, x, weight, bias](Graph& g) {
      auto gy = g.grad(id).mat();
      if (g.requires_grad(x))
        g.grad_buf(x).mat().noalias() += gy * g.value(weight).mat();
      if (g.requires_grad(weight))
        g.grad_buf(weight).mat().noalias() += gy.transpose() * g.value(x).mat();
      if (g.requires_grad(bias))
        g.grad_buf(bias).flat() += gy.colwise().sum().transpose();
    };
  }
  return id;
}

NodeId Graph::relu(NodeId x) {
  const Tensor& xv = value(x);
  Tensor y = Tensor::of(xv.shape(), xv.flat().cwiseMax(0.0));
  NodeId id = add_node(std::move(y), requires_grad(x));
  if (nodes_[id].requires_grad) {
    nodes_[id].backprop = [id, x](Graph& g) {
      const auto& xf = g.value(x).flat();
      const auto& gy = g.grad(id).flat();
      auto& gx = g.grad_buf(x).flat();
      for (Eigen::Index i = 0; i < xf.size(); ++i)
        if (xf[i] > 0.0) gx[i] += gy[i];
    };
  }
  return id;
}

NodeId Graph::conv3x3(NodeId x, NodeId weight, NodeId bias, int resolution,
                      int in_channels) {
  const Tensor& xv = value(x);
  const Tensor& wv = value(weight);
  const Tensor& bv = value(bias);
  const int p = resolution;
  const int cin = in_channels;
  if (xv.rank() != 2 || xv.dim(1) != static_cast<Eigen::Index>(p) * p * cin)
    throw std::invalid_argument("conv3x3: input is not a P*P*Cin grid batch");
  if (wv.dim(1) != 9 * cin)
    throw std::invalid_argument("conv3x3: weight width must be 9*Cin");
  const Eigen::Index n = xv.dim(0);
  const Eigen::Index cout = wv.dim(0);

  // im2col with zero padding; row (b*p + i)*p + j holds the 3x3 patch at (i,j)
  auto cols = std::make_shared<MatrixRM>(n * p * p, 9 * cin);
  cols->setZero();
  for (Eigen::Index b = 0; b < n; ++b) {
    const double* src = xv.data() + b * p * p * cin;
    for (int i = 0; i < p; ++i) {
      for (int j = 0; j < p; ++j) {
        double* dst = cols->data() + ((b * p + i) * p + j) * 9 * cin;
        int k = 0;
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx, ++k) {
            const int r = i + dy, c = j + dx;
            if (r < 0 || r >= p || c < 0 || c >= p) continue;
            const double* cellv = src + (static_cast<Eigen::Index>(r) * p + c) * cin;
            std::copy(cellv, cellv + cin, dst + k * cin);
          }
        }
      }
    }
  }

  Tensor y = Tensor::zeros({n, static_cast<Eigen::Index>(p) * p * cout});
  Eigen::Map<MatrixRM> ymat(y.data(), n * p * p, cout);
  ymat.noalias() = (*cols) * wv.mat().transpose();
  ymat.rowwise() += bv.flat().transpose();

  const bool req = requires_grad(x) || requires_grad(weight) || requires_grad(bias);
  NodeId id = add_node(std::move(y), req);
  if (req) {
    nodes_[id].backprop = [id, x, weight, bias, cols, p, cin, n, cout](Graph& g) {
      Eigen::Map<const MatrixRM> gy(g.grad(id).data(), n * p * p, cout);
      if (g.requires_grad(weight))
        g.grad_buf(weight).mat().noalias() += gy.transpose() * (*cols);
      if (g.requires_grad(bias))
        g.grad_buf(bias).flat() += gy.colwise().sum().transpose();
      if (g.requires_grad(x)) {
        MatrixRM gcols = gy * g.value(weight).mat();  // (n*p*p) x (9*cin)
        Tensor& gxt = g.grad_buf(x);
        for (Eigen::Index b = 0; b < n; ++b) {
          double* dst = gxt.data() + b * p * p * cin;
          for (int i = 0; i < p; ++i) {
            for (int j = 0; j < p; ++j) {
              const double* srow = gcols.data() + ((b * p + i) * p + j) * 9 * cin;
              int k = 0;
              for (int dy = -1; dy <= 1; ++dy) {
                for (int dx = -1; dx <= 1; ++dx, ++k) {
                  const int r = i + dy, c = j + dx;
                  if (r < 0 || r >= p || c < 0 || c >= p) continue;
                  double* cellg = dst + (static_cast<Eigen::Index>(r) * p + c) * cin;
                  const double* sk = srow + k * cin;
                  for (int ch = 0; ch < cin; ++ch) cellg[ch] += sk[ch];
                }
              }
            }
          }
        }
      }
    };
  }
  return id;
}

NodeId Graph::slice_cols(NodeId x, Eigen::Index start, Eigen::Index count) {
  const Tensor& xv = value(x);
  if (xv.rank() != 2 || start < 0 || start + count > xv.dim(1))
    throw std::invalid_argument("slice_cols: range out of bounds");
  Tensor y = Tensor::zeros({xv.dim(0), count});
  y.mat() = xv.mat().middleCols(start, count);
  NodeId id = add_node(std::move(y), requires_grad(x));
  if (nodes_[id].requires_grad) {
    nodes_[id].backprop = [id, x, start, count](Graph& g) {
      g.grad_buf(x).mat().middleCols(start, count) += g.grad(id).mat();
    };
  }
  return id;
}

NodeId Graph::concat_cols(const std::vector<NodeId>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_cols: empty input");
  const Eigen::Index rows = value(xs[0]).dim(0);
  Eigen::Index total = 0;
  bool req = false;
  for (NodeId x : xs) {
    if (value(x).rank() != 2 || value(x).dim(0) != rows)
      throw std::invalid_argument("concat_cols: row mismatch");
    total += value(x).dim(1);
    req = req || requires_grad(x);
  }
  Tensor y = Tensor::zeros({rows, total});
  Eigen::Index at = 0;
  for (NodeId x : xs) {
    y.mat().middleCols(at, value(x).dim(1)) = value(x).mat();
    at += value(x).dim(1);
  }
  NodeId id = add_node(std::move(y), req);
  if (req) {
    std::vector<NodeId> parts = xs;
    nodes_[id].backprop = [id, parts](Graph& g) {
      Eigen::Index at = 0;
      for (NodeId x : parts) {
        const Eigen::Index w = g.value(x).dim(1);
        if (g.requires_grad(x))
          g.grad_buf(x).mat() += g.grad(id).mat().middleCols(at, w);
        at += w;
      }
    };
  }
  return id;
}

NodeId Graph::gather_rows(NodeId x, std::vector<Eigen::Index> rows) {
  const Tensor& xv = value(x);
  if (xv.rank() != 2) throw std::invalid_argument("gather_rows: rank 2 input");
  if (rows.empty()) throw std::invalid_argument("gather_rows: empty selection");
  for (Eigen::Index r : rows)
    if (r < 0 || r >= xv.dim(0))
      throw std::invalid_argument("gather_rows: index out of range");
  Tensor y = Tensor::zeros({static_cast<Eigen::Index>(rows.size()), xv.dim(1)});
  for (size_t i = 0; i < rows.size(); ++i) y.mat().row(i) = xv.mat().row(rows[i]);
  NodeId id = add_node(std::move(y), requires_grad(x));
  if (nodes_[id].requires_grad) {
    auto idx = std::make_shared<std::vector<Eigen::Index>>(std::move(rows));
    nodes_[id].backprop = [id, x, idx](Graph& g) {
      auto gy = g.grad(id).mat();
      auto gx = g.grad_buf(x).mat();
      for (size_t i = 0; i < idx->size(); ++i) gx.row((*idx)[i]) += gy.row(i);
    };
  }
  return id;
}

NodeId Graph::select_slice(NodeId x, const std::vector<int>& slices,
                           Eigen::Index width) {
  const Tensor& xv = value(x);
  if (xv.rank() != 2 || static_cast<Eigen::Index>(slices.size()) != xv.dim(0))
    throw std::invalid_argument("select_slice: one slice index per row");
  for (int s : slices)
    if (s < 0 || (s + 1) * width > xv.dim(1))
      throw std::invalid_argument("select_slice: slice out of range");
  Tensor y = Tensor::zeros({xv.dim(0), width});
  for (Eigen::Index r = 0; r < xv.dim(0); ++r)
    y.mat().row(r) = xv.mat().row(r).segment(slices[r] * width, width);
  NodeId id = add_node(std::move(y), requires_grad(x));
  if (nodes_[id].requires_grad) {
    auto idx = std::make_shared<std::vector<int>>(slices);
    nodes_[id].backprop = [id, x, idx, width](Graph& g) {
      auto gy = g.grad(id).mat();
      auto gx = g.grad_buf(x).mat();
      for (Eigen::Index r = 0; r < gy.rows(); ++r)
        gx.row(r).segment((*idx)[r] * width, width) += gy.row(r);
    };
  }
  return id;
}

NodeId Graph::linear_combination(const std::vector<NodeId>& xs,
                                 const std::vector<double>& coeffs) {
  if (xs.empty() || xs.size() != coeffs.size())
    throw std::invalid_argument("linear_combination: size mismatch");
  Tensor y = Tensor::zeros(value(xs[0]).shape());
  bool req = false;
  for (size_t i = 0; i < xs.size(); ++i) {
    if (!value(xs[i]).same_shape(y))
      throw std::invalid_argument("linear_combination: shape mismatch");
    y.flat() += coeffs[i] * value(xs[i]).flat();
    req = req || requires_grad(xs[i]);
  }
  NodeId id = add_node(std::move(y), req);
  if (req) {
    std::vector<NodeId> parts = xs;
    std::vector<double> cs = coeffs;
    nodes_[id].backprop = [id, parts, cs](Graph& g) {
      for (size_t i = 0; i < parts.size(); ++i)
        if (g.requires_grad(parts[i]))
          g.grad_buf(parts[i]).flat() += cs[i] * g.grad(id).flat();
    };
  }
  return id;
}

NodeId Graph::smooth_l1(NodeId prediction, Tensor target) {
  const Tensor& pv = value(prediction);
  if (!pv.same_shape(target))
    throw std::invalid_argument("smooth_l1: shape mismatch");
  auto diff = std::make_shared<Eigen::VectorXd>(pv.flat() - target.flat());
  double acc = 0.0;
  for (Eigen::Index i = 0; i < diff->size(); ++i) {
    const double d = (*diff)[i];
    acc += std::abs(d) < 1.0 ? 0.5 * d * d : std::abs(d) - 0.5;
  }
  const double inv_n = 1.0 / static_cast<double>(diff->size());
  NodeId id = add_node(Tensor::scalar(acc * inv_n), requires_grad(prediction));
  if (nodes_[id].requires_grad) {
    nodes_[id].backprop = [id, prediction, diff, inv_n](Graph& g) {
      const double gy = g.grad(id)[0] * inv_n;
      auto& gp = g.grad_buf(prediction).flat();
      for (Eigen::Index i = 0; i < diff->size(); ++i) {
        const double d = (*diff)[i];
        gp[i] += gy * (std::abs(d) < 1.0 ? d : (d > 0 ? 1.0 : -1.0));
      }
    };
  }
  return id;
}

NodeId Graph::softmax_cross_entropy(NodeId logits,
                                    const std::vector<int>& labels) {
  const Tensor& lv = value(logits);
  if (lv.rank() != 2 || static_cast<Eigen::Index>(labels.size()) != lv.dim(0))
    throw std::invalid_argument("softmax_cross_entropy: one label per row");
  const Eigen::Index k = lv.dim(1);
  for (int y : labels)
    if (y < 0 || y >= k)
      throw std::invalid_argument("softmax_cross_entropy: label out of range");

  auto probs = std::make_shared<MatrixRM>(lv.dim(0), k);
  double acc = 0.0;
  for (Eigen::Index r = 0; r < lv.dim(0); ++r) {
    const auto row = lv.mat().row(r);
    const double m = row.maxCoeff();
    Eigen::RowVectorXd e = (row.array() - m).exp();
    const double z = e.sum();
    probs->row(r) = e / z;
    acc += std::log(z) - (row[labels[r]] - m);
  }
  const double inv_n = 1.0 / static_cast<double>(lv.dim(0));
  NodeId id = add_node(Tensor::scalar(acc * inv_n), requires_grad(logits));
  if (nodes_[id].requires_grad) {
    auto lab = std::make_shared<std::vector<int>>(labels);
    nodes_[id].backprop = [id, logits, probs, lab, inv_n](Graph& g) {
      const double gy = g.grad(id)[0] * inv_n;
      auto gl = g.grad_buf(logits).mat();
      gl += gy * (*probs);
      for (Eigen::Index r = 0; r < gl.rows(); ++r) gl(r, (*lab)[r]) -= gy;
    };
  }
  return id;
}

NodeId Graph::decode_boxes(NodeId view_values, const Tensor& base_boxes,
                           DeltaView view, const DeltaScale& scale,
                           double clamp) {
  const Tensor& vv = value(view_values);
  const Eigen::Index n = base_boxes.dim(0);
  const Eigen::Index want = view == DeltaView::kFull ? 4 : 2;
  if (vv.rank() != 2 || vv.dim(0) != n || vv.dim(1) != want)
    throw std::invalid_argument("decode_boxes: view shape mismatch");

  Tensor out = Tensor::zeros({n, 4});
  for (Eigen::Index r = 0; r < n; ++r) {
    Box b{base_boxes.at(r, 0), base_boxes.at(r, 1), base_boxes.at(r, 2),
          base_boxes.at(r, 3)};
    Box d;
    if (view == DeltaView::kFull) {
      d = decode_full(b, Delta{vv.at(r, 0), vv.at(r, 1), vv.at(r, 2), vv.at(r, 3)},
                      scale, clamp);
    } else {
      d = decode_view(b, view, vv.at(r, 0), vv.at(r, 1), scale, clamp);
    }
    out.at(r, 0) = d.x;
    out.at(r, 1) = d.y;
    out.at(r, 2) = d.w;
    out.at(r, 3) = d.h;
  }

  NodeId id = add_node(std::move(out), requires_grad(view_values));
  if (nodes_[id].requires_grad) {
    auto base = std::make_shared<Tensor>(base_boxes);
    nodes_[id].backprop = [id, view_values, base, view, scale, clamp](Graph& g) {
      const Tensor& vv = g.value(view_values);
      const Tensor& ov = g.value(id);
      const Tensor& gy = g.grad(id);
      Tensor& gv = g.grad_buf(view_values);
      // component -> (output column, lambda, kind) wiring per view
      struct Term { int comp; int col; };
      std::array<Term, 4> terms{};
      int nterm = 0;
      auto add = [&](int comp, int col) { terms[nterm++] = {comp, col}; };
      switch (view) {
        case DeltaView::kFull: add(0, 0); add(1, 1); add(2, 2); add(3, 3); break;
        case DeltaView::kOffset: add(0, 0); add(1, 1); break;
        case DeltaView::kScaling: add(0, 2); add(1, 3); break;
        case DeltaView::kHorizontal: add(0, 0); add(1, 2); break;
        case DeltaView::kVertical: add(0, 1); add(1, 3); break;
      }
      const double lam[4] = {scale.lx, scale.ly, scale.lw, scale.lh};
      for (Eigen::Index r = 0; r < vv.dim(0); ++r) {
        for (int t = 0; t < nterm; ++t) {
          const int comp = terms[t].comp;
          const int col = terms[t].col;
          if (col < 2) {
            // x = xb + v * wb / lambda (wb is the paired base extent)
            const double extent = base->at(r, col == 0 ? 2 : 3);
            gv.at(r, comp) += gy.at(r, col) * extent / lam[col];
          } else {
            // w = wb * exp(min(v / lambda, clamp))
            const double ratio = vv.at(r, comp) / lam[col];
            if (ratio < clamp)
              gv.at(r, comp) += gy.at(r, col) * ov.at(r, col) / lam[col];
          }
        }
      }
    };
  }
  return id;
}

NodeId Graph::roi_align(NodeId map, double stride, NodeId boxes,
                        const RoiSpec& spec, bool grad_boxes) {
  const Tensor& mv = value(map);
  const Tensor& bv = value(boxes);
  if (mv.rank() != 3) throw std::invalid_argument("roi_align: map must be {H,W,C}");
  if (bv.rank() != 2 || bv.dim(1) != 4)
    throw std::invalid_argument("roi_align: boxes must be N x 4");
  const int h = static_cast<int>(mv.dim(0));
  const int w = static_cast<int>(mv.dim(1));
  const int c = static_cast<int>(mv.dim(2));
  const Eigen::Index n = bv.dim(0);
  const Eigen::Index bin_count =
      static_cast<Eigen::Index>(spec.resolution) * spec.resolution * c;

  Tensor y = Tensor::zeros({n, bin_count});
  for (Eigen::Index r = 0; r < n; ++r) {
    Box b{bv.at(r, 0), bv.at(r, 1), bv.at(r, 2), bv.at(r, 3)};
    if (!(b.w > 0 && b.h > 0))
      throw std::invalid_argument("roi_align: degenerate box");
    roidetail::pool_forward(mv.data(), h, w, c, stride, b, spec.resolution,
                            spec.samples, y.data() + r * bin_count);
  }

  const bool box_path = grad_boxes && requires_grad(boxes);
  const bool req = requires_grad(map) || box_path;
  NodeId id = add_node(std::move(y), req);
  if (req) {
    nodes_[id].backprop = [id, map, boxes, stride, spec, box_path, h, w, c,
                           bin_count](Graph& g) {
      const Tensor& mv = g.value(map);
      const Tensor& bv = g.value(boxes);
      const Tensor& gy = g.grad(id);
      double* gmap = g.requires_grad(map) ? g.grad_buf(map).data() : nullptr;
      for (Eigen::Index r = 0; r < bv.dim(0); ++r) {
        Box b{bv.at(r, 0), bv.at(r, 1), bv.at(r, 2), bv.at(r, 3)};
        double gbox[4] = {0, 0, 0, 0};
        roidetail::pool_backward(mv.data(), h, w, c, stride, b,
                                 spec.resolution, spec.samples,
                                 gy.data() + r * bin_count, gmap,
                                 box_path ? gbox : nullptr);
        if (box_path) {
          Tensor& gb = g.grad_buf(boxes);
          for (int k = 0; k < 4; ++k) gb.at(r, k) += gbox[k];
        }
      }
    };
  }
  return id;
}

void Graph::backward(NodeId root) {
  if (value(root).size() != 1)
    throw std::logic_error("backward: root must be a scalar");
  grad_buf(root)[0] = 1.0;
  for (NodeId id = root; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.requires_grad || !n.backprop) continue;
    if (n.grad_ext == nullptr && n.grad_own.size() == 0) continue;  // off-path
    n.backprop(*this);
  }
}

}  // namespace headlab
