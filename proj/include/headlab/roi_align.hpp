#pragma once

#include "headlab/box.hpp"
#include "headlab/feature_map.hpp"
#include "headlab/tensor.hpp"

namespace headlab {

// Pooling geometry: a P x P output grid with `samples` x `samples` bilinear
// sample points per bin.
struct RoiSpec {
  int resolution = 7;
  int samples = 2;
};

// Fixed-size feature extracted for one box.
struct PooledFeature {
  Tensor grid;  // shape {P, P, C}
  Box source_box;
  int resolution = 0;
  int channels = 0;
};

// Quantization-free pooling: the box is mapped to feature coordinates through
// the map stride, each bin averages its bilinear samples, and samples outside
// the value lattice contribute exactly zero (no edge clamping).
PooledFeature roi_align(const FeatureMap& map, const Box& box,
                        const RoiSpec& spec = {});

// Row-major flattening of the pooled grid into a 1 x (P*P*C) tensor.
Tensor flatten(const PooledFeature& pooled);

namespace roidetail {

// Pools one box into `out` (P*P*C doubles). `map_values` is H*W*C row-major.
void pool_forward(const double* map_values, int h, int w, int c, double stride,
                  const Box& box, int resolution, int samples, double* out);

// Accumulates gradients for one box. `grad_out` is P*P*C upstream values;
// `grad_map` (H*W*C) and `grad_box` (d/d{cx,cy,w,h}) may each be null.
void pool_backward(const double* map_values, int h, int w, int c,
                   double stride, const Box& box, int resolution, int samples,
                   const double* grad_out, double* grad_map, double* grad_box);

}  // namespace roidetail

}  // namespace headlab
