#pragma once

#include "headlab/tensor.hpp"

#include <stdexcept>

namespace headlab {

// Dense H x W x C activation grid standing in for backbone output. A cell at
// index (row, col) covers the image square of side `stride` centered at
// ((col + 0.5) * stride, (row + 0.5) * stride); continuous image coordinates
// map to feature coordinates via x / stride - 0.5. That half-cell alignment
// makes a width mirror of the grid correspond exactly to the image mirror
// x -> W - x.
struct FeatureMap {
  int height = 0;
  int width = 0;
  int channels = 0;
  double stride = 1.0;
  Tensor values;  // shape {height, width, channels}

  static FeatureMap zeros(int h, int w, int c, double stride) {
    if (h <= 0 || w <= 0 || c <= 0 || stride <= 0)
      throw std::invalid_argument("feature map dimensions must be positive");
    FeatureMap m;
    m.height = h;
    m.width = w;
    m.channels = c;
    m.stride = stride;
    m.values = Tensor::zeros({h, w, c});
    return m;
  }

  double& at(int row, int col, int ch) {
    return values[(static_cast<Eigen::Index>(row) * width + col) * channels +
                  ch];
  }
  double at(int row, int col, int ch) const {
    return values[(static_cast<Eigen::Index>(row) * width + col) * channels +
                  ch];
  }

  double image_to_feature_x(double x) const { return x / stride - 0.5; }
  double image_to_feature_y(double y) const { return y / stride - 0.5; }
  double feature_to_image_x(double fx) const { return (fx + 0.5) * stride; }
  double feature_to_image_y(double fy) const { return (fy + 0.5) * stride; }
};

}  // namespace headlab
