#pragma once

#include "headlab/box.hpp"
#include "headlab/feature_map.hpp"
#include "headlab/random.hpp"
#include "headlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

// Independent reference implementations used as oracles. These deliberately
// avoid the library's code paths: naive loops, repeated max scans and
// explicit confusion accounting.
namespace testsupport {

using headlab::Box;
using headlab::Detection;
using headlab::FeatureMap;
using headlab::MatrixRM;
using headlab::Rng;

// triple-loop matrix multiply oracle for dense layers: y = x * W^T + b
inline MatrixRM matmul_oracle(const MatrixRM& x, const MatrixRM& w,
                              const Eigen::VectorXd& b) {
  MatrixRM y(x.rows(), w.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < w.rows(); ++j) {
      double acc = 0.0;
      for (Eigen::Index k = 0; k < x.cols(); ++k) acc += x(i, k) * w(j, k);
      y(i, j) = acc + b[j];
    }
  }
  return y;
}

// brute-force bilinear sampling oracle mirroring the pooling contract:
// feature coordinate = image / stride - 0.5, out-of-lattice samples read 0
inline double bilinear_oracle(const FeatureMap& map, double fx, double fy,
                              int ch) {
  if (fx < 0.0 || fx > map.width - 1 || fy < 0.0 || fy > map.height - 1)
    return 0.0;
  const int x0 = static_cast<int>(std::floor(fx));
  const int y0 = static_cast<int>(std::floor(fy));
  auto v = [&](int r, int c) {
    if (r < 0 || r >= map.height || c < 0 || c >= map.width) return 0.0;
    return map.at(r, c, ch);
  };
  const double ax = fx - x0;
  const double ay = fy - y0;
  return (v(y0, x0) * (1 - ax) + v(y0, x0 + 1) * ax) * (1 - ay) +
         (v(y0 + 1, x0) * (1 - ax) + v(y0 + 1, x0 + 1) * ax) * ay;
}

inline std::vector<double> roi_align_oracle(const FeatureMap& map,
                                            const Box& box, int p, int s) {
  const double wf = box.w / map.stride;
  const double hf = box.h / map.stride;
  const double x1 = box.x / map.stride - 0.5 - wf / 2;
  const double y1 = box.y / map.stride - 0.5 - hf / 2;
  std::vector<double> out(static_cast<size_t>(p) * p * map.channels, 0.0);
  for (int i = 0; i < p; ++i) {
    for (int j = 0; j < p; ++j) {
      for (int ch = 0; ch < map.channels; ++ch) {
        double acc = 0.0;
        for (int sy = 0; sy < s; ++sy) {
          for (int sx = 0; sx < s; ++sx) {
            const double fx = x1 + (j + (sx + 0.5) / s) * (wf / p);
            const double fy = y1 + (i + (sy + 0.5) / s) * (hf / p);
            acc += bilinear_oracle(map, fx, fy, ch);
          }
        }
        out[(static_cast<size_t>(i) * p + j) * map.channels + ch] =
            acc / (s * s);
      }
    }
  }
  return out;
}

// quadratic-time reference suppression: repeated max scan over the remaining
// detections instead of a sort
inline std::vector<int> nms_oracle(const std::vector<Detection>& dets,
                                   double threshold) {
  std::vector<char> alive(dets.size(), 1);
  std::vector<int> kept;
  while (true) {
    int best = -1;
    for (size_t i = 0; i < dets.size(); ++i) {
      if (!alive[i]) continue;
      if (best < 0 || dets[i].score > dets[best].score) best = static_cast<int>(i);
    }
    if (best < 0) break;
    alive[best] = 0;
    kept.push_back(best);
    for (size_t i = 0; i < dets.size(); ++i) {
      if (!alive[i] || dets[i].category != dets[best].category) continue;
      if (headlab::iou(dets[i].box, dets[best].box) > threshold) alive[i] = 0;
    }
  }
  return kept;
}

inline Box random_box(Rng& rng, double span = 400.0, double min_side = 1.0,
                      double max_side = 512.0) {
  Box b;
  b.w = rng.log_uniform(min_side, max_side);
  b.h = rng.log_uniform(min_side, max_side);
  b.x = rng.uniform(0.0, span);
  b.y = rng.uniform(0.0, span);
  return b;
}

}  // namespace testsupport
