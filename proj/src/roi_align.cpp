#include "headlab/roi_align.hpp"

#include <cmath>
#include <stdexcept>

namespace headlab {
namespace roidetail {
namespace {

struct SampleGeom {
  double x1, y1;      // feature-space top-left corner of the box
  double bin_w, bin_h;
  int p, s;
  double inv_count;   // 1 / (s*s)
};

SampleGeom make_geom(double stride, const Box& box, int resolution,
                     int samples) {
  const double wf = box.w / stride;
  const double hf = box.h / stride;
  const double cxf = box.x / stride - 0.5;
  const double cyf = box.y / stride - 0.5;
  SampleGeom g;
  g.x1 = cxf - wf / 2.0;
  g.y1 = cyf - hf / 2.0;
  g.p = resolution;
  g.s = samples;
  g.bin_w = wf / resolution;
  g.bin_h = hf / resolution;
  g.inv_count = 1.0 / (samples * samples);
  return g;
}

inline double cell(const double* v, int h, int w, int c, int row, int col,
                   int ch) {
  if (row < 0 || row >= h || col < 0 || col >= w) return 0.0;
  return v[(static_cast<std::ptrdiff_t>(row) * w + col) * c + ch];
}

inline void cell_add(double* v, int h, int w, int c, int row, int col, int ch,
                     double g) {
  if (row < 0 || row >= h || col < 0 || col >= w) return;
  v[(static_cast<std::ptrdiff_t>(row) * w + col) * c + ch] += g;
}

}  // namespace

void pool_forward(const double* map_values, int h, int w, int c, double stride,
                  const Box& box, int resolution, int samples, double* out) {
  const SampleGeom g = make_geom(stride, box, resolution, samples);
  for (int i = 0; i < g.p; ++i) {
    for (int j = 0; j < g.p; ++j) {
      double* bin = out + (static_cast<std::ptrdiff_t>(i) * g.p + j) * c;
      for (int ch = 0; ch < c; ++ch) bin[ch] = 0.0;
      for (int sy = 0; sy < g.s; ++sy) {
        const double y = g.y1 + (i + (sy + 0.5) / g.s) * g.bin_h;
        for (int sx = 0; sx < g.s; ++sx) {
          const double x = g.x1 + (j + (sx + 0.5) / g.s) * g.bin_w;
          if (x < 0.0 || x > w - 1 || y < 0.0 || y > h - 1) continue;
          const int x0 = static_cast<int>(std::floor(x));
          const int y0 = static_cast<int>(std::floor(y));
          const double fx = x - x0;
          const double fy = y - y0;
          for (int ch = 0; ch < c; ++ch) {
            const double v00 = cell(map_values, h, w, c, y0, x0, ch);
            const double v01 = cell(map_values, h, w, c, y0, x0 + 1, ch);
            const double v10 = cell(map_values, h, w, c, y0 + 1, x0, ch);
            const double v11 = cell(map_values, h, w, c, y0 + 1, x0 + 1, ch);
            bin[ch] += (v00 * (1 - fx) + v01 * fx) * (1 - fy) +
                       (v10 * (1 - fx) + v11 * fx) * fy;
          }
        }
      }
      for (int ch = 0; ch < c; ++ch) bin[ch] *= g.inv_count;
    }
  }
}

void pool_backward(const double* map_values, int h, int w, int c,
                   double stride, const Box& box, int resolution, int samples,
                   const double* grad_out, double* grad_map,
                   double* grad_box) {
  const SampleGeom g = make_geom(stride, box, resolution, samples);
  for (int i = 0; i < g.p; ++i) {
    for (int j = 0; j < g.p; ++j) {
      const double* gbin =
          grad_out + (static_cast<std::ptrdiff_t>(i) * g.p + j) * c;
      for (int sy = 0; sy < g.s; ++sy) {
        const double uy = i + (sy + 0.5) / g.s;
        const double y = g.y1 + uy * g.bin_h;
        for (int sx = 0; sx < g.s; ++sx) {
          const double ux = j + (sx + 0.5) / g.s;
          const double x = g.x1 + ux * g.bin_w;
          if (x < 0.0 || x > w - 1 || y < 0.0 || y > h - 1) continue;
          const int x0 = static_cast<int>(std::floor(x));
          const int y0 = static_cast<int>(std::floor(y));
          const double fx = x - x0;
          const double fy = y - y0;
          double gpos_x = 0.0;
          double gpos_y = 0.0;
          for (int ch = 0; ch < c; ++ch) {
            const double gu = gbin[ch] * g.inv_count;
            if (grad_map != nullptr) {
              cell_add(grad_map, h, w, c, y0, x0, ch, gu * (1 - fx) * (1 - fy));
              cell_add(grad_map, h, w, c, y0, x0 + 1, ch, gu * fx * (1 - fy));
              cell_add(grad_map, h, w, c, y0 + 1, x0, ch, gu * (1 - fx) * fy);
              cell_add(grad_map, h, w, c, y0 + 1, x0 + 1, ch, gu * fx * fy);
            }
            if (grad_box != nullptr) {
              const double v00 = cell(map_values, h, w, c, y0, x0, ch);
              const double v01 = cell(map_values, h, w, c, y0, x0 + 1, ch);
              const double v10 = cell(map_values, h, w, c, y0 + 1, x0, ch);
              const double v11 = cell(map_values, h, w, c, y0 + 1, x0 + 1, ch);
              gpos_x += gu * ((v01 - v00) * (1 - fy) + (v11 - v10) * fy);
              gpos_y += gu * ((v10 - v00) * (1 - fx) + (v11 - v01) * fx);
            }
          }
          if (grad_box != nullptr) {
            // x = cx/stride - 0.5 + (w/stride) * (ux/P - 1/2)
            grad_box[0] += gpos_x / stride;
            grad_box[1] += gpos_y / stride;
            grad_box[2] += gpos_x * (ux / g.p - 0.5) / stride;
            grad_box[3] += gpos_y * (uy / g.p - 0.5) / stride;
          }
        }
      }
    }
  }
}

}  // namespace roidetail

PooledFeature roi_align(const FeatureMap& map, const Box& box,
                        const RoiSpec& spec) {
  if (!(box.w > 0 && box.h > 0))
    throw std::invalid_argument("roi_align: degenerate box");
  if (spec.resolution < 1 || spec.samples < 1)
    throw std::invalid_argument("roi_align: resolution and samples must be >= 1");
  PooledFeature out;
  out.source_box = box;
  out.resolution = spec.resolution;
  out.channels = map.channels;
  out.grid = Tensor::zeros({spec.resolution, spec.resolution, map.channels});
  roidetail::pool_forward(map.values.data(), map.height, map.width,
                          map.channels, map.stride, box, spec.resolution,
                          spec.samples, out.grid.data());
  return out;
}

Tensor flatten(const PooledFeature& pooled) {
  return Tensor::of({1, pooled.grid.size()}, pooled.grid.flat());
}

}  // namespace headlab
