#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace headlab {

// Center-parametrized rectangle in image coordinates. Width and height are
// strictly positive for any box that enters the codec.
template <typename Scalar>
struct BoxT {
  Scalar x = 0;  // center abscissa
  Scalar y = 0;  // center ordinate
  Scalar w = 0;
  Scalar h = 0;

  Scalar x1() const { return x - w / Scalar(2); }
  Scalar y1() const { return y - h / Scalar(2); }
  Scalar x2() const { return x + w / Scalar(2); }
  Scalar y2() const { return y + h / Scalar(2); }
  Scalar area() const { return w * h; }

  bool valid() const {
    return w > Scalar(0) && h > Scalar(0) && std::isfinite(x) &&
           std::isfinite(y) && std::isfinite(w) && std::isfinite(h);
  }
};

using Box = BoxT<double>;

// Ground-truth annotation: a box plus its category in 1..K (0 is background).
struct GroundTruth {
  Box box;
  int category = 0;
};

// Regression target between a proposal and a target box. The four components
// admit two lossless 2+2 decompositions: offset/scaling and
// horizontal/vertical.
template <typename Scalar>
struct DeltaT {
  Scalar dx = 0, dy = 0, dw = 0, dh = 0;

  Eigen::Matrix<Scalar, 2, 1> offset() const { return {dx, dy}; }
  Eigen::Matrix<Scalar, 2, 1> scaling() const { return {dw, dh}; }
  Eigen::Matrix<Scalar, 2, 1> horizontal() const { return {dx, dw}; }
  Eigen::Matrix<Scalar, 2, 1> vertical() const { return {dy, dh}; }
};

using Delta = DeltaT<double>;

// Standard-deviation scalars applied to the four components.
template <typename Scalar>
struct DeltaScaleT {
  Scalar lx = 10, ly = 10, lw = 5, lh = 5;
};

using DeltaScale = DeltaScaleT<double>;

// The four delta components in storage order.
enum class DeltaComponent : int { kDx = 0, kDy = 1, kDw = 2, kDh = 3 };

// Which slice of a delta a decoder consumes.
enum class DeltaView { kFull, kOffset, kScaling, kHorizontal, kVertical };

// Component indices covered by a 2-wide view, in emission order.
inline std::array<int, 2> view_components(DeltaView v) {
  switch (v) {
    case DeltaView::kOffset: return {0, 1};
    case DeltaView::kScaling: return {2, 3};
    case DeltaView::kHorizontal: return {0, 2};
    case DeltaView::kVertical: return {1, 3};
    default: throw std::logic_error("full view has four components");
  }
}

// Size-ratio exponents are clamped at this bound before exp so an untrained
// head cannot overflow a decoded box.
inline constexpr double kDecodeClamp = 4.135166556742356;  // log(1000/16)

template <typename Scalar>
DeltaT<Scalar> encode_delta(const BoxT<Scalar>& proposal,
                            const BoxT<Scalar>& ground_truth,
                            const DeltaScaleT<Scalar>& scale = {}) {
  if (!(proposal.w > 0 && proposal.h > 0))
    throw std::invalid_argument("encode_delta: proposal needs positive size");
  if (!(ground_truth.w > 0 && ground_truth.h > 0))
    throw std::invalid_argument("encode_delta: target needs positive size");
  DeltaT<Scalar> d;
  d.dx = scale.lx * (ground_truth.x - proposal.x) / proposal.w;
  d.dy = scale.ly * (ground_truth.y - proposal.y) / proposal.h;
  d.dw = scale.lw * std::log(ground_truth.w / proposal.w);
  d.dh = scale.lh * std::log(ground_truth.h / proposal.h);
  return d;
}

namespace detail {
template <typename Scalar>
Scalar clamped_exp_ratio(Scalar d, Scalar lambda, Scalar clamp) {
  return std::exp(std::min(d / lambda, clamp));
}
}  // namespace detail

// Inverse of encode_delta over all four components.
template <typename Scalar>
BoxT<Scalar> decode_full(const BoxT<Scalar>& proposal, const DeltaT<Scalar>& d,
                         const DeltaScaleT<Scalar>& scale = {},
                         Scalar clamp = Scalar(kDecodeClamp)) {
  BoxT<Scalar> out;
  out.x = proposal.x + d.dx * proposal.w / scale.lx;
  out.y = proposal.y + d.dy * proposal.h / scale.ly;
  out.w = proposal.w * detail::clamped_exp_ratio(d.dw, scale.lw, clamp);
  out.h = proposal.h * detail::clamped_exp_ratio(d.dh, scale.lh, clamp);
  return out;
}

// Moves the center, keeps the size.
template <typename Scalar>
BoxT<Scalar> decode_offset(const BoxT<Scalar>& proposal, Scalar dx, Scalar dy,
                           const DeltaScaleT<Scalar>& scale = {}) {
  BoxT<Scalar> out = proposal;
  out.x = proposal.x + dx * proposal.w / scale.lx;
  out.y = proposal.y + dy * proposal.h / scale.ly;
  return out;
}

// Rescales the size, keeps the center.
template <typename Scalar>
BoxT<Scalar> decode_scaling(const BoxT<Scalar>& box, Scalar dw, Scalar dh,
                            const DeltaScaleT<Scalar>& scale = {},
                            Scalar clamp = Scalar(kDecodeClamp)) {
  BoxT<Scalar> out = box;
  out.w = box.w * detail::clamped_exp_ratio(dw, scale.lw, clamp);
  out.h = box.h * detail::clamped_exp_ratio(dh, scale.lh, clamp);
  return out;
}

// x-axis subtasks: center shift along x plus width rescale.
template <typename Scalar>
BoxT<Scalar> decode_horizontal(const BoxT<Scalar>& box, Scalar dx, Scalar dw,
                               const DeltaScaleT<Scalar>& scale = {},
                               Scalar clamp = Scalar(kDecodeClamp)) {
  BoxT<Scalar> out = box;
  out.x = box.x + dx * box.w / scale.lx;
  out.w = box.w * detail::clamped_exp_ratio(dw, scale.lw, clamp);
  return out;
}

// y-axis subtasks: center shift along y plus height rescale.
template <typename Scalar>
BoxT<Scalar> decode_vertical(const BoxT<Scalar>& box, Scalar dy, Scalar dh,
                             const DeltaScaleT<Scalar>& scale = {},
                             Scalar clamp = Scalar(kDecodeClamp)) {
  BoxT<Scalar> out = box;
  out.y = box.y + dy * box.h / scale.ly;
  out.h = box.h * detail::clamped_exp_ratio(dh, scale.lh, clamp);
  return out;
}

// Applies the named 2-component view. `a` and `b` follow the component order
// of view_components.
template <typename Scalar>
BoxT<Scalar> decode_view(const BoxT<Scalar>& box, DeltaView view, Scalar a,
                         Scalar b, const DeltaScaleT<Scalar>& scale = {},
                         Scalar clamp = Scalar(kDecodeClamp)) {
  switch (view) {
    case DeltaView::kOffset: return decode_offset(box, a, b, scale);
    case DeltaView::kScaling: return decode_scaling(box, a, b, scale, clamp);
    case DeltaView::kHorizontal:
      return decode_horizontal(box, a, b, scale, clamp);
    case DeltaView::kVertical: return decode_vertical(box, a, b, scale, clamp);
    default: throw std::logic_error("decode_view: use decode_full");
  }
}

template <typename Scalar>
Scalar iou(const BoxT<Scalar>& a, const BoxT<Scalar>& b) {
  const Scalar ix = std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1());
  const Scalar iy = std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1());
  if (ix <= 0 || iy <= 0) return Scalar(0);
  const Scalar inter = ix * iy;
  // corner-derived areas so iou(a, a) is exactly one
  const Scalar area_a = (a.x2() - a.x1()) * (a.y2() - a.y1());
  const Scalar area_b = (b.x2() - b.x1()) * (b.y2() - b.y1());
  return inter / (area_a + area_b - inter);
}

enum class SizeBucket { kSmall, kMedium, kLarge };

inline constexpr double kSmallAreaMax = 32.0 * 32.0;   // exclusive
inline constexpr double kMediumAreaMax = 96.0 * 96.0;  // inclusive

// Small: area < 32^2. Medium: 32^2 <= area <= 96^2. Large: area > 96^2.
template <typename Scalar>
SizeBucket area_bucket(const BoxT<Scalar>& box) {
  const Scalar a = box.area();
  if (a < Scalar(kSmallAreaMax)) return SizeBucket::kSmall;
  if (a > Scalar(kMediumAreaMax)) return SizeBucket::kLarge;
  return SizeBucket::kMedium;
}

// A scored, classified box as produced by the full inference pipeline.
struct Detection {
  Box box;
  int category = 0;  // 1..K
  double score = 0;
};

// Greedy per-class suppression. Returns indices into `detections` of the kept
// entries, ordered by score descending with earlier insertion winning ties.
std::vector<int> nms(const std::vector<Detection>& detections,
                     double iou_threshold);

// Optional clamp of a box to [0,w]x[0,h]; a box entirely outside keeps a
// sliver of size `min_size` at the border.
Box clip_to_image(const Box& box, double image_w, double image_h,
                  double min_size = 1e-3);

}  // namespace headlab
