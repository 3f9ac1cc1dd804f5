#include "headlab/box.hpp"

#include <numeric>

namespace headlab {

std::vector<int> nms(const std::vector<Detection>& detections,
                     double iou_threshold) {
  std::vector<int> order(detections.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return detections[a].score > detections[b].score;
  });

  std::vector<char> suppressed(detections.size(), 0);
  std::vector<int> kept;
  for (size_t i = 0; i < order.size(); ++i) {
    const int a = order[i];
    if (suppressed[a]) continue;
    kept.push_back(a);
    for (size_t j = i + 1; j < order.size(); ++j) {
      const int b = order[j];
      if (suppressed[b] || detections[b].category != detections[a].category)
        continue;
      if (iou(detections[a].box, detections[b].box) > iou_threshold)
        suppressed[b] = 1;
    }
  }
  return kept;
}

Box clip_to_image(const Box& box, double image_w, double image_h,
                  double min_size) {
  const double x1 = std::clamp(box.x1(), 0.0, image_w);
  const double y1 = std::clamp(box.y1(), 0.0, image_h);
  const double x2 = std::clamp(box.x2(), 0.0, image_w);
  const double y2 = std::clamp(box.y2(), 0.0, image_h);
  Box out;
  out.w = std::max(x2 - x1, min_size);
  out.h = std::max(y2 - y1, min_size);
  out.x = (x1 + x2) / 2.0;
  out.y = (y1 + y2) / 2.0;
  return out;
}

}  // namespace headlab
