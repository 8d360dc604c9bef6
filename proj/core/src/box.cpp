#include "smn/box.hpp"

#include <algorithm>
#include <cmath>

namespace smn {

namespace {
// exp() argument cap for dw/dh, as in the Faster R-CNN lineage.
const double kMaxLogScale = std::log(1000.0 / 16.0);
}  // namespace

double intersection_area(const BoundingBox& a, const BoundingBox& b) noexcept {
  const double w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  return (w > 0 && h > 0) ? w * h : 0.0;
}

double iou(const BoundingBox& a, const BoundingBox& b) noexcept {
  const double inter = intersection_area(a, b);
  if (inter <= 0) return 0.0;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

BoundingBox clip_box(const BoundingBox& b, double width, double height) noexcept {
  return {std::clamp(b.x1, 0.0, width), std::clamp(b.y1, 0.0, height),
          std::clamp(b.x2, 0.0, width), std::clamp(b.y2, 0.0, height)};
}

BoxDelta encode_box(const BoundingBox& target, const BoundingBox& reference,
                    const DeltaWeights& weights) noexcept {
  const double rw = reference.width(), rh = reference.height();
  return {weights[0] * (target.cx() - reference.cx()) / rw,
          weights[1] * (target.cy() - reference.cy()) / rh,
          weights[2] * std::log(target.width() / rw),
          weights[3] * std::log(target.height() / rh)};
}

BoundingBox decode_box(const BoxDelta& delta, const BoundingBox& reference,
                       const DeltaWeights& weights) noexcept {
  const double rw = reference.width(), rh = reference.height();
  const double cx = reference.cx() + delta[0] / weights[0] * rw;
  const double cy = reference.cy() + delta[1] / weights[1] * rh;
  const double w = rw * std::exp(std::min(delta[2] / weights[2], kMaxLogScale));
  const double h = rh * std::exp(std::min(delta[3] / weights[3], kMaxLogScale));
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

BoundingBox to_feature_coords(const BoundingBox& b, int stride, int feat_h,
                              int feat_w) noexcept {
  const double s = static_cast<double>(stride);
  const double maxx = feat_w - 1, maxy = feat_h - 1;
  BoundingBox f{std::clamp(b.x1 / s - 0.5, 0.0, maxx), std::clamp(b.y1 / s - 0.5, 0.0, maxy),
                std::clamp(b.x2 / s - 0.5, 0.0, maxx), std::clamp(b.y2 / s - 0.5, 0.0, maxy)};
  return f;
}

}  // namespace smn
