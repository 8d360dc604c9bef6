#pragma once

#include <array>
#include <compare>
#include <vector>

namespace smn {

/// Axis-aligned box in continuous coordinates. Pixel i spans [i, i+1), so a
/// box covering pixels 2..5 is {2, ., 6, .}. Extents are x2 - x1, no +1.
struct BoundingBox {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const noexcept { return x2 - x1; }
  double height() const noexcept { return y2 - y1; }
  double area() const noexcept {
    return width() > 0 && height() > 0 ? width() * height() : 0.0;
  }
  double cx() const noexcept { return 0.5 * (x1 + x2); }
  double cy() const noexcept { return 0.5 * (y1 + y2); }
  bool valid() const noexcept { return x2 > x1 && y2 > y1; }

  friend auto operator<=>(const BoundingBox&, const BoundingBox&) = default;
};

double iou(const BoundingBox& a, const BoundingBox& b) noexcept;
double intersection_area(const BoundingBox& a, const BoundingBox& b) noexcept;

BoundingBox clip_box(const BoundingBox& b, double width, double height) noexcept;

/// (dx, dy, dw, dh) regression target, each component divided by the matching
/// weight's reciprocal (weights {10,10,5,5} give the usual second-stage scaling).
using BoxDelta = std::array<double, 4>;
using DeltaWeights = std::array<double, 4>;
inline constexpr DeltaWeights kUnitWeights{1.0, 1.0, 1.0, 1.0};

BoxDelta encode_box(const BoundingBox& target, const BoundingBox& reference,
                    const DeltaWeights& weights = kUnitWeights) noexcept;
BoundingBox decode_box(const BoxDelta& delta, const BoundingBox& reference,
                       const DeltaWeights& weights = kUnitWeights) noexcept;

/// Image-space box to feature-map coordinates, where cell j is centered at
/// image coordinate (j + 0.5) * stride. The result is clipped to
/// [0, w-1] x [0, h-1]; it may have zero width when the box hugs a border.
BoundingBox to_feature_coords(const BoundingBox& image_box, int stride, int feat_h,
                              int feat_w) noexcept;

}  // namespace smn
