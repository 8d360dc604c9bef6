#include "smn/targets.hpp"

#include <algorithm>

#include "smn/error.hpp"

namespace smn {

RegionTargets label_regions(std::span<const BoundingBox> regions, std::span<const Instance> gts,
                            const std::vector<bool>& retired, const LabelRule& rule) {
  const std::size_t n = regions.size(), g = gts.size();
  RegionTargets t;
  t.labels.assign(n, RegionLabel::negative);
  t.gt.assign(n, -1);
  t.classes.assign(n, -1);
  if (g == 0) return t;

  std::vector<double> overlaps(n * g);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < g; ++j) overlaps[i * g + j] = iou(regions[i], gts[j].box);

  for (std::size_t i = 0; i < n; ++i) {
    int best = 0;
    for (std::size_t j = 1; j < g; ++j)
      if (overlaps[i * g + j] > overlaps[i * g + best]) best = static_cast<int>(j);
    const double m = overlaps[i * g + best];
    if (m >= rule.positive_iou) {
      t.labels[i] = RegionLabel::positive;
      t.gt[i] = best;
    } else if (m < rule.negative_iou) {
      t.labels[i] = RegionLabel::negative;
    } else {
      t.labels[i] = RegionLabel::ignore;
    }
  }
  if (rule.argmax_positive) {
    for (std::size_t j = 0; j < g; ++j) {
      double top = 0.0;
      for (std::size_t i = 0; i < n; ++i) top = std::max(top, overlaps[i * g + j]);
      if (top <= 0.0) continue;
      for (std::size_t i = 0; i < n; ++i)
        if (overlaps[i * g + j] == top && t.labels[i] != RegionLabel::positive) {
          t.labels[i] = RegionLabel::positive;
          t.gt[i] = static_cast<int>(j);
        }
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (t.labels[i] != RegionLabel::positive) continue;
    t.classes[i] = gts[t.gt[i]].cls;
    if (!retired.empty() && retired[t.gt[i]]) t.labels[i] = RegionLabel::flipped;
  }
  return t;
}

std::vector<bool> retired_mask(std::span<const Instance> gts,
                               std::span<const Detection> detections_so_far,
                               double iou_threshold) {
  std::vector<bool> retired(gts.size(), false);
  for (std::size_t j = 0; j < gts.size(); ++j)
    for (const auto& d : detections_so_far)
      if (d.cls == gts[j].cls && iou(d.box, gts[j].box) >= iou_threshold) retired[j] = true;
  return retired;
}

IterationTargets assign_iteration_targets(std::span<const Instance> gts,
                                          std::span<const Detection> detections_so_far,
                                          std::span<const RoI> rois, double fg_iou) {
  IterationTargets t;
  t.retired = retired_mask(gts, detections_so_far);
  std::vector<BoundingBox> boxes;
  boxes.reserve(rois.size());
  for (const auto& r : rois) boxes.push_back(r.box);
  t.rois = label_regions(boxes, gts, t.retired, {fg_iou, fg_iou, false});
  return t;
}

std::vector<int> Sample::all() const {
  std::vector<int> out = positive;
  out.insert(out.end(), flipped.begin(), flipped.end());
  out.insert(out.end(), negative.begin(), negative.end());
  return out;
}

Sample sample_regions(const RegionTargets& targets, const SampleRatios& ratios, int size,
                      Rng& rng) {
  if (size <= 0) throw ValueError("sample_regions: sample size must be positive");
  const int total = ratios.positive + ratios.flipped + ratios.negative;
  if (ratios.positive < 0 || ratios.flipped < 0 || ratios.negative < 0 || total <= 0)
    throw ValueError("sample_regions: ratios must be non-negative with a positive sum");
  std::vector<int> pos, flip, neg;
  for (std::size_t i = 0; i < targets.labels.size(); ++i) {
    switch (targets.labels[i]) {
      case RegionLabel::positive: pos.push_back(static_cast<int>(i)); break;
      case RegionLabel::flipped: flip.push_back(static_cast<int>(i)); break;
      case RegionLabel::negative: neg.push_back(static_cast<int>(i)); break;
      case RegionLabel::ignore: break;
    }
  }
  rng.shuffle(pos);
  rng.shuffle(flip);
  rng.shuffle(neg);
  Sample s;
  const int want_pos = size * ratios.positive / total;
  const int want_flip = size * ratios.flipped / total;
  const int take_pos = std::min<int>(want_pos, static_cast<int>(pos.size()));
  const int take_flip = std::min<int>(want_flip, static_cast<int>(flip.size()));
  const int take_neg = std::min<int>(size - take_pos - take_flip, static_cast<int>(neg.size()));
  s.positive.assign(pos.begin(), pos.begin() + take_pos);
  s.flipped.assign(flip.begin(), flip.begin() + take_flip);
  s.negative.assign(neg.begin(), neg.begin() + take_neg);
  return s;
}

}  // namespace smn
