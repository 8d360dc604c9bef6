#pragma once

#include <span>
#include <vector>

#include "smn/detector.hpp"
#include "smn/rng.hpp"
#include "smn/scene.hpp"

namespace smn {

enum class RegionLabel : int { ignore = -1, negative = 0, positive = 1, flipped = 2 };

struct LabelRule {
  double positive_iou = 0.5;
  double negative_iou = 0.5;  // negative when max IoU is below this
  bool argmax_positive = false;  // each GT's best-overlapping regions are positive too
};

inline LabelRule rpn_rule(const DetectorConfig& c) {
  return {c.rpn_positive_iou, c.rpn_negative_iou, true};
}
inline LabelRule roi_rule(const DetectorConfig& c) { return {c.fg_iou, c.fg_iou, false}; }

struct RegionTargets {
  std::vector<RegionLabel> labels;
  std::vector<int> gt;       // matched ground truth, -1 if none
  std::vector<int> classes;  // foreground class of the match for positive/flipped, else -1
};

/// Standard assignment against every GT, after which regions whose matched
/// GT is retired become flipped instead of positive.
RegionTargets label_regions(std::span<const BoundingBox> regions, std::span<const Instance> gts,
                            const std::vector<bool>& retired, const LabelRule& rule);

/// A GT retires once an earlier detection of its class overlaps it with
/// IoU >= iou_threshold.
std::vector<bool> retired_mask(std::span<const Instance> gts,
                               std::span<const Detection> detections_so_far,
                               double iou_threshold = 0.5);

struct IterationTargets {
  std::vector<bool> retired;  // per GT
  RegionTargets rois;
};

IterationTargets assign_iteration_targets(std::span<const Instance> gts,
                                          std::span<const Detection> detections_so_far,
                                          std::span<const RoI> rois, double fg_iou = 0.5);

struct SampleRatios {
  int positive = 1;
  int flipped = 1;
  int negative = 2;
};

struct Sample {
  std::vector<int> positive;
  std::vector<int> flipped;
  std::vector<int> negative;
  std::vector<int> all() const;  // positives, then flipped, then negatives
  std::size_t size() const { return positive.size() + flipped.size() + negative.size(); }
};

/// Stratified draw without replacement. The positive and flipped quotas are
/// size * ratio / sum(ratios), capped by availability; negatives fill the rest.
Sample sample_regions(const RegionTargets& targets, const SampleRatios& ratios, int size,
                      Rng& rng);

}  // namespace smn
