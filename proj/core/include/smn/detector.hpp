#pragma once

#include <span>
#include <string>
#include <vector>

#include "smn/autodiff.hpp"
#include "smn/box.hpp"
#include "smn/params.hpp"

namespace smn {

struct DetectorConfig {
  int stride = 4;
  // Backbone conv widths; the stride-2 convs are the odd-numbered layers.
  std::vector<int> channels{16, 32, 32, 32};
  int rpn_channels = 32;
  std::vector<double> anchor_scales{8.0, 16.0};
  std::vector<double> anchor_ratios{0.5, 1.0, 2.0};  // height / width
  int proposals = 64;        // k, kept after class-agnostic NMS
  int non_aggressive = 512;  // K', kept without NMS
  double rpn_nms_iou = 0.7;
  double nms_iou = 0.5;  // per-class NMS on final detections
  int pool = 7;
  int fc = 64;
  int num_classes = 4;  // foreground classes C; softmax index 0 is background
  double rpn_positive_iou = 0.7;
  double rpn_negative_iou = 0.3;
  double fg_iou = 0.5;
  DeltaWeights rpn_delta_weights{1.0, 1.0, 1.0, 1.0};
  DeltaWeights cls_delta_weights{10.0, 10.0, 5.0, 5.0};
  double head_init = 0.1;      // multiplier on output-layer init std
  double score_floor = 0.001;  // lowest class probability kept as a detection
  int max_detections = 100;

  int anchors_per_cell() const {
    return static_cast<int>(anchor_scales.size() * anchor_ratios.size());
  }
  int stride2_layers() const;
  // Throws ConfigError naming the field.
  void validate(int image_h, int image_w) const;
};

enum class ProposalMode { nms_top_k, non_aggressive };

struct RoI {
  BoundingBox box;  // image coordinates
  double score = 0.0;
  int anchor = -1;  // anchor slot it was regressed from, -1 for injected boxes
};

struct Detection {
  BoundingBox box;
  int cls = 0;  // foreground class in [0, C)
  double score = 0.0;
  int iteration = 0;
  int roi = -1;  // row of the RoI that produced it, -1 if unknown
  friend bool operator==(const Detection&, const Detection&) = default;
};

/// Anchors with the RPN output slot each one reads. Slot order is
/// (y, x, scale, ratio), matching the HWC layout of the RPN outputs.
struct AnchorSet {
  std::vector<BoundingBox> boxes;
  std::vector<int> slots;
};

/// All h' x w' x |scales| x |ratios| anchors centered on ((x+0.5)s, (y+0.5)s).
/// With image extents given, training excludes border crossers and inference
/// clips them.
AnchorSet build_anchors(int feat_h, int feat_w, std::span<const double> scales,
                        std::span<const double> ratios, int stride);
AnchorSet training_anchors(const AnchorSet& all, int image_h, int image_w);
AnchorSet inference_anchors(const AnchorSet& all, int image_h, int image_w);

void init_backbone_params(ParamStore& store, const DetectorConfig& cfg, Rng& rng,
                          const std::string& prefix = "base/");
void init_rpn_params(ParamStore& store, const DetectorConfig& cfg, int in_channels, Rng& rng,
                     const std::string& prefix, double head_init);
// in_dim is the per-RoI feature size entering fc6 (pool * pool * channels).
void init_cls_params(ParamStore& store, const DetectorConfig& cfg, int in_dim, Rng& rng,
                     const std::string& prefix, double head_init);
void init_base_params(ParamStore& store, const DetectorConfig& cfg, Rng& rng);

/// Image in [0, 1] to the centered backbone input.
Tensor prepare_image(const Tensor& image);

Var backbone_forward(Bindings& b, const DetectorConfig& cfg, const Var& image, bool trainable,
                     const std::string& prefix = "base/");

struct RpnOutput {
  Var logits;  // [K] objectness, one per anchor slot
  Var deltas;  // [K x 4]
};

RpnOutput rpn_forward(Bindings& b, const DetectorConfig& cfg, const Var& features, bool trainable,
                      const std::string& prefix = "base/rpn.");

/// Decodes, clips and ranks anchors. nms_top_k: class-agnostic NMS then the top
/// k; non_aggressive: the top K' by objectness, no NMS. Boxes that clip to zero
/// area are dropped.
std::vector<RoI> propose(const Tensor& logits, const Tensor& deltas, const AnchorSet& anchors,
                         const DetectorConfig& cfg, ProposalMode mode, int image_h, int image_w);

/// Greedy NMS. Returns kept indices ordered by descending score, ties broken by
/// index. Stops once max_keep boxes are kept (max_keep < 0: no limit).
std::vector<int> nms(std::span<const BoundingBox> boxes, std::span<const double> scores,
                     double iou_threshold, int max_keep = -1);

struct ClsOutput {
  Var fc7;     // [R x fc]
  Var logits;  // [R x (C+1)]
  Var deltas;  // [R x 4C]
};

/// 7x7 RoI max-pool, two fc+relu layers, then the (C+1)-way logit head and the
/// per-class regression head.
ClsOutput classify_rois(Bindings& b, const DetectorConfig& cfg, const Var& features,
                        std::span<const RoI> rois, bool trainable,
                        const std::string& prefix = "base/cls.");
// Pooled features only, [R x pool*pool*C].
Var pool_rois(const DetectorConfig& cfg, const Var& features, std::span<const RoI> rois);

/// Greedy score-descending suppression inside each class. Output sorted by
/// descending score (ties: class, then box).
std::vector<Detection> nms_per_class(std::vector<Detection> detections, double iou_threshold);

/// Class-specific regressed box for foreground class c.
BoundingBox regressed_box(const RoI& roi, const Tensor& deltas, int row, int cls,
                          const DetectorConfig& cfg, int image_h, int image_w);

/// Turns per-RoI class probabilities into detections. hardmax keeps only each
/// RoI's argmax class (skipped when it is background); otherwise every
/// foreground class at or above cfg.score_floor. Per-class NMS, then the
/// max_detections most confident.
std::vector<Detection> detections_from_scores(std::span<const RoI> rois, const Tensor& probs,
                                              const Tensor& deltas, const DetectorConfig& cfg,
                                              int image_h, int image_w, bool hardmax = false);

/// Forward-only base detector outputs for one image.
struct BaseResult {
  Tensor features;
  Tensor rpn_logits;
  Tensor rpn_deltas;
  std::vector<RoI> rois;
  Tensor cls_logits;
  Tensor cls_deltas;
  Tensor fc7;
  Tensor probs;
};

BaseResult run_base(const ParamStore& params, const DetectorConfig& cfg, const Tensor& image,
                    ProposalMode mode);
std::vector<Detection> base_detect(const ParamStore& params, const DetectorConfig& cfg,
                                   const Tensor& image, ProposalMode mode, bool hardmax = false);

}  // namespace smn
