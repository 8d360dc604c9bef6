#include "smn/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "smn/error.hpp"
#include "smn/ops.hpp"

namespace smn {

int DetectorConfig::stride2_layers() const {
  int n = 0;
  for (int s = stride; s > 1; s /= 2) ++n;
  return n;
}

void DetectorConfig::validate(int image_h, int image_w) const {
  auto fail = [](const std::string& m) { throw ConfigError("detector." + m); };
  if (stride < 1 || (stride & (stride - 1)) != 0) fail("stride: must be a power of two");
  if (image_h % stride != 0 || image_w % stride != 0)
    fail("stride: " + std::to_string(stride) + " does not divide image extents " +
         std::to_string(image_h) + "x" + std::to_string(image_w));
  if (channels.empty()) fail("channels: need at least one backbone layer");
  for (int c : channels)
    if (c < 1) fail("channels: widths must be positive");
  if (stride2_layers() > static_cast<int>(channels.size() / 2))
    fail("channels: too few layers for the requested stride");
  if (anchor_scales.empty() || anchor_ratios.empty()) fail("anchors: need scales and ratios");
  for (double s : anchor_scales)
    if (!(s > 0)) fail("anchor_scales: must be positive");
  for (double r : anchor_ratios)
    if (!(r > 0)) fail("anchor_ratios: must be positive");
  const long k_total = static_cast<long>(image_h / stride) * (image_w / stride) * anchors_per_cell();
  if (proposals < 1 || proposals > k_total) fail("proposals: need 1 <= k <= K");
  if (non_aggressive < 1) fail("non_aggressive: must be positive");
  if (num_classes < 1) fail("num_classes: must be positive");
  if (pool < 1 || fc < 1 || rpn_channels < 1) fail("pool/fc/rpn_channels: must be positive");
  for (double t : {rpn_nms_iou, nms_iou, rpn_positive_iou, rpn_negative_iou, fg_iou})
    if (!(t > 0 && t <= 1)) fail("iou thresholds: must be in (0, 1]");
  if (rpn_negative_iou > rpn_positive_iou) fail("rpn_negative_iou: exceeds rpn_positive_iou");
}

AnchorSet build_anchors(int feat_h, int feat_w, std::span<const double> scales,
                        std::span<const double> ratios, int stride) {
  AnchorSet set;
  int slot = 0;
  for (int y = 0; y < feat_h; ++y)
    for (int x = 0; x < feat_w; ++x) {
      const double cx = (x + 0.5) * stride, cy = (y + 0.5) * stride;
      for (double s : scales)
        for (double r : ratios) {
          const double w = s / std::sqrt(r), h = s * std::sqrt(r);
          set.boxes.push_back({cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h});
          set.slots.push_back(slot++);
        }
    }
  return set;
}

AnchorSet training_anchors(const AnchorSet& all, int image_h, int image_w) {
  AnchorSet out;
  for (std::size_t i = 0; i < all.boxes.size(); ++i) {
    const auto& b = all.boxes[i];
    if (b.x1 >= 0 && b.y1 >= 0 && b.x2 <= image_w && b.y2 <= image_h) {
      out.boxes.push_back(b);
      out.slots.push_back(all.slots[i]);
    }
  }
  return out;
}

AnchorSet inference_anchors(const AnchorSet& all, int image_h, int image_w) {
  AnchorSet out = all;
  for (auto& b : out.boxes) b = clip_box(b, image_w, image_h);
  return out;
}

void init_backbone_params(ParamStore& store, const DetectorConfig& cfg, Rng& rng,
                          const std::string& prefix) {
  int in = 3;
  for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
    const std::string n = prefix + "conv" + std::to_string(i + 1);
    store.add_gaussian(n + ".w", {3, 3, in, cfg.channels[i]}, 9 * in, 1.0, rng);
    store.add_zeros(n + ".b", {cfg.channels[i]});
    in = cfg.channels[i];
  }
}

void init_rpn_params(ParamStore& store, const DetectorConfig& cfg, int in_channels, Rng& rng,
                     const std::string& prefix, double head_init) {
  const int a = cfg.anchors_per_cell();
  store.add_gaussian(prefix + "conv.w", {3, 3, in_channels, cfg.rpn_channels}, 9 * in_channels,
                     1.0, rng);
  store.add_zeros(prefix + "conv.b", {cfg.rpn_channels});
  store.add_gaussian(prefix + "obj.w", {1, 1, cfg.rpn_channels, a}, cfg.rpn_channels, head_init,
                     rng);
  store.add_zeros(prefix + "obj.b", {a});
  store.add_gaussian(prefix + "delta.w", {1, 1, cfg.rpn_channels, 4 * a}, cfg.rpn_channels,
                     head_init, rng);
  store.add_zeros(prefix + "delta.b", {4 * a});
}

void init_cls_params(ParamStore& store, const DetectorConfig& cfg, int in_dim, Rng& rng,
                     const std::string& prefix, double head_init) {
  store.add_gaussian(prefix + "fc6.w", {in_dim, cfg.fc}, in_dim, 1.0, rng);
  store.add_zeros(prefix + "fc6.b", {cfg.fc});
  store.add_gaussian(prefix + "fc7.w", {cfg.fc, cfg.fc}, cfg.fc, 1.0, rng);
  store.add_zeros(prefix + "fc7.b", {cfg.fc});
  store.add_gaussian(prefix + "logit.w", {cfg.fc, cfg.num_classes + 1}, cfg.fc, head_init, rng);
  store.add_zeros(prefix + "logit.b", {cfg.num_classes + 1});
  store.add_gaussian(prefix + "delta.w", {cfg.fc, 4 * cfg.num_classes}, cfg.fc, head_init, rng);
  store.add_zeros(prefix + "delta.b", {4 * cfg.num_classes});
}

void init_base_params(ParamStore& store, const DetectorConfig& cfg, Rng& rng) {
  init_backbone_params(store, cfg, rng, "base/");
  init_rpn_params(store, cfg, cfg.channels.back(), rng, "base/rpn.", cfg.head_init);
  init_cls_params(store, cfg, cfg.pool * cfg.pool * cfg.channels.back(), rng, "base/cls.",
                  cfg.head_init);
}

Tensor prepare_image(const Tensor& image) {
  Tensor out = image;
  for (double& v : out.values()) v -= 0.5;
  return out;
}

Var backbone_forward(Bindings& b, const DetectorConfig& cfg, const Var& image, bool trainable,
                     const std::string& prefix) {
  const int h = image.shape()[0], w = image.shape()[1];
  if (h % cfg.stride != 0 || w % cfg.stride != 0)
    throw ShapeError("backbone input " + shape_str(image.shape()) +
                     ": extents must be divisible by stride " + std::to_string(cfg.stride));
  Var x = image;
  int strided = 0;
  for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
    const std::string n = prefix + "conv" + std::to_string(i + 1);
    const bool down = (i % 2 == 1) && strided < cfg.stride2_layers();
    if (down) ++strided;
    x = relu(conv2d(x, b(n + ".w", trainable), b(n + ".b", trainable), down ? 2 : 1, 1));
  }
  return x;
}

RpnOutput rpn_forward(Bindings& b, const DetectorConfig& cfg, const Var& features, bool trainable,
                      const std::string& prefix) {
  const int fh = features.shape()[0], fw = features.shape()[1];
  const int k = fh * fw * cfg.anchors_per_cell();
  Var hidden = relu(conv2d(features, b(prefix + "conv.w", trainable),
                           b(prefix + "conv.b", trainable), 1, 1));
  Var obj = conv2d(hidden, b(prefix + "obj.w", trainable), b(prefix + "obj.b", trainable), 1, 0);
  Var del =
      conv2d(hidden, b(prefix + "delta.w", trainable), b(prefix + "delta.b", trainable), 1, 0);
  return {reshape(obj, {k}), reshape(del, {k, 4})};
}

std::vector<int> nms(std::span<const BoundingBox> boxes, std::span<const double> scores,
                     double iou_threshold, int max_keep) {
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return scores[a] > scores[b]; });
  std::vector<int> keep;
  for (int i : order) {
    if (max_keep >= 0 && static_cast<int>(keep.size()) >= max_keep) break;
    bool ok = true;
    for (int j : keep)
      if (iou(boxes[i], boxes[j]) > iou_threshold) {
        ok = false;
        break;
      }
    if (ok) keep.push_back(i);
  }
  return keep;
}

std::vector<RoI> propose(const Tensor& logits, const Tensor& deltas, const AnchorSet& anchors,
                         const DetectorConfig& cfg, ProposalMode mode, int image_h, int image_w) {
  std::vector<BoundingBox> boxes;
  std::vector<double> scores;
  std::vector<int> slots;
  boxes.reserve(anchors.boxes.size());
  for (std::size_t i = 0; i < anchors.boxes.size(); ++i) {
    const int s = anchors.slots[i];
    const BoxDelta d{deltas[4 * s], deltas[4 * s + 1], deltas[4 * s + 2], deltas[4 * s + 3]};
    const BoundingBox box =
        clip_box(decode_box(d, anchors.boxes[i], cfg.rpn_delta_weights), image_w, image_h);
    if (box.area() <= 0.0) continue;
    boxes.push_back(box);
    scores.push_back(logits[s]);
    slots.push_back(s);
  }
  std::vector<int> keep;
  if (mode == ProposalMode::nms_top_k) {
    keep = nms(boxes, scores, cfg.rpn_nms_iou, cfg.proposals);
  } else {
    keep.resize(boxes.size());
    std::iota(keep.begin(), keep.end(), 0);
    std::stable_sort(keep.begin(), keep.end(),
                     [&](int a, int b) { return scores[a] > scores[b]; });
    if (static_cast<int>(keep.size()) > cfg.non_aggressive) keep.resize(cfg.non_aggressive);
  }
  std::vector<RoI> out;
  out.reserve(keep.size());
  for (int i : keep) out.push_back({boxes[i], 1.0 / (1.0 + std::exp(-scores[i])), slots[i]});
  return out;
}

Var pool_rois(const DetectorConfig& cfg, const Var& features, std::span<const RoI> rois) {
  if (rois.empty()) throw ValueError("classify_rois: empty RoI list");
  const int fh = features.shape()[0], fw = features.shape()[1], c = features.shape()[2];
  std::vector<BoundingBox> fboxes;
  fboxes.reserve(rois.size());
  for (std::size_t i = 0; i < rois.size(); ++i) {
    if (!rois[i].box.valid())
      throw ValueError("classify_rois: RoI " + std::to_string(i) + " has non-positive area");
    fboxes.push_back(to_feature_coords(rois[i].box, cfg.stride, fh, fw));
  }
  Var pooled = roi_max_pool(features, fboxes, cfg.pool, cfg.pool);
  return reshape(pooled, {static_cast<int>(rois.size()), cfg.pool * cfg.pool * c});
}

ClsOutput classify_rois(Bindings& b, const DetectorConfig& cfg, const Var& features,
                        std::span<const RoI> rois, bool trainable, const std::string& prefix) {
  Var x = pool_rois(cfg, features, rois);
  Var fc6 = relu(fully_connected(x, b(prefix + "fc6.w", trainable), b(prefix + "fc6.b", trainable)));
  Var fc7 =
      relu(fully_connected(fc6, b(prefix + "fc7.w", trainable), b(prefix + "fc7.b", trainable)));
  Var logits =
      fully_connected(fc7, b(prefix + "logit.w", trainable), b(prefix + "logit.b", trainable));
  Var deltas =
      fully_connected(fc7, b(prefix + "delta.w", trainable), b(prefix + "delta.b", trainable));
  return {fc7, logits, deltas};
}

std::vector<Detection> nms_per_class(std::vector<Detection> dets, double iou_threshold) {
  std::sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.cls != b.cls) return a.cls < b.cls;
    return a.box < b.box;
  });
  std::vector<Detection> kept;
  for (const auto& d : dets) {
    bool ok = true;
    for (const auto& k : kept)
      if (k.cls == d.cls && iou(k.box, d.box) > iou_threshold) {
        ok = false;
        break;
      }
    if (ok) kept.push_back(d);
  }
  return kept;
}

BoundingBox regressed_box(const RoI& roi, const Tensor& deltas, int row, int cls,
                          const DetectorConfig& cfg, int image_h, int image_w) {
  const std::size_t base = static_cast<std::size_t>(row) * 4 * cfg.num_classes + 4 * cls;
  const BoxDelta d{deltas[base], deltas[base + 1], deltas[base + 2], deltas[base + 3]};
  return clip_box(decode_box(d, roi.box, cfg.cls_delta_weights), image_w, image_h);
}

std::vector<Detection> detections_from_scores(std::span<const RoI> rois, const Tensor& probs,
                                              const Tensor& deltas, const DetectorConfig& cfg,
                                              int image_h, int image_w, bool hardmax) {
  const int k = cfg.num_classes + 1;
  std::vector<Detection> dets;
  for (std::size_t r = 0; r < rois.size(); ++r) {
    const double* p = probs.data() + r * k;
    auto emit = [&](int c) {
      const BoundingBox box = regressed_box(rois[r], deltas, static_cast<int>(r), c - 1, cfg,
                                            image_h, image_w);
      if (box.area() > 0.0) dets.push_back({box, c - 1, p[c], 0, static_cast<int>(r)});
    };
    if (hardmax) {
      const int best = static_cast<int>(std::max_element(p, p + k) - p);
      if (best > 0 && p[best] >= cfg.score_floor) emit(best);
    } else {
      for (int c = 1; c < k; ++c)
        if (p[c] >= cfg.score_floor) emit(c);
    }
  }
  dets = nms_per_class(std::move(dets), cfg.nms_iou);
  if (static_cast<int>(dets.size()) > cfg.max_detections) dets.resize(cfg.max_detections);
  return dets;
}

BaseResult run_base(const ParamStore& params, const DetectorConfig& cfg, const Tensor& image,
                    ProposalMode mode) {
  const int h = image.dim(0), w = image.dim(1);
  Tape tape;
  Bindings b(tape, params);
  Var feat = backbone_forward(b, cfg, tape.constant(prepare_image(image)), false);
  RpnOutput rpn = rpn_forward(b, cfg, feat, false);
  const int fh = feat.shape()[0], fw = feat.shape()[1];
  const AnchorSet anchors = inference_anchors(
      build_anchors(fh, fw, cfg.anchor_scales, cfg.anchor_ratios, cfg.stride), h, w);
  BaseResult out;
  out.features = feat.value();
  out.rpn_logits = rpn.logits.value();
  out.rpn_deltas = rpn.deltas.value();
  out.rois = propose(out.rpn_logits, out.rpn_deltas, anchors, cfg, mode, h, w);
  if (out.rois.empty()) return out;
  ClsOutput cls = classify_rois(b, cfg, feat, out.rois, false);
  out.cls_logits = cls.logits.value();
  out.cls_deltas = cls.deltas.value();
  out.fc7 = cls.fc7.value();
  out.probs = softmax_rows(out.cls_logits);
  return out;
}

std::vector<Detection> base_detect(const ParamStore& params, const DetectorConfig& cfg,
                                   const Tensor& image, ProposalMode mode, bool hardmax) {
  BaseResult r = run_base(params, cfg, image, mode);
  if (r.rois.empty()) return {};
  return detections_from_scores(r.rois, r.probs, r.cls_deltas, cfg, image.dim(0), image.dim(1),
                                hardmax);
}

}  // namespace smn
