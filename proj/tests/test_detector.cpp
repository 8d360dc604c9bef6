#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "fixtures.hpp"
#include "oracles.hpp"
#include "smn/detector.hpp"
#include "smn/model.hpp"
#include "smn/ops.hpp"

using namespace smn;
using fixture::random_tensor;

namespace {

BoundingBox random_box(Rng& rng, double extent = 64) {
  const double x1 = rng.uniform(0, extent - 4), y1 = rng.uniform(0, extent - 4);
  return {x1, y1, x1 + rng.uniform(2, 20), y1 + rng.uniform(2, 20)};
}

}  // namespace

TEST_CASE("backbone: 64x64 input at stride 4 gives a 16x16 map, zero in gives zero out") {
  DetectorConfig cfg;
  ParamStore store;
  Rng rng(1);
  init_backbone_params(store, cfg, rng);
  Tape tape;
  Bindings b(tape, std::as_const(store));
  Var f = backbone_forward(b, cfg, tape.constant(Tensor({64, 64, 3})), false);
  CHECK(f.shape() == Shape{16, 16, cfg.channels.back()});

  for (auto& [name, p] : store)
    if (name.ends_with(".b")) p.value.fill(0.0);
  Tape t2;
  Bindings b2(t2, std::as_const(store));
  CHECK(backbone_forward(b2, cfg, t2.constant(Tensor({64, 64, 3})), false).value().max_abs() == 0.0);
}

TEST_CASE("anchors: enumeration matches the slot-decoding oracle") {
  const std::vector<double> scales{8, 16}, ratios{0.5, 1, 2};
  const AnchorSet all = build_anchors(16, 16, scales, ratios, 4);
  REQUIRE(all.boxes.size() == 1536);
  int inside = 0;
  for (int k = 0; k < 1536; ++k) {
    CHECK(all.slots[k] == k);
    const BoundingBox o = oracle::anchor_at(k, 16, scales, ratios, 4);
    CHECK(std::abs(o.x1 - all.boxes[k].x1) <= 1e-12);
    CHECK(std::abs(o.y2 - all.boxes[k].y2) <= 1e-12);
    inside += o.x1 >= 0 && o.y1 >= 0 && o.x2 <= 64 && o.y2 <= 64;
  }
  const AnchorSet train = training_anchors(all, 64, 64);
  CHECK(static_cast<int>(train.boxes.size()) == inside);
  CHECK(inside < 1536);
  const AnchorSet inf = inference_anchors(all, 64, 64);
  CHECK(inf.boxes.size() == 1536);
  for (const auto& b : inf.boxes) CHECK((b.x1 >= 0 && b.y2 <= 64 && b.valid()));

  const std::vector<double> one{1.0}, s8{8.0};
  const AnchorSet single = build_anchors(1, 1, s8, one, 4);
  REQUIRE(single.boxes.size() == 1);
  CHECK(single.boxes[0] == BoundingBox{-2, -2, 6, 6});

  const std::vector<double> ones{1, 1};
  for (const auto& b : build_anchors(3, 4, scales, ones, 4).boxes)
    CHECK(b.width() == doctest::Approx(b.height()).epsilon(1e-15));
}

TEST_CASE("anchors: 200 random configurations match the oracle exactly") {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const int h = rng.integer(1, 6), w = rng.integer(1, 6), stride = rng.integer(1, 8);
    std::vector<double> scales(rng.integer(1, 3)), ratios(rng.integer(1, 3));
    for (auto& s : scales) s = rng.uniform(2, 20);
    for (auto& r : ratios) r = rng.uniform(0.3, 3);
    const AnchorSet a = build_anchors(h, w, scales, ratios, stride);
    REQUIRE(a.boxes.size() == static_cast<std::size_t>(h * w) * scales.size() * ratios.size());
    for (std::size_t k = 0; k < a.boxes.size(); ++k) {
      const BoundingBox o = oracle::anchor_at(static_cast<int>(k), w, scales, ratios, stride);
      CHECK(std::abs(o.x1 - a.boxes[k].x1) <= 1e-9);
      CHECK(std::abs(o.y1 - a.boxes[k].y1) <= 1e-9);
      CHECK(std::abs(o.x2 - a.boxes[k].x2) <= 1e-9);
      CHECK(std::abs(o.y2 - a.boxes[k].y2) <= 1e-9);
    }
  }
}

TEST_CASE("rpn: one output slot per anchor") {
  const ModelConfig mc = fixture::tiny_model();
  ParamStore store;
  Rng rng(3);
  init_model_params(store, mc, ModelKind::base, rng);
  Tape tape;
  Bindings b(tape, std::as_const(store));
  Var f = backbone_forward(b, mc.detector, tape.constant(Tensor({64, 64, 3})), false);
  RpnOutput r = rpn_forward(b, mc.detector, f, false);
  const int k = 16 * 16 * mc.detector.anchors_per_cell();
  CHECK(r.logits.value().size() == static_cast<std::size_t>(k));
  CHECK(r.deltas.value().size() == static_cast<std::size_t>(4 * k));
}

TEST_CASE("box coding: zero delta is the anchor, encode/decode round trips") {
  Rng rng(4);
  for (int trial = 0; trial < 500; ++trial) {
    const BoundingBox a = random_box(rng), g = random_box(rng);
    const DeltaWeights w{rng.uniform(1, 10), rng.uniform(1, 10), rng.uniform(1, 5), rng.uniform(1, 5)};
    const BoundingBox same = decode_box({0, 0, 0, 0}, a, w);
    CHECK(std::abs(same.x1 - a.x1) <= 1e-12);
    CHECK(std::abs(same.y2 - a.y2) <= 1e-12);
    const BoundingBox back = decode_box(encode_box(g, a, w), a, w);
    CHECK(std::abs(back.x1 - g.x1) <= 1e-6);
    CHECK(std::abs(back.y1 - g.y1) <= 1e-6);
    CHECK(std::abs(back.x2 - g.x2) <= 1e-6);
    CHECK(std::abs(back.y2 - g.y2) <= 1e-6);
  }
}

TEST_CASE("nms: matches the brute-force oracle on 200 random instances") {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = rng.integer(0, 60);
    std::vector<BoundingBox> boxes;
    std::vector<double> scores;
    for (int i = 0; i < n; ++i) {
      boxes.push_back(random_box(rng, 24));
      // Coarse scores force ties.
      scores.push_back(std::round(rng.uniform() * 10) / 10);
    }
    const double thr = rng.uniform(0.1, 0.9);
    const int cap = rng.integer(-1, 20);
    CHECK(nms(boxes, scores, thr, cap) == oracle::nms(boxes, scores, thr, cap));
  }
  const std::vector<BoundingBox> twins{{1, 1, 5, 5}, {1, 1, 5, 5}};
  const std::vector<double> s{0.5, 0.5};
  CHECK(nms(twins, s, 0.7) == std::vector<int>{0});
}

TEST_CASE("propose: identical boxes collapse, non-aggressive passes everything in score order") {
  DetectorConfig cfg;
  AnchorSet anchors;
  anchors.boxes = {{4, 4, 20, 20}, {4, 4, 20, 20}, {30, 30, 50, 50}};
  anchors.slots = {0, 1, 2};
  const Tensor logits({3}, std::vector<double>{0.3, 0.9, -1.0});
  const Tensor deltas({3, 4});
  const auto kept = propose(logits, deltas, anchors, cfg, ProposalMode::nms_top_k, 64, 64);
  REQUIRE(kept.size() == 2);
  CHECK(kept[0].anchor == 1);
  CHECK(kept[1].anchor == 2);
  const auto all = propose(logits, deltas, anchors, cfg, ProposalMode::non_aggressive, 64, 64);
  REQUIRE(all.size() == 3);
  CHECK(all[0].anchor == 1);
  CHECK(all[1].anchor == 0);
  CHECK(all[2].anchor == 2);
}

TEST_CASE("propose: non-aggressive output is sorted and contains the NMS output in order") {
  DetectorConfig cfg;
  cfg.non_aggressive = 1536;
  Rng rng(6);
  const AnchorSet anchors = inference_anchors(build_anchors(16, 16, cfg.anchor_scales, cfg.anchor_ratios, 4), 64, 64);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor logits = random_tensor({1536}, rng, -3, 3);
    const Tensor deltas = random_tensor({1536, 4}, rng, -0.2, 0.2);
    const auto na = propose(logits, deltas, anchors, cfg, ProposalMode::non_aggressive, 64, 64);
    const auto nk = propose(logits, deltas, anchors, cfg, ProposalMode::nms_top_k, 64, 64);
    CHECK(nk.size() <= static_cast<std::size_t>(cfg.proposals));
    for (std::size_t i = 1; i < na.size(); ++i) CHECK(na[i - 1].score >= na[i].score);
    std::size_t j = 0;
    for (const auto& r : na)
      if (j < nk.size() && r.anchor == nk[j].anchor) ++j;
    CHECK(j == nk.size());
  }
}

TEST_CASE("classify_rois: rows sum to one and duplicate RoIs agree") {
  const ModelConfig mc = fixture::tiny_model();
  ParamStore store;
  Rng rng(7);
  init_model_params(store, mc, ModelKind::base, rng);
  Tape tape;
  Bindings b(tape, std::as_const(store));
  Var f = backbone_forward(b, mc.detector, tape.constant(prepare_image(random_tensor({64, 64, 3}, rng, 0, 1))), false);
  std::vector<RoI> rois{{{3, 4, 20, 30}}, {{10, 10, 40, 22}}, {{3, 4, 20, 30}}};
  ClsOutput out = classify_rois(b, mc.detector, f, rois, false);
  const Tensor p = softmax_rows(out.logits.value());
  const int k = mc.detector.num_classes + 1;
  for (int r = 0; r < 3; ++r) {
    double s = 0;
    for (int c = 0; c < k; ++c) s += p[r * k + c];
    CHECK(std::abs(s - 1) <= 1e-9);
  }
  for (int c = 0; c < k; ++c) CHECK(out.logits.value()[c] == out.logits.value()[2 * k + c]);
  CHECK(out.deltas.value().shape() == Shape{3, 4 * mc.detector.num_classes});
}

TEST_CASE("nms_per_class: classes never suppress each other") {
  std::vector<Detection> d{{{0, 0, 10, 10}, 0, 0.9}, {{0, 0, 10, 10}, 1, 0.8}, {{0, 0, 10, 10}, 0, 0.7}};
  const auto kept = nms_per_class(d, 0.5);
  REQUIRE(kept.size() == 2);
  CHECK(kept[0].cls == 0);
  CHECK(kept[1].cls == 1);

  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Detection> dets;
    for (int i = 0; i < 50; ++i)
      dets.push_back({random_box(rng, 30), static_cast<int>(rng.below(3)), rng.uniform()});
    const auto got = nms_per_class(dets, 0.5);
    std::vector<Detection> want;
    for (int c = 0; c < 3; ++c) {
      std::vector<BoundingBox> boxes;
      std::vector<double> scores;
      std::vector<int> index;
      for (int i = 0; i < 50; ++i)
        if (dets[i].cls == c) {
          boxes.push_back(dets[i].box);
          scores.push_back(dets[i].score);
          index.push_back(i);
        }
      for (int k : oracle::nms(boxes, scores, 0.5)) want.push_back(dets[index[k]]);
    }
    std::sort(want.begin(), want.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == want[i]);
  }
}

TEST_CASE("base detector: deterministic and finite on random weights") {
  const ModelConfig mc = fixture::tiny_model();
  ParamStore store;
  Rng rng(9);
  init_model_params(store, mc, ModelKind::base, rng);
  const Tensor img = random_tensor({64, 64, 3}, rng, 0, 1);
  const auto a = base_detect(store, mc.detector, img, ProposalMode::nms_top_k);
  const auto b = base_detect(store, mc.detector, img, ProposalMode::nms_top_k);
  CHECK(a == b);
  CHECK(a.size() <= static_cast<std::size_t>(mc.detector.max_detections));
  for (const auto& d : a) {
    CHECK(std::isfinite(d.score));
    CHECK((d.cls >= 0 && d.cls < mc.detector.num_classes));
  }
}
