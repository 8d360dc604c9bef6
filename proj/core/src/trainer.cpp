#include "smn/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <limits>
#include <numeric>
#include <ostream>

#include "smn/error.hpp"
#include "smn/ops.hpp"
#include "smn/rollout.hpp"

namespace smn {

namespace {

constexpr double kRpnBeta = 1.0 / 9.0;
constexpr double kClsBeta = 1.0;

std::vector<Instance> as_instances(std::span<const Detection> dets) {
  std::vector<Instance> out;
  for (const auto& d : dets) out.push_back({d.cls, d.box});
  return out;
}

// Objectness and anchor-regression losses over sampled anchors. Flipped anchors
// are objectness negatives and carry no regression target.
void add_rpn_losses(const Var& logits, const Var& deltas, const AnchorSet& anchors,
                    const RegionTargets& t, const Sample& s, std::span<const Instance> gts,
                    const DetectorConfig& det, double cls_w, double reg_w, std::vector<Var>& terms,
                    double& cls_v, double& reg_v) {
  const int k = logits.shape()[0];
  const double norm = std::max<std::size_t>(1, s.size());
  Tensor target({k}, 0.0), weight({k}, 0.0);
  Tensor dt({k, 4}, 0.0), dw({k, 4}, 0.0);
  for (int i : s.all()) {
    const int slot = anchors.slots[i];
    weight[slot] = 1.0;
    if (t.labels[i] == RegionLabel::positive) {
      target[slot] = 1.0;
      const BoxDelta d = encode_box(gts[t.gt[i]].box, anchors.boxes[i], det.rpn_delta_weights);
      for (int c = 0; c < 4; ++c) {
        dt[4 * slot + c] = d[c];
        dw[4 * slot + c] = 1.0;
      }
    }
  }
  if (s.size() == 0) return;
  Var lc = scale(sigmoid_bce(logits, target, weight, norm), cls_w);
  Var lr = scale(smooth_l1(deltas, dt, dw, kRpnBeta, norm), reg_w);
  cls_v += lc.value()[0];
  reg_v += lr.value()[0];
  terms.push_back(lc);
  terms.push_back(lr);
}

// Classification and class-specific regression losses; rows of logits/deltas
// follow `rows` (indices into the RoI list). Flipped RoIs are background.
void add_cls_losses(const Var& logits, const Var& deltas, std::span<const RoI> rois,
                    std::span<const int> rows, const RegionTargets& t,
                    std::span<const Instance> gts, const DetectorConfig& det, double cls_w,
                    double reg_w, std::vector<Var>& terms, double& cls_v, double& reg_v,
                    double* dedup_v) {
  const int r = static_cast<int>(rows.size());
  if (r == 0) return;
  const int c4 = 4 * det.num_classes;
  std::vector<int> labels(r, 0);
  Tensor dt({r, c4}, 0.0), dw({r, c4}, 0.0);
  for (int i = 0; i < r; ++i) {
    const int idx = rows[i];
    if (t.labels[idx] != RegionLabel::positive) continue;
    const int cls = t.classes[idx];
    labels[i] = cls + 1;
    const BoxDelta d = encode_box(gts[t.gt[idx]].box, rois[idx].box, det.cls_delta_weights);
    for (int c = 0; c < 4; ++c) {
      dt[i * c4 + 4 * cls + c] = d[c];
      dw[i * c4 + 4 * cls + c] = 1.0;
    }
  }
  Var lc = scale(softmax_cross_entropy(logits, labels, r), cls_w);
  Var lr = scale(smooth_l1(deltas, dt, dw, kClsBeta, r), reg_w);
  cls_v += lc.value()[0];
  reg_v += lr.value()[0];
  terms.push_back(lc);
  terms.push_back(lr);
  if (dedup_v) {
    const Tensor p = softmax_rows(logits.value());
    const int k = det.num_classes + 1;
    double acc = 0.0;
    int n = 0;
    for (int i = 0; i < r; ++i)
      if (t.labels[rows[i]] == RegionLabel::flipped) {
        acc -= std::log(std::max(p[static_cast<std::size_t>(i) * k], 1e-300));
        ++n;
      }
    if (n > 0) *dedup_v += acc / n;
  }
}

std::vector<RoI> with_ground_truth(std::vector<RoI> rois, std::span<const Instance> gts) {
  for (const auto& g : gts) rois.push_back({g.box, 1.0, -1});
  return rois;
}

std::vector<RoI> pick(std::span<const RoI> rois, std::span<const int> rows) {
  std::vector<RoI> out;
  out.reserve(rows.size());
  for (int i : rows) out.push_back(rois[i]);
  return out;
}

std::vector<BoundingBox> boxes_of(std::span<const RoI> rois) {
  std::vector<BoundingBox> out;
  out.reserve(rois.size());
  for (const auto& r : rois) out.push_back(r.box);
  return out;
}

Rng step_rng(std::uint64_t seed, std::uint64_t step, std::size_t slot) {
  return Rng(Rng::mix(Rng::mix(seed) ^ (step * 1024 + slot)));
}

bool joint_design(const ModelConfig& cfg) { return cfg.context.design != FusionDesign::d; }

void finish(LossRecord& r) {
  r.total = r.rpn_cls + r.rpn_reg + r.cls + r.cls_reg + r.recon;
}

void accumulate(LossRecord& acc, const LossRecord& r, double w) {
  acc.rpn_cls += w * r.rpn_cls;
  acc.rpn_reg += w * r.rpn_reg;
  acc.cls += w * r.cls;
  acc.cls_reg += w * r.cls_reg;
  acc.recon += w * r.recon;
  acc.dedup += w * r.dedup;
  acc.total += w * r.total;
}

void clip_gradients(ParamStore& store, const std::vector<std::string>& prefixes, double max_norm) {
  if (max_norm <= 0) return;
  double sq = 0.0;
  for (const auto& p : prefixes)
    for (const auto& name : store.names(p))
      for (double g : store.get(name).grad.values()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm)
    for (const auto& p : prefixes) store.scale_grad(max_norm / norm, p);
}

// Shared optimizer loop: `image_loss` accumulates gradients for one image.
template <typename ImageLoss>
LossRecord optimizer_step(ParamStore& store, const TrainConfig& tc, const Dataset& data,
                          std::uint64_t step, const std::vector<std::string>& prefixes,
                          ImageLoss&& image_loss) {
  store.zero_grad();
  LossRecord mean;
  mean.step = step;
  mean.lr = tc.lr_at(step);
  const auto idx = batch_indices(data.records.size(), tc.batch, tc.seed, step);
  for (std::size_t b = 0; b < idx.size(); ++b) {
    Rng rng = step_rng(tc.seed, step, b);
    LossRecord r;
    try {
      r = image_loss(data.records[idx[b]], rng);
    } catch (const NumericalError& e) {
      throw NumericalError("training step " + std::to_string(step) + ": " + e.what());
    }
    accumulate(mean, r, 1.0 / idx.size());
  }
  if (!std::isfinite(mean.total))
    throw NumericalError("training step " + std::to_string(step) + ": non-finite loss");
  for (const auto& p : prefixes) store.scale_grad(1.0 / idx.size(), p);
  if (!store.grads_finite())
    throw NumericalError("training step " + std::to_string(step) + ": non-finite gradient");
  clip_gradients(store, prefixes, tc.clip_norm);
  for (const auto& p : prefixes) store.sgd_step(mean.lr, tc.momentum, p);
  project_prior(store);
  return mean;
}

template <typename StepFn>
TrainLog run_loop(ParamStore& store, const TrainConfig& tc, int steps, std::uint64_t start_step,
                  const TrainOptions& opts, const std::string& tag, StepFn&& step_fn) {
  TrainLog log;
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < steps; ++i) {
    const std::uint64_t step = start_step + i;
    LossRecord r = step_fn(step);
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log.records.push_back(r);
    if (opts.on_step) opts.on_step(r);
    const std::uint64_t done = step + 1;
    if (!opts.out_dir.empty() && tc.checkpoint_every > 0 && done % tc.checkpoint_every == 0) {
      Checkpoint ck{opts.config_digest, done, store};
      std::filesystem::create_directories(opts.out_dir);
      save_checkpoint(opts.out_dir / (tag + "_step" + std::to_string(done) + ".ckpt"), ck);
    }
  }
  return log;
}

}  // namespace

void TrainConfig::validate(bool smn_stage) const {
  auto fail = [](const std::string& m) { throw ConfigError("train." + m); };
  if (steps <= 0) fail("steps: must be > 0");
  if (batch <= 0) fail("batch: must be > 0");
  if (!(lr >= 0)) fail("lr: must be >= 0");
  if (!(momentum >= 0 && momentum < 1)) fail("momentum: must be in [0, 1)");
  if (rpn_sample <= 0 || roi_sample <= 0) fail("rpn_sample/roi_sample: must be > 0");
  auto check = [&](const SampleRatios& r, const std::string& n) {
    if (smn_stage && (r.positive <= 0 || r.flipped <= 0 || r.negative <= 0))
      fail(n + ": ratios must be positive integers");
    if (r.positive < 0 || r.flipped < 0 || r.negative < 0 || r.positive + r.negative <= 0)
      fail(n + ": bad ratios");
  };
  check(rpn_ratios, "rpn_ratios");
  check(roi_ratios, "roi_ratios");
  if (smn_stage && unroll < 1) fail("unroll: must be >= 1");
  int last = 0;
  for (const auto& s : curriculum) {
    if (s.unroll < last) fail("curriculum: unroll counts must be non-decreasing");
    if (s.steps <= 0 || s.unroll < 1) fail("curriculum: stages need unroll >= 1 and steps > 0");
    last = s.unroll;
  }
}

double TrainConfig::lr_at(std::uint64_t step) const {
  return static_cast<std::int64_t>(step) < lr_drop_step ? lr : lr * lr_drop;
}

void TrainLog::write_csv(std::ostream& out) const {
  const auto old = out.precision(std::numeric_limits<double>::max_digits10);
  out << "step,lr,rpn_cls,rpn_reg,cls,cls_reg,recon,dedup,total,wall_s\n";
  for (const auto& r : records)
    out << r.step << ',' << r.lr << ',' << r.rpn_cls << ',' << r.rpn_reg << ',' << r.cls << ','
        << r.cls_reg << ',' << r.recon << ',' << r.dedup << ',' << r.total << ',' << r.seconds
        << '\n';
  out.precision(old);
}

std::vector<std::size_t> batch_indices(std::size_t n, int batch, std::uint64_t seed,
                                       std::uint64_t step) {
  if (n == 0) throw ValueError("training: dataset is empty");
  std::vector<std::size_t> out;
  std::uint64_t cached_epoch = ~std::uint64_t{0};
  std::vector<std::size_t> perm(n);
  for (int b = 0; b < batch; ++b) {
    const std::uint64_t pos = step * batch + b;
    const std::uint64_t epoch = pos / n;
    if (epoch != cached_epoch) {
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      Rng rng(Rng::mix(seed ^ Rng::mix(epoch + 0x51)));
      rng.shuffle(perm);
      cached_epoch = epoch;
    }
    out.push_back(perm[pos % n]);
  }
  return out;
}

std::vector<std::string> smn_prefixes() { return {"ctx/", "mem/", "rec/"}; }

LossRecord base_image_loss(ParamStore& store, const ModelConfig& cfg, const TrainConfig& tc,
                           const SceneRecord& rec, Rng& rng, bool backprop) {
  const DetectorConfig& det = cfg.detector;
  Tape tape;
  Bindings b(tape, store);
  ImageContext img = encode_image(b, cfg, rec.image, true);
  const std::vector<Instance>& gts = rec.instances;
  std::vector<Var> terms;
  LossRecord out;

  const AnchorSet train = training_anchors(
      build_anchors(img.features.shape()[0], img.features.shape()[1], det.anchor_scales,
                    det.anchor_ratios, det.stride),
      img.image_h, img.image_w);
  const RegionTargets at = label_regions(train.boxes, gts, {}, rpn_rule(det));
  const Sample as = sample_regions(at, tc.rpn_ratios, tc.rpn_sample, rng);
  add_rpn_losses(img.base_rpn.logits, img.base_rpn.deltas, train, at, as, gts, det,
                 tc.rpn_cls_weight, tc.rpn_reg_weight, terms, out.rpn_cls, out.rpn_reg);

  const std::vector<RoI> rois = with_ground_truth(
      propose(img.base_rpn.logits.value(), img.base_rpn.deltas.value(), img.anchors, det,
              ProposalMode::nms_top_k, img.image_h, img.image_w),
      gts);
  const RegionTargets rt = label_regions(boxes_of(rois), gts, {}, roi_rule(det));
  const Sample rs = sample_regions(rt, tc.roi_ratios, tc.roi_sample, rng);
  const std::vector<int> rows = rs.all();
  if (!rows.empty()) {
    ClsOutput cls = classify_rois(b, det, img.features, pick(rois, rows), true);
    add_cls_losses(cls.logits, cls.deltas, rois, rows, rt, gts, det, tc.cls_weight,
                   tc.cls_reg_weight, terms, out.cls, out.cls_reg, nullptr);
  }
  finish(out);
  if (backprop && !terms.empty()) tape.backward(add_n(terms));
  return out;
}

TrainLog train_base(ParamStore& store, const ModelConfig& cfg, const Dataset& data,
                    const TrainConfig& tc, std::uint64_t start_step, const TrainOptions& opts) {
  tc.validate(false);
  return run_loop(store, tc, tc.steps, start_step, opts, "base", [&](std::uint64_t step) {
    return optimizer_step(store, tc, data, step, {"base/"},
                          [&](const SceneRecord& rec, Rng& rng) {
                            return base_image_loss(store, cfg, tc, rec, rng, true);
                          });
  });
}

LossRecord smn_image_loss(ParamStore& store, const ModelConfig& cfg, const TrainConfig& tc,
                          const SceneRecord& rec, int unroll, Rng& rng, bool backprop) {
  const DetectorConfig& det = cfg.detector;
  const bool train_base = joint_design(cfg);
  Tape tape;
  Bindings b(tape, store);
  ImageContext img = encode_image(b, cfg, rec.image, train_base);
  const int fh = img.features.shape()[0], fw = img.features.shape()[1];
  const AnchorSet train = training_anchors(
      build_anchors(fh, fw, det.anchor_scales, det.anchor_ratios, det.stride), img.image_h,
      img.image_w);
  const std::vector<Instance>& gts = rec.instances;
  MemoryState memory = init_memory(b("mem/prior", true), fh, fw);
  std::vector<Detection> detected;
  std::vector<Var> terms;
  LossRecord out;
  int active = 0;  // iterations that carry a loss

  for (int n = 0; n < unroll; ++n) {
    RpnStep rpn =
        rpn_step(b, cfg, ModelKind::smn, img, &memory, ProposalMode::nms_top_k, true, train_base);
    const std::vector<bool> retired = retired_mask(gts, detected);
    const std::vector<RoI> rois = with_ground_truth(rpn.proposals, gts);
    const RegionTargets rt = label_regions(boxes_of(rois), gts, retired, roi_rule(det));
    const Sample rs = sample_regions(rt, tc.roi_ratios, tc.roi_sample, rng);
    const std::vector<int> rows = rs.all();
    if (rows.empty()) break;
    const std::vector<RoI> sampled = pick(rois, rows);
    ClsStep cls = cls_step(b, cfg, ModelKind::smn, img, rpn, sampled, true, train_base);

    if (rpn.mconv.valid()) {
      ++active;
      const RegionTargets at = label_regions(train.boxes, gts, retired, rpn_rule(det));
      const Sample as = sample_regions(at, tc.rpn_ratios, tc.rpn_sample, rng);
      add_rpn_losses(rpn.logits.fused, rpn.deltas.fused, train, at, as, gts, det,
                     tc.rpn_cls_weight, tc.rpn_reg_weight, terms, out.rpn_cls, out.rpn_reg);
      add_cls_losses(cls.logits.fused, cls.deltas.fused, rois, rows, rt, gts, det, tc.cls_weight,
                     tc.cls_reg_weight, terms, out.cls, out.cls_reg, &out.dedup);
      if (!detected.empty() && cfg.context.recon_weight > 0) {
        // Reconstruction: the stored detections are the only targets.
        const std::vector<Instance> stored = as_instances(detected);
        ReconstructionOutput ro = reconstruction_heads(b, det, rpn.mconv, sampled, true);
        const RegionTargets sa = label_regions(train.boxes, stored, {}, rpn_rule(det));
        const Sample ss = sample_regions(sa, {1, 0, 1}, tc.rpn_sample, rng);
        double rc = 0, rr = 0;
        std::vector<Var> rterms;
        add_rpn_losses(ro.rpn.logits, ro.rpn.deltas, train, sa, ss, stored, det, 1.0, 1.0,
                       rterms, rc, rr);
        const RegionTargets sr = label_regions(boxes_of(sampled), stored, {}, roi_rule(det));
        std::vector<int> all(sampled.size());
        std::iota(all.begin(), all.end(), 0);
        add_cls_losses(ro.cls.logits, ro.cls.deltas, sampled, all, sr, stored, det, 1.0, 1.0,
                       rterms, rc, rr, nullptr);
        Var rl = scale(add_n(rterms), cfg.context.recon_weight);
        out.recon += rl.value()[0];
        terms.push_back(rl);
      }
    }
    if (n + 1 == unroll) break;

    // Model-driven selection over the sampled RoIs, then the memory write.
    const Tensor probs = softmax_rows(cls.logits.fused.value());
    const int row = select_next(sampled, probs);
    const int k = det.num_classes + 1;
    std::span<const double> prow(probs.data() + static_cast<std::size_t>(row) * k, k);
    const Tensor& dv = cls.deltas.fused.value();
    std::span<const double> drow(dv.data() + static_cast<std::size_t>(row) * 4 * det.num_classes,
                                 4 * det.num_classes);
    const BoundingBox box = memory_write_box(sampled[row], prow, drow, det, img.image_h,
                                             img.image_w);
    const int best = static_cast<int>(std::max_element(prow.begin(), prow.end()) - prow.begin());
    if (best > 0) detected.push_back({box, best - 1, prow[best], n});
    const int rr = row;
    Var scores = softmax(reshape(gather_rows(cls.logits.fused, std::span<const int>(&rr, 1)), {k}));
    memory = memory_update(b, cfg.memory, memory, box, det.stride, img.features, scores, true);
  }
  // Mean over the loss-carrying iterations, so curriculum stages of different
  // length train at comparable gradient scales.
  if (active > 1) {
    const double k = 1.0 / active;
    for (double* v : {&out.rpn_cls, &out.rpn_reg, &out.cls, &out.cls_reg, &out.recon, &out.dedup})
      *v *= k;
  }
  finish(out);
  if (backprop && !terms.empty())
    tape.backward(scale(add_n(terms), 1.0 / std::max(active, 1)));
  return out;
}

LossRecord smn_train_step(ParamStore& store, const ModelConfig& cfg, const TrainConfig& tc,
                          const Dataset& data, std::uint64_t step, int unroll) {
  std::vector<std::string> prefixes = smn_prefixes();
  if (joint_design(cfg)) prefixes.push_back("base/");
  return optimizer_step(store, tc, data, step, prefixes, [&](const SceneRecord& rec, Rng& rng) {
    return smn_image_loss(store, cfg, tc, rec, unroll, rng, true);
  });
}

TrainLog train_smn(ParamStore& store, const ModelConfig& cfg, const Dataset& data,
                   const TrainConfig& tc, int unroll, int steps, std::uint64_t start_step,
                   const TrainOptions& opts) {
  tc.validate(true);
  return run_loop(store, tc, steps, start_step, opts, "smn", [&](std::uint64_t step) {
    return smn_train_step(store, cfg, tc, data, step, unroll);
  });
}

TrainLog curriculum_train(ParamStore& store, const ModelConfig& cfg, const Dataset& data,
                          const TrainConfig& tc, const std::vector<CurriculumStage>& schedule,
                          std::uint64_t start_step, const TrainOptions& opts) {
  TrainConfig checked = tc;
  checked.curriculum = schedule;
  checked.validate(true);
  TrainLog log;
  std::uint64_t step = start_step;
  for (const auto& stage : schedule) {
    TrainLog part = train_smn(store, cfg, data, tc, stage.unroll, stage.steps, step, opts);
    log.records.insert(log.records.end(), part.records.begin(), part.records.end());
    step += stage.steps;
    if (!opts.out_dir.empty()) {
      Checkpoint ck{opts.config_digest, step, store};
      save_checkpoint(opts.out_dir / ("smn_n" + std::to_string(stage.unroll) + ".ckpt"), ck);
    }
  }
  return log;
}

TrainLog train_mlp(ParamStore& store, const ModelConfig& cfg, const Dataset& data,
                   const TrainConfig& tc, std::uint64_t start_step, const TrainOptions& opts) {
  tc.validate(false);
  const DetectorConfig& det = cfg.detector;
  auto image_loss = [&](const SceneRecord& rec, Rng& rng) {
    Tape tape;
    Bindings b(tape, store);
    ImageContext img = encode_image(b, cfg, rec.image, false);
    const std::vector<Instance>& gts = rec.instances;
    std::vector<Var> terms;
    LossRecord out;
    RpnStep rpn = rpn_step(b, cfg, ModelKind::mlp, img, nullptr, ProposalMode::nms_top_k, true,
                           false);
    const AnchorSet train = training_anchors(
        build_anchors(img.features.shape()[0], img.features.shape()[1], det.anchor_scales,
                      det.anchor_ratios, det.stride),
        img.image_h, img.image_w);
    const RegionTargets at = label_regions(train.boxes, gts, {}, rpn_rule(det));
    const Sample as = sample_regions(at, tc.rpn_ratios, tc.rpn_sample, rng);
    add_rpn_losses(rpn.logits.fused, rpn.deltas.fused, train, at, as, gts, det,
                   tc.rpn_cls_weight, tc.rpn_reg_weight, terms, out.rpn_cls, out.rpn_reg);
    const std::vector<RoI> rois = with_ground_truth(rpn.proposals, gts);
    const RegionTargets rt = label_regions(boxes_of(rois), gts, {}, roi_rule(det));
    const Sample rs = sample_regions(rt, tc.roi_ratios, tc.roi_sample, rng);
    const std::vector<int> rows = rs.all();
    if (!rows.empty()) {
      ClsStep cls = cls_step(b, cfg, ModelKind::mlp, img, rpn, pick(rois, rows), true, false);
      add_cls_losses(cls.logits.fused, cls.deltas.fused, rois, rows, rt, gts, det, tc.cls_weight,
                     tc.cls_reg_weight, terms, out.cls, out.cls_reg, nullptr);
    }
    finish(out);
    if (!terms.empty()) tape.backward(add_n(terms));
    return out;
  };
  return run_loop(store, tc, tc.steps, start_step, opts, "mlp", [&](std::uint64_t step) {
    return optimizer_step(store, tc, data, step, {"mlp/"}, image_loss);
  });
}

}  // namespace smn
