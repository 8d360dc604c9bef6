// Acceptance run: one PASS/FAIL line per criterion, tolerances pinned below.
//
//   acceptance [--workdir DIR] [--only 1,4,...] [--expect-fail 8]
//
// Exit status is 0 when every criterion passes or is listed in --expect-fail.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "oracles.hpp"
#include "smn/config.hpp"
#include "smn/eval.hpp"
#include "smn/gradcheck.hpp"
#include "smn/ops.hpp"
#include "smn/pipeline.hpp"
#include "smn/rollout.hpp"

using namespace smn;
namespace fs = std::filesystem;

namespace {

// Pinned thresholds.
constexpr double kGradTolerance = 1e-4;
constexpr double kGradBudgetSeconds = 120.0;
constexpr int kGradSeeds = 20;
constexpr int kEquivalenceImages = 100;
constexpr int kIsolationSteps = 1000;
constexpr int kOracleInstances = 200;
// The anchor oracle derives width from area / ratio, the library from s / sqrt(r);
// the two agree to rounding only.
constexpr double kAnchorTolerance = 1e-9;
constexpr double kDedupFusedMax = 0.3;
constexpr double kDedupBaseMin = 0.5;
constexpr double kDedupSceneFraction = 0.9;
constexpr double kDedupBudgetSeconds = 20 * 60.0;
constexpr double kContextGain = 0.05;
constexpr double kContextBudgetSeconds = 30 * 60.0;
constexpr int kContextSeeds = 3;
constexpr double kEasyClassAp50 = 0.8;
constexpr double kWarmStartRatio = 2.0;

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void note(const char* fmt, auto... args) {
  std::fprintf(stderr, "# ");
  std::fprintf(stderr, fmt, args...);
  std::fprintf(stderr, "\n");
}

std::string fmt(const char* f, auto... args) {
  std::string out(std::snprintf(nullptr, 0, f, args...), '\0');
  std::snprintf(out.data(), out.size() + 1, f, args...);
  return out;
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

// ---------------------------------------------------------------------------
// Trained runs shared by several criteria.

struct Run {
  RunConfig cfg;
  Dataset train, test;
  StageResult base, smn, mlp;
  double seconds = 0;

  EvalResult eval(ModelKind kind, const Protocol& p) const {
    const ParamStore& params = kind == ModelKind::mlp ? mlp.params : smn.params;
    const auto dets = detect_all(params, cfg.model, kind, test.records, p);
    return evaluate(dets, ground_truth(test.records), cfg.model.detector.num_classes, cfg.eval);
  }
  const Protocol& protocol(const std::string& name) const {
    for (const auto& p : cfg.protocols)
      if (p.name == name) return p;
    throw std::runtime_error("no protocol " + name);
  }
};

Run run_pipeline(const RunConfig& cfg, const fs::path& ckpt_dir = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  Run r;
  r.cfg = cfg;
  r.train = generate_split(cfg, Split::train);
  r.test = generate_split(cfg, Split::test);
  auto opts = [&](ModelKind k) {
    TrainOptions o;
    if (!ckpt_dir.empty()) o.out_dir = ckpt_dir;
    o.config_digest = stage_digest(cfg, k);
    return o;
  };
  r.base = run_base_stage(cfg, r.train, opts(ModelKind::base));
  note("seed %llu: base trained (%.0fs)", static_cast<unsigned long long>(cfg.seed), seconds_since(t0));
  r.smn = run_memory_stage(cfg, ModelKind::smn, r.base.params, r.train, opts(ModelKind::smn));
  note("seed %llu: smn trained (%.0fs)", static_cast<unsigned long long>(cfg.seed), seconds_since(t0));
  r.mlp = run_memory_stage(cfg, ModelKind::mlp, r.base.params, r.train, opts(ModelKind::mlp));
  note("seed %llu: mlp trained (%.0fs)", static_cast<unsigned long long>(cfg.seed), seconds_since(t0));
  r.seconds = seconds_since(t0);
  return r;
}

RunConfig context_config(std::uint64_t seed) {
  RunConfig cfg = RunConfig::toy();
  cfg.seed = seed;
  cfg.validate();
  return cfg;
}

class Runs {
 public:
  const Run& seed(std::uint64_t s) {
    auto it = runs_.find(s);
    if (it == runs_.end()) it = runs_.emplace(s, run_pipeline(context_config(s))).first;
    return it->second;
  }

 private:
  std::map<std::uint64_t, Run> runs_;
};

// ---------------------------------------------------------------------------
// 1. Gradient suite.

Outcome gradient_suite_check() {
  const auto t0 = std::chrono::steady_clock::now();
  GradCheckOptions opt;
  opt.epsilon = 1e-3;
  opt.tolerance = kGradTolerance;
  const auto entries = run_gradient_suite(1, kGradSeeds, opt);
  const double secs = seconds_since(t0);
  const SuiteEntry* worst = &entries.front();
  int failed = 0;
  for (const auto& e : entries) {
    if (e.result.max_rel_error > worst->result.max_rel_error) worst = &e;
    failed += !e.result.passed(kGradTolerance);
  }
  return {failed == 0 && secs < kGradBudgetSeconds,
          fmt("%zu entries x %d seeds, %d over tolerance, worst %s %.2e, %.0fs", entries.size(),
              kGradSeeds, failed, worst->name.c_str(), worst->result.max_rel_error, secs)};
}

// ---------------------------------------------------------------------------
// 2. Iteration-0 equivalence with random weights and images.

Outcome iteration_zero_check() {
  const ModelConfig mc = RunConfig::toy().model;
  const SceneConfig sc = RunConfig::toy().scene;
  int mismatches = 0;
  for (int i = 0; i < kEquivalenceImages; ++i) {
    Rng rng(1000 + i);
    ParamStore store;
    init_model_params(store, mc, ModelKind::smn, rng);
    // Memory-side weights away from their near-zero init so the memory path is live.
    for (auto& [name, p] : store)
      if (!name.starts_with("base/"))
        for (double& v : p.value.values()) v = rng.uniform(-0.5, 0.5);
    Tensor image({sc.image_h, sc.image_w, 3});
    for (double& v : image.values()) v = rng.uniform();

    const BaseResult base = run_base(store, mc.detector, image, ProposalMode::nms_top_k);
    Tape tape;
    Bindings b(tape, std::as_const(store));
    const ImageContext ctx = encode_image(b, mc, image, false);
    const MemoryState m = init_memory(b("mem/prior", false), ctx.features.shape()[0], ctx.features.shape()[1]);
    const RpnStep rs = rpn_step(b, mc, ModelKind::smn, ctx, &m, ProposalMode::nms_top_k, false, false);
    const ClsStep cs = cls_step(b, mc, ModelKind::smn, ctx, rs, rs.proposals, false, false);
    bool same = rs.logits.fused.value() == base.rpn_logits && rs.proposals.size() == base.rois.size() &&
                cs.logits.fused.value() == base.cls_logits && cs.deltas.fused.value() == base.cls_deltas;
    for (std::size_t k = 0; same && k < base.rois.size(); ++k) same = rs.proposals[k].box == base.rois[k].box;

    RolloutConfig rc;
    rc.iterations = 1;
    const RolloutTrace t = detect_sequence(store, mc, image, rc);
    if (same && !t.iterations.empty()) {
      const auto& it = t.iterations[0];
      const int row = oracle::select(base.rois, base.probs);
      const int k = base.cls_logits.dim(1);
      const std::vector<double> want(base.cls_logits.data() + row * k, base.cls_logits.data() + (row + 1) * k);
      same = it.fused_logits == want && it.roi.box == base.rois[row].box;
    }
    mismatches += !same;
  }
  return {mismatches == 0, fmt("%d images, %d mismatches", kEquivalenceImages, mismatches)};
}

// ---------------------------------------------------------------------------
// 3. Base weights untouched by SMN training.

Outcome isolation_check(const fs::path& work) {
  RunConfig cfg = RunConfig::toy();
  cfg.train_scenes = 200;
  cfg.train_base.steps = 300;
  cfg.train_base.checkpoint_every = 0;
  cfg.train_smn.curriculum = {{2, kIsolationSteps}};
  cfg.train_smn.checkpoint_every = 0;
  const Dataset train = generate_split(cfg, Split::train);
  const StageResult base = run_base_stage(cfg, train);
  const fs::path path = work / "isolation_base.ckpt";
  save_checkpoint(path, {base_config_digest(cfg), 300, base.params});
  const std::uint64_t before = read_checkpoint(path).params.checksum("base/");
  const StageResult smn = run_memory_stage(cfg, ModelKind::smn, base.params, train);
  const std::uint64_t after = smn.params.checksum("base/");
  const std::uint64_t file_after = read_checkpoint(path).params.checksum("base/");
  const bool moved = smn.params.checksum("mem/") != base.params.checksum("mem/");
  return {before == after && before == file_after && moved,
          fmt("%zu SMN steps, base checksum %016llx -> %016llx, memory weights %s",
              smn.log.records.size(), static_cast<unsigned long long>(before),
              static_cast<unsigned long long>(after), moved ? "moved" : "did not move")};
}

// ---------------------------------------------------------------------------
// 4. Oracle equivalences.

BoundingBox random_box(Rng& rng, double extent) {
  const double x = rng.integer(0, static_cast<int>(extent)), y = rng.integer(0, static_cast<int>(extent));
  return {x, y, x + rng.integer(1, 12), y + rng.integer(1, 12)};
}

Outcome oracle_check() {
  Rng rng(4);
  int nms_bad = 0, select_bad = 0, anchor_bad = 0, eval_bad = 0;
  double eval_diff = 0;
  for (int t = 0; t < kOracleInstances; ++t) {
    const int n = rng.integer(0, 60);
    std::vector<BoundingBox> boxes;
    std::vector<double> scores;
    for (int i = 0; i < n; ++i) {
      boxes.push_back(random_box(rng, 24));
      scores.push_back(std::round(rng.uniform() * 10) / 10);
    }
    const double thr = rng.uniform(0.1, 0.9);
    const int cap = rng.integer(-1, 20);
    nms_bad += nms(boxes, scores, thr, cap) != oracle::nms(boxes, scores, thr, cap);

    const int r = rng.integer(1, 80);
    std::vector<RoI> rois(r);
    Tensor probs({r, 4});
    for (int i = 0; i < r; ++i) {
      rois[i].box = random_box(rng, 6);
      double s = 0;
      for (int c = 0; c < 4; ++c) s += probs[i * 4 + c] = rng.integer(1, 4);
      for (int c = 0; c < 4; ++c) probs[i * 4 + c] /= s;
    }
    select_bad += select_next(rois, probs) != oracle::select(rois, probs);

    const int h = rng.integer(1, 6), w = rng.integer(1, 6), stride = rng.integer(1, 8);
    std::vector<double> sc(rng.integer(1, 3)), ra(rng.integer(1, 3));
    for (auto& s : sc) s = rng.uniform(2, 20);
    for (auto& x : ra) x = rng.uniform(0.3, 3);
    const AnchorSet a = build_anchors(h, w, sc, ra, stride);
    bool anchors_ok = a.boxes.size() == static_cast<std::size_t>(h * w) * sc.size() * ra.size();
    for (std::size_t k = 0; anchors_ok && k < a.boxes.size(); ++k) {
      const BoundingBox o = oracle::anchor_at(static_cast<int>(k), w, sc, ra, stride);
      anchors_ok = a.slots[k] == static_cast<int>(k) &&
                   std::max({std::abs(o.x1 - a.boxes[k].x1), std::abs(o.y1 - a.boxes[k].y1),
                             std::abs(o.x2 - a.boxes[k].x2), std::abs(o.y2 - a.boxes[k].y2)}) <= kAnchorTolerance;
    }
    anchor_bad += !anchors_ok;

    const int images = rng.integer(1, 3), classes = rng.integer(1, 4);
    std::vector<std::vector<Detection>> dets(images);
    std::vector<std::vector<Instance>> gts(images);
    for (int i = 0; i < images; ++i) {
      for (int k = 0; k < 8; ++k) gts[i].push_back({rng.integer(0, classes - 1), random_box(rng, 30)});
      for (int k = 0; k < 20; ++k) {
        Detection d;
        const auto& g = gts[i][rng.integer(0, 7)];
        d.box = rng.uniform() < 0.5 ? BoundingBox{g.box.x1 + rng.integer(-1, 1), g.box.y1, g.box.x2, g.box.y2 + rng.integer(-1, 1)}
                                    : random_box(rng, 30);
        d.cls = rng.uniform() < 0.7 ? g.cls : rng.integer(0, classes - 1);
        d.score = rng.integer(1, 10) / 10.0;
        dets[i].push_back(d);
      }
    }
    EvalConfig ec;
    const EvalResult got = evaluate(dets, gts, classes, ec);
    const auto all = oracle::coco(dets, gts, classes, ec.iou_thresholds, 0, 1e300, ec.max_detections);
    const auto ar10 = oracle::coco(dets, gts, classes, ec.iou_thresholds, 0, 1e300, ec.ar_cap);
    const double d = std::max({std::abs(got.ap - all.ap), std::abs(got.ar - all.recall), std::abs(got.ar10 - ar10.recall)});
    eval_diff = std::max(eval_diff, d);
    eval_bad += d != 0.0;
  }
  const bool pass = nms_bad + select_bad + anchor_bad + eval_bad == 0;
  return {pass, fmt("%d instances each; mismatches nms %d, select %d, anchors %d, AP/AR %d (max diff %.1e)",
                    kOracleInstances, nms_bad, select_bad, anchor_bad, eval_bad, eval_diff)};
}

// ---------------------------------------------------------------------------
// 5. Learned de-duplication on single-class scenes.

double max_foreground_near(const std::vector<RoI>& rois, const Tensor& probs, const BoundingBox& target) {
  const int k = probs.dim(1);
  double best = 0.0;
  for (std::size_t r = 0; r < rois.size(); ++r) {
    if (iou(rois[r].box, target) < 0.5) continue;
    for (int c = 1; c < k; ++c) best = std::max(best, probs[r * k + c]);
  }
  return best;
}

Outcome dedup_check() {
  const auto t0 = std::chrono::steady_clock::now();
  RunConfig cfg = RunConfig::toy();
  cfg.seed = 5;
  cfg.scene.single_class_scenes = true;
  cfg.train_smn.curriculum = {{2, 2000}};
  cfg.validate();
  const Dataset train = generate_split(cfg, Split::train);
  const Dataset test = generate_split(cfg, Split::test);
  const StageResult base = run_base_stage(cfg, train);
  const StageResult smn = run_memory_stage(cfg, ModelKind::smn, base.params, train);
  note("de-dup models trained (%.0fs)", seconds_since(t0));

  const ModelConfig& mc = cfg.model;
  int eligible = 0, suppressed = 0, base_high = 0, both = 0, trace_mismatch = 0;
  for (const auto& rec : test.records) {
    Tape tape;
    Bindings b(tape, std::as_const(smn.params));
    const ImageContext ctx = encode_image(b, mc, rec.image, false);
    MemoryState m = init_memory(b("mem/prior", false), ctx.features.shape()[0], ctx.features.shape()[1]);
    const RpnStep r0 = rpn_step(b, mc, ModelKind::smn, ctx, &m, ProposalMode::nms_top_k, false, false);
    if (r0.proposals.empty()) continue;
    const ClsStep c0 = cls_step(b, mc, ModelKind::smn, ctx, r0, r0.proposals, false, false);
    const Tensor p0 = softmax_rows(c0.logits.fused.value());
    const Tensor& d0 = c0.deltas.fused.value();
    const int k = p0.dim(1), row = select_next(r0.proposals, p0);
    const std::vector<double> prow(p0.data() + row * k, p0.data() + (row + 1) * k);
    const std::vector<double> drow(d0.data() + row * d0.dim(1), d0.data() + (row + 1) * d0.dim(1));
    const auto det = emit(r0.proposals[row], prow, drow, mc.detector, Emission::hardmax, 0.0, 0, ctx.image_h, ctx.image_w);

    // The first detection is correct when it hits an instance of its class.
    const Instance* hit = nullptr;
    if (!det.empty())
      for (const auto& g : rec.instances)
        if (g.cls == det[0].cls && iou(g.box, det[0].box) >= 0.5 && (!hit || iou(g.box, det[0].box) > iou(hit->box, det[0].box)))
          hit = &g;

    const BoundingBox wbox = memory_write_box(r0.proposals[row], prow, drow, mc.detector, ctx.image_h, ctx.image_w);
    m = memory_update(b, mc.memory, m, wbox, mc.detector.stride, ctx.features,
                      tape.constant(Tensor({k}, prow)), false);
    RolloutConfig rc;
    rc.iterations = 1;
    trace_mismatch += detect_sequence(smn.params, mc, rec.image, rc).iterations[0].memory_digest != digest(m.grid.value());
    if (!hit) continue;
    ++eligible;

    const double base_score = max_foreground_near(r0.proposals, softmax_rows(c0.logits.base.value()), hit->box);
    const RpnStep r1 = rpn_step(b, mc, ModelKind::smn, ctx, &m, ProposalMode::nms_top_k, false, false);
    double fused = 0.0;
    if (!r1.proposals.empty()) {
      const ClsStep c1 = cls_step(b, mc, ModelKind::smn, ctx, r1, r1.proposals, false, false);
      fused = max_foreground_near(r1.proposals, softmax_rows(c1.logits.fused.value()), hit->box);
    }
    suppressed += fused < kDedupFusedMax;
    base_high += base_score > kDedupBaseMin;
    both += fused < kDedupFusedMax && base_score > kDedupBaseMin;
  }
  const double secs = seconds_since(t0);
  const double frac = eligible ? static_cast<double>(both) / eligible : 0.0;
  return {eligible > 0 && frac >= kDedupSceneFraction && secs < kDedupBudgetSeconds && trace_mismatch == 0,
          fmt("%d/%zu scenes with a correct first detection; fused < %.1f in %d, base > %.1f in %d, both in %.1f%%; %.0fs",
              eligible, test.records.size(), kDedupFusedMax, suppressed, kDedupBaseMin, base_high, 100 * frac, secs)};
}

// ---------------------------------------------------------------------------
// 6. Context gain on the dependent class.

struct ContextSeed {
  std::uint64_t seed = 0;
  double base = 0, mlp = 0, smn = 0;
};

Outcome context_check(Runs& runs, std::vector<std::string>& info) {
  // Train first so the budget counts each run once, whether or not it was cached.
  double train_secs = 0;
  for (int s = 1; s <= kContextSeeds; ++s) train_secs += runs.seed(s).seconds;
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<ContextSeed> seeds;
  for (int s = 1; s <= kContextSeeds; ++s) {
    const Run& r = runs.seed(s);
    const int hard = r.cfg.scene.rules.front().dependent;
    const Protocol& p = r.protocol("n10");
    ContextSeed cs{static_cast<std::uint64_t>(s)};
    cs.base = r.eval(ModelKind::base, p).class_ap50[hard];
    cs.mlp = r.eval(ModelKind::mlp, p).class_ap50[hard];
    const EvalResult smn = r.eval(ModelKind::smn, p);
    cs.smn = smn.class_ap50[hard];
    seeds.push_back(cs);
    note("seed %d: hard-class AP50 base %.3f mlp %.3f smn %.3f", s, cs.base, cs.mlp, cs.smn);
  }
  const double secs = seconds_since(t0);
  std::vector<ContextSeed> sorted = seeds;
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.smn - a.mlp < b.smn - b.mlp; });
  const ContextSeed& med = sorted[sorted.size() / 2];
  std::string per;
  for (const auto& s : seeds)
    per += fmt(" seed %llu base %.3f mlp %.3f smn %.3f;", static_cast<unsigned long long>(s.seed), s.base, s.mlp, s.smn);

  // Informational floors on the seed-1 run.
  const Run& r1 = runs.seed(1);
  const EvalResult base1 = r1.eval(ModelKind::base, r1.protocol("n10"));
  const int hard = r1.cfg.scene.rules.front().dependent;
  double easy_min = 1.0;
  for (int c = 0; c < static_cast<int>(base1.class_ap50.size()); ++c)
    if (c != hard) easy_min = std::min(easy_min, base1.class_ap50[c]);
  info.push_back(fmt("info: base easy-class AP50 min %.3f (floor %.2f): %s", easy_min, kEasyClassAp50,
                     easy_min >= kEasyClassAp50 ? "ok" : "below"));
  const auto& sched = r1.cfg.train_smn.curriculum;
  if (sched.size() >= 2) {
    const auto& rec = r1.smn.log.records;
    const std::size_t end0 = sched[0].steps, w = std::min<std::size_t>(50, end0);
    double last = 0, first = 0;
    for (std::size_t i = end0 - w; i < end0; ++i) last += rec[i].total / w;
    for (std::size_t i = end0; i < end0 + w; ++i) first += rec[i].total / w;
    info.push_back(fmt("info: curriculum N=%d start loss %.3f vs N=%d end %.3f (ratio %.2f, limit %.1f): %s",
                       sched[1].unroll, first, sched[0].unroll, last, first / last, kWarmStartRatio,
                       first <= kWarmStartRatio * last ? "ok" : "over"));
  }

  const bool pass = med.smn - med.mlp >= kContextGain && med.mlp >= med.base && train_secs + secs < kContextBudgetSeconds;
  return {pass, fmt("median seed %llu: smn - mlp %+.3f (need %+.2f), mlp - base %+.3f;%s %.0fs",
                    static_cast<unsigned long long>(med.seed), med.smn - med.mlp, kContextGain, med.mlp - med.base,
                    per.c_str(), train_secs + secs)};
}

// ---------------------------------------------------------------------------
// 7. SoftMax vs HardMax.

Outcome emission_check(Runs& runs) {
  DetectorConfig det;
  det.num_classes = 3;
  const RoI roi{{10, 10, 30, 30}};
  // Two foreground classes 0.05 apart.
  const std::vector<double> probs{0.25, 0.40, 0.35, 0.0};
  const std::vector<double> deltas(12, 0.0);
  const auto soft = emit(roi, probs, deltas, det, Emission::softmax, 0.05, 0, 64, 64);
  const auto hard = emit(roi, probs, deltas, det, Emission::hardmax, 0.05, 0, 64, 64);
  std::set<int> soft_classes;
  for (const auto& d : soft) soft_classes.insert(d.cls);
  const bool fixture = soft_classes == std::set<int>{0, 1} && hard.size() == 1 && hard[0].cls == 0;

  const Run& r = runs.seed(1);
  const double ar_soft = r.eval(ModelKind::smn, r.protocol("n10")).ar10;
  const double ar_hard = r.eval(ModelKind::smn, r.protocol("n10-hardmax")).ar10;
  return {fixture && ar_soft >= ar_hard,
          fmt("fixture softmax classes %zu, hardmax %zu; held-out AR10 softmax %.4f vs hardmax %.4f",
              soft_classes.size(), hard.size(), ar_soft, ar_hard)};
}

// ---------------------------------------------------------------------------
// 8. Non-aggressive proposals.

Outcome proposals_check(Runs& runs) {
  const Run& r = runs.seed(1);
  const EvalResult topk = r.eval(ModelKind::smn, r.protocol("n10-topk"));
  const EvalResult nmsk = r.eval(ModelKind::smn, r.protocol("n10"));
  return {topk.ap >= nmsk.ap, fmt("SMN AP top-K' %.4f vs NMS-k %.4f; AR10 %.4f vs %.4f", topk.ap, nmsk.ap,
                                  topk.ar10, nmsk.ar10)};
}

// ---------------------------------------------------------------------------
// 9. Hybrid with N2 = 0.

Outcome hybrid_check(Runs& runs) {
  const Run& r = runs.seed(1);
  Protocol hybrid{"hybrid-n10-only", 10};
  hybrid.n1 = 10;
  const Protocol base{"base-n10", 10};
  const auto gts = ground_truth(r.test.records);
  const int c = r.cfg.model.detector.num_classes;
  const auto hd = detect_all(r.smn.params, r.cfg.model, ModelKind::smn, r.test.records, hybrid);
  const auto bd = detect_all(r.smn.params, r.cfg.model, ModelKind::base, r.test.records, base);
  int differing = 0;
  for (std::size_t i = 0; i < hd.size(); ++i) {
    bool same = hd[i].size() == bd[i].size();
    for (std::size_t k = 0; same && k < hd[i].size(); ++k)
      same = hd[i][k].box == bd[i][k].box && hd[i][k].cls == bd[i][k].cls && hd[i][k].score == bd[i][k].score;
    differing += !same;
  }
  const EvalResult eh = evaluate(hd, gts, c, r.cfg.eval), eb = evaluate(bd, gts, c, r.cfg.eval);
  return {eh == eb && differing == 0,
          fmt("N1=10, N2=0: AP %.4f vs base %.4f, AR10 %.4f vs %.4f, %d images with differing detections",
              eh.ap, eb.ap, eh.ar10, eb.ar10, differing)};
}

// ---------------------------------------------------------------------------
// 10. Determinism of a reduced full pipeline.

RunConfig determinism_config() {
  RunConfig cfg = RunConfig::toy();
  cfg.seed = 11;
  cfg.train_scenes = 200;
  cfg.test_scenes = 50;
  cfg.train_base.steps = 300;
  cfg.train_base.lr_drop_step = 200;
  cfg.train_base.checkpoint_every = 100;
  cfg.train_smn.curriculum = {{2, 100}, {4, 50}};
  cfg.train_smn.checkpoint_every = 50;
  cfg.train_mlp.steps = 100;
  cfg.train_mlp.checkpoint_every = 50;
  cfg.validate();
  return cfg;
}

std::vector<ComparisonRow> pipeline_rows(const fs::path& dir) {
  const RunConfig cfg = determinism_config();
  fs::remove_all(dir);
  const Run r = run_pipeline(cfg, dir / "ckpt");
  save_checkpoint(dir / "base.ckpt", {stage_digest(cfg, ModelKind::base), 0, r.base.params});
  save_checkpoint(dir / "smn.ckpt", {stage_digest(cfg, ModelKind::smn), 0, r.smn.params});
  save_checkpoint(dir / "mlp.ckpt", {stage_digest(cfg, ModelKind::mlp), 0, r.mlp.params});
  return compare({{"base", ModelKind::base, dir / "base.ckpt"},
                  {"mlp", ModelKind::mlp, dir / "mlp.ckpt"},
                  {"smn", ModelKind::smn, dir / "smn.ckpt"}},
                 cfg.model, r.test.records, cfg.protocols, cfg.eval);
}

Outcome determinism_check(const fs::path& work) {
  const auto a = pipeline_rows(work / "det_a");
  const auto b = pipeline_rows(work / "det_b");
  int differing = a.size() == b.size() ? 0 : 1;
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i)
    differing += a[i].method != b[i].method || a[i].protocol != b[i].protocol || !(a[i].result == b[i].result);
  int ckpt_differing = 0;
  for (const auto& dir : fs::directory_iterator(work / "det_a" / "ckpt")) {
    const fs::path other = work / "det_b" / "ckpt" / dir.path().filename();
    ckpt_differing += !fs::exists(other) || read_checkpoint(dir.path()).params.checksum() !=
                                                read_checkpoint(other).params.checksum();
  }
  return {differing == 0 && ckpt_differing == 0,
          fmt("%zu metric rows, %d differ; intermediate checkpoints differing %d", a.size(), differing, ckpt_differing)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string workdir = "acceptance_work";
  std::vector<int> only, expect_fail;
  app.add_option("--workdir", workdir, "Scratch directory");
  app.add_option("--only", only, "Run only these criteria")->delimiter(',');
  app.add_option("--expect-fail", expect_fail, "Criteria known to fail at this scale")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  const fs::path work = workdir;
  fs::create_directories(work);

  Runs runs;
  std::vector<std::string> info;
  const std::vector<std::pair<int, std::function<Outcome()>>> criteria{
      {1, [] { return gradient_suite_check(); }},
      {2, [] { return iteration_zero_check(); }},
      {3, [&] { return isolation_check(work); }},
      {4, [] { return oracle_check(); }},
      {5, [] { return dedup_check(); }},
      {6, [&] { return context_check(runs, info); }},
      {7, [&] { return emission_check(runs); }},
      {8, [&] { return proposals_check(runs); }},
      {9, [&] { return hybrid_check(runs); }},
      {10, [&] { return determinism_check(work); }},
  };
  // ctest hides the output of passing tests, so the lines are also kept in the workdir.
  std::ofstream summary(work / "summary.txt");
  auto emit_line = [&](const std::string& line) {
    std::printf("%s\n", line.c_str());
    std::fflush(stdout);
    summary << line << '\n' << std::flush;
  };
  int unexpected = 0;
  for (const auto& [id, fn] : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    const bool expected = std::find(expect_fail.begin(), expect_fail.end(), id) != expect_fail.end();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    emit_line(fmt("criterion %2d: %s  %s%s", id, o.pass ? "PASS" : "FAIL", o.detail.c_str(),
                  !o.pass && expected ? "  [expected at this scale]" : ""));
    unexpected += !o.pass && !expected;
  }
  for (const auto& line : info) emit_line(line);
  return unexpected == 0 ? 0 : 1;
}
