#include "smn/rollout.hpp"

#include <algorithm>
#include <ostream>

#include "json.hpp"
#include "smn/error.hpp"
#include "smn/ops.hpp"

namespace smn {

namespace {

std::vector<double> row_of(const Tensor& t, int row) {
  const int cols = t.dim(1);
  return {t.data() + static_cast<std::size_t>(row) * cols,
          t.data() + static_cast<std::size_t>(row + 1) * cols};
}

double best_foreground(std::span<const double> p) {
  return *std::max_element(p.begin() + 1, p.end());
}

int argmax(std::span<const double> p) {
  return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

// Iteration loop shared by detect_sequence and the fused phase of hybrid_detect.
class Runner {
 public:
  Runner(const ParamStore& params, const ModelConfig& cfg, const Tensor& image,
         const RolloutConfig& rc)
      : cfg_(cfg), rc_(rc), b_(tape_, params) {
    img_ = encode_image(b_, cfg, image, false);
    memory_ = init_memory(b_("mem/prior", false), img_.features.shape()[0],
                          img_.features.shape()[1]);
  }

  void write(const BoundingBox& box, const std::vector<double>& probs) {
    Var scores = tape_.constant(Tensor({static_cast<int>(probs.size())}, probs));
    memory_ = memory_update(b_, cfg_.memory, memory_, box, cfg_.detector.stride, img_.features,
                            scores, false);
  }

  // Returns false when no proposal survives.
  bool fused_iteration(int index, const ScorePerturbation& perturb, IterationRecord& rec) {
    const DetectorConfig& det = cfg_.detector;
    RpnStep rpn = rpn_step(b_, cfg_, ModelKind::smn, img_, &memory_, rc_.proposals, false, false);
    if (rpn.proposals.empty()) return false;
    ClsStep cls = cls_step(b_, cfg_, ModelKind::smn, img_, rpn, rpn.proposals, false, false);
    const Tensor probs = softmax_rows(cls.logits.fused.value());
    const Tensor& deltas = cls.deltas.fused.value();
    const int row = select_next(rpn.proposals, probs);
    rec.index = index;
    rec.fused = true;
    rec.roi = rpn.proposals[row];
    rec.probs = row_of(probs, row);
    rec.selected_class = argmax(rec.probs);
    rec.base_logits = row_of(cls.logits.base.value(), row);
    if (cls.logits.memory.valid()) rec.memory_logits = row_of(cls.logits.memory.value(), row);
    rec.fused_logits = row_of(cls.logits.fused.value(), row);
    const std::vector<double> drow = row_of(deltas, row);
    if (best_foreground(rec.probs) >= rc_.selection_threshold) {
      rec.emitted = emit(rec.roi, rec.probs, drow, det, rc_.emission, rc_.emission_floor, index,
                         img_.image_h, img_.image_w);
      for (auto& d : rec.emitted) d.roi = row;
    }
    rec.memory_box = memory_write_box(rec.roi, rec.probs, drow, det, img_.image_h, img_.image_w);
    std::vector<double> feed = rec.probs;
    if (perturb) perturb(index, feed);
    write(rec.memory_box, feed);
    rec.memory_digest = digest(memory_.grid.value());
    return true;
  }

  Tape tape_;
  const ModelConfig& cfg_;
  const RolloutConfig& rc_;
  Bindings b_;
  ImageContext img_;
  MemoryState memory_;
};

}  // namespace

void RolloutConfig::validate() const {
  if (iterations < 0) throw ConfigError("rollout.iterations: must be >= 0");
  if (n1 < 0 || n2 < 0) throw ConfigError("rollout.n1/n2: must be >= 0");
  if (!(emission_floor >= 0 && emission_floor <= 1))
    throw ConfigError("rollout.emission_floor: must be in [0, 1]");
}

std::string to_string(Emission e) { return e == Emission::softmax ? "softmax" : "hardmax"; }

Emission emission_from_string(const std::string& s) {
  if (s == "softmax") return Emission::softmax;
  if (s == "hardmax") return Emission::hardmax;
  throw ConfigError("rollout.emission: expected softmax or hardmax, got '" + s + "'");
}

std::string to_string(ProposalMode m) {
  return m == ProposalMode::nms_top_k ? "nms-top-k" : "non-aggressive";
}

ProposalMode proposal_mode_from_string(const std::string& s) {
  if (s == "nms-top-k") return ProposalMode::nms_top_k;
  if (s == "non-aggressive") return ProposalMode::non_aggressive;
  throw ConfigError("proposal mode: expected nms-top-k or non-aggressive, got '" + s + "'");
}

int select_next(std::span<const RoI> rois, const Tensor& probs) {
  if (rois.empty()) throw ValueError("select_next: empty candidate set");
  const int k = probs.dim(1);
  int best = 0;
  double best_score = -1.0;
  for (int r = 0; r < static_cast<int>(rois.size()); ++r) {
    const double s = best_foreground({probs.data() + static_cast<std::size_t>(r) * k,
                                      static_cast<std::size_t>(k)});
    if (s > best_score || (s == best_score && rois[r].box < rois[best].box)) {
      best = r;
      best_score = s;
    }
  }
  return best;
}

std::vector<Detection> emit(const RoI& roi, std::span<const double> probs,
                            std::span<const double> deltas, const DetectorConfig& cfg,
                            Emission mode, double floor, int iteration, int image_h,
                            int image_w) {
  const Tensor drow({1, static_cast<int>(deltas.size())},
                    std::vector<double>(deltas.begin(), deltas.end()));
  std::vector<Detection> out;
  auto add_class = [&](int c) {
    const BoundingBox box = regressed_box(roi, drow, 0, c - 1, cfg, image_h, image_w);
    if (box.area() > 0.0) out.push_back({box, c - 1, probs[c], iteration});
  };
  if (mode == Emission::hardmax) {
    const int c = argmax(probs);
    if (c > 0) add_class(c);
    return out;
  }
  for (int c = 1; c < static_cast<int>(probs.size()); ++c)
    if (probs[c] >= floor) add_class(c);
  std::stable_sort(out.begin(), out.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  return out;
}

BoundingBox memory_write_box(const RoI& roi, std::span<const double> probs,
                             std::span<const double> deltas, const DetectorConfig& cfg,
                             int image_h, int image_w) {
  const int c = argmax(probs);
  if (c == 0) return roi.box;
  const Tensor drow({1, static_cast<int>(deltas.size())},
                    std::vector<double>(deltas.begin(), deltas.end()));
  const BoundingBox box = regressed_box(roi, drow, 0, c - 1, cfg, image_h, image_w);
  return box.area() > 0.0 ? box : roi.box;
}

std::vector<Detection> RolloutTrace::detections() const {
  std::vector<Detection> out;
  for (const auto& it : iterations) out.insert(out.end(), it.emitted.begin(), it.emitted.end());
  std::stable_sort(out.begin(), out.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  return out;
}

RolloutTrace detect_sequence(const ParamStore& params, const ModelConfig& cfg,
                             const Tensor& image, const RolloutConfig& rc,
                             const ScorePerturbation& perturb) {
  RolloutTrace trace;
  if (rc.iterations == 0) return trace;
  Runner run(params, cfg, image, rc);
  for (int n = 0; n < rc.iterations; ++n) {
    IterationRecord rec;
    if (!run.fused_iteration(n, perturb, rec)) break;
    trace.iterations.push_back(std::move(rec));
  }
  trace.final_memory = run.memory_.grid.value();
  return trace;
}

RolloutTrace hybrid_detect(const ParamStore& params, const ModelConfig& cfg, const Tensor& image,
                           const RolloutConfig& rc, const ScorePerturbation& perturb) {
  RolloutTrace trace;
  Runner run(params, cfg, image, rc);
  const DetectorConfig& det = cfg.detector;
  if (rc.n1 > 0) {
    // Base phase: the NMS-ordered base detections, written without fusion.
    RpnStep rpn = rpn_step(run.b_, cfg, ModelKind::base, run.img_, nullptr, rc.proposals, false,
                           false);
    if (!rpn.proposals.empty()) {
      ClsStep cls = cls_step(run.b_, cfg, ModelKind::base, run.img_, rpn, rpn.proposals, false,
                             false);
      const Tensor probs = softmax_rows(cls.logits.fused.value());
      std::vector<Detection> dets =
          detections_from_scores(rpn.proposals, probs, cls.deltas.fused.value(), det,
                                 run.img_.image_h, run.img_.image_w,
                                 rc.emission == Emission::hardmax);
      if (static_cast<int>(dets.size()) > rc.n1) dets.resize(rc.n1);
      for (std::size_t i = 0; i < dets.size(); ++i) {
        IterationRecord rec;
        rec.index = static_cast<int>(i);
        rec.fused = false;
        rec.roi = rpn.proposals[dets[i].roi];
        rec.probs = row_of(probs, dets[i].roi);
        rec.selected_class = dets[i].cls + 1;
        rec.base_logits = row_of(cls.logits.base.value(), dets[i].roi);
        rec.fused_logits = rec.base_logits;
        dets[i].iteration = rec.index;
        rec.emitted = {dets[i]};
        rec.memory_box = dets[i].box;
        std::vector<double> feed = rec.probs;
        if (perturb) perturb(rec.index, feed);
        run.write(rec.memory_box, feed);
        rec.memory_digest = digest(run.memory_.grid.value());
        trace.iterations.push_back(std::move(rec));
      }
    }
  }
  const int start = static_cast<int>(trace.iterations.size());
  for (int j = 0; j < rc.n2; ++j) {
    IterationRecord rec;
    if (!run.fused_iteration(start + j, perturb, rec)) break;
    trace.iterations.push_back(std::move(rec));
  }
  trace.final_memory = run.memory_.grid.value();
  return trace;
}

Tensor replay_memory(const ParamStore& params, const ModelConfig& cfg, const Tensor& image,
                     const RolloutTrace& trace) {
  RolloutConfig rc;
  Runner run(params, cfg, image, rc);
  for (const auto& it : trace.iterations) run.write(it.memory_box, it.probs);
  return run.memory_.grid.value();
}

std::vector<Detection> single_shot_detect(const ParamStore& params, const ModelConfig& cfg,
                                          ModelKind kind, const Tensor& image, ProposalMode mode,
                                          bool hardmax) {
  if (kind == ModelKind::smn)
    throw ValueError("single_shot_detect: the smn model runs through detect_sequence");
  Tape tape;
  Bindings b(tape, params);
  ImageContext img = encode_image(b, cfg, image, false);
  RpnStep rpn = rpn_step(b, cfg, kind, img, nullptr, mode, false, false);
  if (rpn.proposals.empty()) return {};
  ClsStep cls = cls_step(b, cfg, kind, img, rpn, rpn.proposals, false, false);
  return detections_from_scores(rpn.proposals, softmax_rows(cls.logits.fused.value()),
                                cls.deltas.fused.value(), cfg.detector, img.image_h, img.image_w,
                                hardmax);
}

void write_trace_jsonl(std::ostream& out, const RolloutTrace& trace) {
  auto box_json = [](const BoundingBox& b) { return nlohmann::json::array({b.x1, b.y1, b.x2, b.y2}); };
  for (const auto& it : trace.iterations) {
    nlohmann::json j;
    j["iteration"] = it.index;
    j["fused"] = it.fused;
    j["roi"] = box_json(it.roi.box);
    j["objectness"] = it.roi.score;
    j["selected_class"] = it.selected_class;
    j["scores"] = it.probs;
    j["base_logits"] = it.base_logits;
    j["memory_logits"] = it.memory_logits;
    j["fused_logits"] = it.fused_logits;
    j["detections"] = nlohmann::json::array();
    for (const auto& d : it.emitted)
      j["detections"].push_back({{"box", box_json(d.box)}, {"class", d.cls}, {"score", d.score}});
    j["memory_box"] = box_json(it.memory_box);
    j["memory_digest"] = hex64(it.memory_digest);
    out << j.dump() << '\n';
  }
}

}  // namespace smn
