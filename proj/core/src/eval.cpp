#include "smn/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>

#include "smn/error.hpp"
#include "smn/parallel.hpp"

namespace smn {

namespace {

constexpr int kRecallPoints = 101;
constexpr double kInf = std::numeric_limits<double>::infinity();

struct AreaRange {
  double lo = 0.0, hi = kInf;
  bool contains(double a) const { return a >= lo && a < hi; }
};

// Detections of each image sorted by score (stable) and cut to `cap`.
std::vector<std::vector<Detection>> truncated(const std::vector<std::vector<Detection>>& dets,
                                              int cap) {
  std::vector<std::vector<Detection>> out(dets.size());
  for (std::size_t i = 0; i < dets.size(); ++i) {
    out[i] = dets[i];
    std::stable_sort(out[i].begin(), out[i].end(),
                     [](const Detection& a, const Detection& b) { return a.score > b.score; });
    if (static_cast<int>(out[i].size()) > cap) out[i].resize(cap);
  }
  return out;
}

struct ClassCurve {
  std::vector<double> precision;  // 101 points
  double recall = 0.0;
  bool valid = false;  // class has in-range ground truth
};

// Greedy matching of one class at one threshold across all images.
ClassCurve class_curve(const std::vector<std::vector<Detection>>& dets,
                       const std::vector<std::vector<Instance>>& gts, int cls, double thr,
                       const AreaRange& range) {
  std::vector<double> scores;
  std::vector<bool> tp;
  int npos = 0;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    // GTs of the class, in-range ones first.
    std::vector<BoundingBox> g;
    std::vector<bool> g_ignored;
    for (int pass = 0; pass < 2; ++pass)
      for (const auto& inst : gts[i]) {
        if (inst.cls != cls) continue;
        const bool ignored = !range.contains(inst.box.area());
        if (ignored != (pass == 1)) continue;
        g.push_back(inst.box);
        g_ignored.push_back(ignored);
        if (!ignored) ++npos;
      }
    std::vector<bool> taken(g.size(), false);
    for (const auto& d : dets[i]) {
      if (d.cls != cls) continue;
      double best = std::min(thr, 1.0 - 1e-10);
      int m = -1;
      for (std::size_t j = 0; j < g.size(); ++j) {
        if (taken[j]) continue;
        if (m >= 0 && !g_ignored[m] && g_ignored[j]) break;
        const double o = iou(d.box, g[j]);
        if (o < best) continue;
        best = o;
        m = static_cast<int>(j);
      }
      bool ignored;
      if (m >= 0) {
        taken[m] = true;
        ignored = g_ignored[m];
      } else {
        ignored = !range.contains(d.box.area());
      }
      if (ignored) continue;
      scores.push_back(d.score);
      tp.push_back(m >= 0);
    }
  }
  ClassCurve c;
  if (npos == 0) return c;
  c.valid = true;
  c.precision = interpolated_precision(scores, tp, npos);
  const int hits = static_cast<int>(std::count(tp.begin(), tp.end(), true));
  c.recall = static_cast<double>(hits) / npos;
  return c;
}

struct Summary {
  double ap = 0.0;
  double recall = 0.0;
  std::vector<double> precision;  // class mean, 101 points
  std::vector<double> class_ap;
};

Summary summarize(const std::vector<std::vector<Detection>>& dets,
                  const std::vector<std::vector<Instance>>& gts, int num_classes,
                  const std::vector<double>& thresholds, const AreaRange& range) {
  Summary s;
  s.precision.assign(kRecallPoints, 0.0);
  s.class_ap.assign(num_classes, -1.0);
  double ap_sum = 0.0, rec_sum = 0.0;
  int n = 0, valid_classes = 0;
  for (int c = 0; c < num_classes; ++c) {
    double class_sum = 0.0;
    bool valid = false;
    for (double thr : thresholds) {
      const ClassCurve cc = class_curve(dets, gts, c, thr, range);
      if (!cc.valid) break;
      valid = true;
      const double ap = std::accumulate(cc.precision.begin(), cc.precision.end(), 0.0) /
                        kRecallPoints;
      class_sum += ap;
      ap_sum += ap;
      rec_sum += cc.recall;
      ++n;
      if (thresholds.size() == 1)
        for (int k = 0; k < kRecallPoints; ++k) s.precision[k] += cc.precision[k];
    }
    if (valid) {
      s.class_ap[c] = class_sum / thresholds.size();
      ++valid_classes;
    }
  }
  if (n > 0) {
    s.ap = ap_sum / n;
    s.recall = rec_sum / n;
  }
  if (valid_classes > 0)
    for (auto& p : s.precision) p /= valid_classes;
  return s;
}

}  // namespace

void EvalConfig::validate() const {
  if (iou_thresholds.empty()) throw ConfigError("eval.iou_thresholds: must not be empty");
  for (std::size_t i = 0; i < iou_thresholds.size(); ++i) {
    const double t = iou_thresholds[i];
    if (!(t > 0 && t < 1)) throw ConfigError("eval.iou_thresholds: values must be in (0, 1)");
    if (i > 0 && !(t > iou_thresholds[i - 1]))
      throw ConfigError("eval.iou_thresholds: must be strictly increasing");
  }
  if (max_detections <= 0) throw ConfigError("eval.max_detections: must be > 0");
  if (ar_cap <= 0) throw ConfigError("eval.ar_cap: must be > 0");
  if (!(small_max > 0 && medium_max > small_max))
    throw ConfigError("eval.small_max/medium_max: need 0 < small_max < medium_max");
}

std::vector<double> interpolated_precision(const std::vector<double>& scores,
                                           const std::vector<bool>& true_positive, int npos) {
  std::vector<double> q(kRecallPoints, 0.0);
  if (npos <= 0 || scores.empty()) return q;
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  const std::size_t n = order.size();
  std::vector<double> rc(n), pr(n);
  double tp = 0, fp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (true_positive[order[i]]) tp += 1;
    else fp += 1;
    rc[i] = tp / npos;
    pr[i] = tp / (tp + fp);
  }
  for (std::size_t i = n - 1; i > 0; --i) pr[i - 1] = std::max(pr[i - 1], pr[i]);
  for (int k = 0; k < kRecallPoints; ++k) {
    const double r = k / 100.0;
    const auto it = std::lower_bound(rc.begin(), rc.end(), r);
    if (it != rc.end()) q[k] = pr[it - rc.begin()];
  }
  return q;
}

EvalResult evaluate(const std::vector<std::vector<Detection>>& detections,
                    const std::vector<std::vector<Instance>>& gts, int num_classes,
                    const EvalConfig& cfg) {
  cfg.validate();
  if (detections.size() != gts.size())
    throw ValueError("evaluate: " + std::to_string(detections.size()) + " detection lists for " +
                     std::to_string(gts.size()) + " images");
  for (std::size_t i = 0; i < gts.size(); ++i) {
    for (const auto& d : detections[i])
      if (d.cls < 0 || d.cls >= num_classes)
        throw ValueError("evaluate: image " + std::to_string(i) + " has detection class " +
                         std::to_string(d.cls) + " outside [0, " + std::to_string(num_classes) +
                         ")");
    for (const auto& g : gts[i])
      if (g.cls < 0 || g.cls >= num_classes)
        throw ValueError("evaluate: image " + std::to_string(i) + " has ground-truth class " +
                         std::to_string(g.cls) + " outside [0, " +
                         std::to_string(num_classes) + ")");
  }
  const auto capped = truncated(detections, cfg.max_detections);
  const auto capped_ar = truncated(detections, cfg.ar_cap);
  const AreaRange all{}, small{0.0, cfg.small_max}, medium{cfg.small_max, cfg.medium_max},
      large{cfg.medium_max, kInf};
  const auto& th = cfg.iou_thresholds;

  EvalResult r;
  const Summary main = summarize(capped, gts, num_classes, th, all);
  r.ap = main.ap;
  r.ar = main.recall;
  const Summary s50 = summarize(capped, gts, num_classes, {0.5}, all);
  r.ap50 = s50.ap;
  r.class_ap50 = s50.class_ap;
  r.pr50 = s50.precision;
  r.ap75 = summarize(capped, gts, num_classes, {0.75}, all).ap;
  const Summary ss = summarize(capped, gts, num_classes, th, small);
  const Summary sm = summarize(capped, gts, num_classes, th, medium);
  const Summary sl = summarize(capped, gts, num_classes, th, large);
  r.ap_small = ss.ap;
  r.ap_medium = sm.ap;
  r.ap_large = sl.ap;
  r.ar_small = ss.recall;
  r.ar_medium = sm.recall;
  r.ar_large = sl.recall;
  r.ar10 = summarize(capped_ar, gts, num_classes, th, all).recall;
  return r;
}

std::vector<Detection> run_protocol(const ParamStore& params, const ModelConfig& cfg,
                                    ModelKind kind, const Tensor& image, const Protocol& p) {
  if (p.cap <= 0) throw ConfigError("protocol " + p.name + ": cap must be > 0");
  std::vector<Detection> dets;
  if (kind == ModelKind::smn) {
    RolloutConfig rc;
    rc.emission = p.emission;
    rc.proposals = p.proposals;
    if (p.n1 > 0) {
      rc.n1 = p.n1;
      rc.n2 = std::max(0, p.cap - p.n1);
      dets = hybrid_detect(params, cfg, image, rc).detections();
    } else {
      rc.iterations = p.cap;
      dets = detect_sequence(params, cfg, image, rc).detections();
    }
  } else {
    dets = single_shot_detect(params, cfg, kind, image, p.proposals,
                              p.emission == Emission::hardmax);
  }
  std::stable_sort(dets.begin(), dets.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  if (static_cast<int>(dets.size()) > p.cap) dets.resize(p.cap);
  return dets;
}

std::vector<std::vector<Detection>> detect_all(const ParamStore& params, const ModelConfig& cfg,
                                               ModelKind kind,
                                               const std::vector<SceneRecord>& records,
                                               const Protocol& p) {
  std::vector<std::vector<Detection>> out(records.size());
  parallel_for(records.size(),
               [&](std::size_t i) { out[i] = run_protocol(params, cfg, kind, records[i].image, p); });
  return out;
}

std::vector<std::vector<Instance>> ground_truth(const std::vector<SceneRecord>& records) {
  std::vector<std::vector<Instance>> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r.instances);
  return out;
}

std::vector<ComparisonRow> compare(const std::vector<MethodSpec>& methods, const ModelConfig& cfg,
                                   const std::vector<SceneRecord>& records,
                                   const std::vector<Protocol>& protocols,
                                   const EvalConfig& ecfg) {
  for (const auto& m : methods)
    if (!std::filesystem::exists(m.checkpoint))
      throw MissingArtifact("compare: checkpoint for method '" + m.name + "' not found: " +
                            m.checkpoint.string());
  const auto gts = ground_truth(records);
  std::vector<ComparisonRow> rows;
  for (const auto& m : methods) {
    const Checkpoint ck = read_checkpoint(m.checkpoint);
    for (const auto& p : protocols) {
      const auto dets = detect_all(ck.params, cfg, m.kind, records, p);
      rows.push_back({m.name, p.name, evaluate(dets, gts, cfg.detector.num_classes, ecfg)});
    }
  }
  return rows;
}

void write_comparison_csv(std::ostream& out, const std::vector<ComparisonRow>& rows) {
  out << "method,protocol,AP,AP50,AP75,APs,APm,APl,AR10,AR,ARs,ARm,ARl\n";
  for (const auto& row : rows) {
    const EvalResult& r = row.result;
    out << row.method << ',' << row.protocol << ',' << r.ap << ',' << r.ap50 << ',' << r.ap75
        << ',' << r.ap_small << ',' << r.ap_medium << ',' << r.ap_large << ',' << r.ar10 << ','
        << r.ar << ',' << r.ar_small << ',' << r.ar_medium << ',' << r.ar_large << '\n';
  }
}

}  // namespace smn
