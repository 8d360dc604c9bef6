#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "smn/model.hpp"
#include "smn/rollout.hpp"
#include "smn/scene.hpp"

namespace smn {

/// Size buckets use box area in px²: small [0, small_max), medium
/// [small_max, medium_max), large [medium_max, inf).
struct EvalConfig {
  std::vector<double> iou_thresholds{0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95};
  int max_detections = 100;  // per image, applied before matching
  int ar_cap = 10;           // the cap behind AR-10
  double small_max = 64.0;
  double medium_max = 256.0;
  void validate() const;  // throws ConfigError
};

struct EvalResult {
  double ap = 0, ap50 = 0, ap75 = 0;
  double ap_small = 0, ap_medium = 0, ap_large = 0;
  double ar10 = 0;  // at ar_cap
  double ar = 0;    // at max_detections
  double ar_small = 0, ar_medium = 0, ar_large = 0;
  std::vector<double> class_ap50;  // -1 for classes without ground truth
  std::vector<double> pr50;        // 101-point precision at IoU 0.5, mean over classes
  friend bool operator==(const EvalResult&, const EvalResult&) = default;
};

/// Interpolated precision at the 101 recall points 0, 0.01, ..., 1 for one
/// class and threshold, given the non-ignored detections (any order; ties keep
/// input order) and the number of non-ignored GTs.
std::vector<double> interpolated_precision(const std::vector<double>& scores,
                                           const std::vector<bool>& true_positive,
                                           int npos);

/// COCO-style evaluation: per image the top max_detections detections by score
/// are kept, then matched greedily in score order per class and threshold,
/// preferring unmatched in-bucket GTs. Classes without GT are excluded from
/// the means; an empty evaluation reports zeros.
EvalResult evaluate(const std::vector<std::vector<Detection>>& detections,
                    const std::vector<std::vector<Instance>>& gts, int num_classes,
                    const EvalConfig& cfg = {});

/// One evaluation setting of a method: the detection cap N, emission mode,
/// proposal mode and, for the smn model, the hybrid base-phase length.
struct Protocol {
  std::string name;
  int cap = 10;
  Emission emission = Emission::softmax;
  ProposalMode proposals = ProposalMode::nms_top_k;
  int n1 = 0;
};

/// Detections of one image under a protocol. The smn model runs cap
/// iterations (n1 of them base-phase when n1 > 0); single-shot models keep
/// their per-class NMS output. The result is cut to the top `cap` by score.
std::vector<Detection> run_protocol(const ParamStore& params, const ModelConfig& cfg,
                                    ModelKind kind, const Tensor& image, const Protocol& p);

/// Runs run_protocol over every record, in parallel over images.
std::vector<std::vector<Detection>> detect_all(const ParamStore& params, const ModelConfig& cfg,
                                               ModelKind kind,
                                               const std::vector<SceneRecord>& records,
                                               const Protocol& p);

struct MethodSpec {
  std::string name;
  ModelKind kind = ModelKind::base;
  std::filesystem::path checkpoint;
};

struct ComparisonRow {
  std::string method;
  std::string protocol;
  EvalResult result;
};

/// Evaluates every method under every protocol. Throws MissingArtifact naming
/// the first checkpoint that does not exist.
std::vector<ComparisonRow> compare(const std::vector<MethodSpec>& methods, const ModelConfig& cfg,
                                   const std::vector<SceneRecord>& records,
                                   const std::vector<Protocol>& protocols,
                                   const EvalConfig& ecfg = {});

/// Columns: method, protocol, AP, AP50, AP75, APs, APm, APl, AR10, AR, ARs, ARm, ARl.
void write_comparison_csv(std::ostream& out, const std::vector<ComparisonRow>& rows);

std::vector<std::vector<Instance>> ground_truth(const std::vector<SceneRecord>& records);

}  // namespace smn
