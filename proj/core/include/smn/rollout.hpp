#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <vector>

#include "smn/model.hpp"

namespace smn {

enum class Emission { softmax, hardmax };

struct RolloutConfig {
  int iterations = 10;  // N for detect_sequence
  int n1 = 0;           // hybrid: base detections written without fusion
  int n2 = 10;          // hybrid: fused iterations after that
  Emission emission = Emission::softmax;
  double emission_floor = 0.05;       // softmax emission keeps classes at or above this
  double selection_threshold = 0.0;   // selections below it emit nothing (memory still written)
  ProposalMode proposals = ProposalMode::nms_top_k;
  void validate() const;
};

std::string to_string(Emission e);
Emission emission_from_string(const std::string& s);
std::string to_string(ProposalMode m);
ProposalMode proposal_mode_from_string(const std::string& s);

/// Row whose best foreground probability is highest. Ties go to the
/// lexicographically smaller box (x1, y1, x2, y2), then the lower row.
/// probs is [R x (C+1)] with background in column 0.
int select_next(std::span<const RoI> rois, const Tensor& probs);

/// Detections for one selected RoI. probs is its (C+1) score row and deltas
/// its 4C regression row.
std::vector<Detection> emit(const RoI& roi, std::span<const double> probs,
                            std::span<const double> deltas, const DetectorConfig& cfg,
                            Emission mode, double floor, int iteration, int image_h, int image_w);

/// Box the memory is written at: the argmax class's regressed box, or the
/// RoI itself when background wins.
BoundingBox memory_write_box(const RoI& roi, std::span<const double> probs,
                             std::span<const double> deltas, const DetectorConfig& cfg,
                             int image_h, int image_w);

struct IterationRecord {
  int index = 0;
  bool fused = true;  // false for the hybrid base phase
  RoI roi;
  int selected_class = 0;  // softmax index, 0 = background
  std::vector<double> probs;
  std::vector<double> base_logits;
  std::vector<double> memory_logits;  // empty when the memory path is absent
  std::vector<double> fused_logits;
  std::vector<Detection> emitted;
  BoundingBox memory_box;
  std::uint64_t memory_digest = 0;
};

struct RolloutTrace {
  std::vector<IterationRecord> iterations;
  Tensor final_memory;
  std::vector<Detection> detections() const;  // all emissions, descending score
};

/// Test hook: may rewrite the score row that feeds the memory at an iteration.
using ScorePerturbation = std::function<void(int iteration, std::vector<double>& probs)>;

RolloutTrace detect_sequence(const ParamStore& params, const ModelConfig& cfg,
                             const Tensor& image, const RolloutConfig& rc,
                             const ScorePerturbation& perturb = {});

RolloutTrace hybrid_detect(const ParamStore& params, const ModelConfig& cfg, const Tensor& image,
                           const RolloutConfig& rc, const ScorePerturbation& perturb = {});

/// Rebuilds the final memory from the boxes and score rows in a trace.
Tensor replay_memory(const ParamStore& params, const ModelConfig& cfg, const Tensor& image,
                     const RolloutTrace& trace);

/// One-shot detection for the base and mlp kinds: fused scores, per-class NMS.
std::vector<Detection> single_shot_detect(const ParamStore& params, const ModelConfig& cfg,
                                          ModelKind kind, const Tensor& image, ProposalMode mode,
                                          bool hardmax = false);

/// One JSON object per iteration.
void write_trace_jsonl(std::ostream& out, const RolloutTrace& trace);

}  // namespace smn
