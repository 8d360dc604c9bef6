#pragma once

#include <span>
#include <vector>

#include "smn/context.hpp"
#include "smn/detector.hpp"
#include "smn/memory.hpp"

namespace smn {

struct ModelConfig {
  DetectorConfig detector;
  MemoryConfig memory;
  ContextConfig context;
};

/// base: the detector alone. smn: detector plus memory, context net, memory
/// and reconstruction heads. mlp: detector plus a context net stacked directly
/// on the backbone features, with memory-style heads and no memory.
enum class ModelKind { base, smn, mlp };

// Parameter name prefixes per branch.
inline constexpr const char* kBasePrefix = "base/";
inline constexpr const char* kMlpPrefix = "mlp/";

/// Creates every parameter the model kind needs. Base weights are drawn first,
/// so a given seed yields the same base detector for every kind.
void init_model_params(ParamStore& store, const ModelConfig& cfg, ModelKind kind, Rng& rng);

/// Per-image quantities computed once and shared by all iterations.
struct ImageContext {
  Var features;
  RpnOutput base_rpn;
  AnchorSet anchors;  // inference anchors (clipped), all slots
  int image_h = 0;
  int image_w = 0;
};

ImageContext encode_image(Bindings& b, const ModelConfig& cfg, const Tensor& image,
                          bool train_base);

/// Region-proposal side of one iteration: m-conv, fused RPN scores and the
/// proposals they induce. For the mlp kind the context net reads the features
/// and memory is ignored.
struct RpnStep {
  int iteration = 0;
  Var mconv;  // invalid when the memory path is absent
  FusedScores logits;
  FusedScores deltas;
  std::vector<RoI> proposals;
};

RpnStep rpn_step(Bindings& b, const ModelConfig& cfg, ModelKind kind, const ImageContext& img,
                 const MemoryState* memory, ProposalMode mode, bool train_smn, bool train_base);

/// Classification side for a given RoI list.
struct ClsStep {
  ClsOutput base;
  Var memory_fc7;
  FusedScores logits;  // [R x (C+1)]
  FusedScores deltas;  // [R x 4C]
};

ClsStep cls_step(Bindings& b, const ModelConfig& cfg, ModelKind kind, const ImageContext& img,
                 const RpnStep& rpn, std::span<const RoI> rois, bool train_smn, bool train_base);

// Fusion iteration index for a memory state: the number of writes so far.
inline int fusion_iteration(const MemoryState* m) { return m ? m->iteration : 0; }

}  // namespace smn
