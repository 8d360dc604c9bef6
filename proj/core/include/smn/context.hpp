#pragma once

#include <span>
#include <string>

#include "smn/detector.hpp"

namespace smn {

/// How memory and base predictions combine across iterations:
///   a: memory head alone, base trained through every iteration
///   b: base + memory, base trained through every iteration
///   c: base + memory at every iteration, base gradient stopped after iteration 0
///   d: base alone at iteration 0, stopgrad(base) + memory afterwards
enum class FusionDesign { a, b, c, d };

struct ContextConfig {
  int depth = 5;
  int kernel = 3;
  int channels = 16;
  int residual_period = 2;
  FusionDesign design = FusionDesign::d;
  double recon_weight = 1.0;
  double head_init = 0.1;  // output-layer init multiplier on memory heads
  double fc7_init = 1.0;   // init multiplier on the layer fusing fc7 with m-fc7
  void validate() const;
};

std::string to_string(FusionDesign d);
FusionDesign design_from_string(const std::string& s);

void init_context_params(ParamStore& store, const ContextConfig& cfg, int in_channels, Rng& rng,
                         const std::string& prefix);

/// h1 = relu(conv1 x); every residual_period further layers form a block
/// h <- h + relu(conv(... relu(conv h))). Same-padded, so extents are kept.
Var context_forward(Bindings& b, const ContextConfig& cfg, const Var& grid, bool trainable,
                    const std::string& prefix = "ctx/");

// RPN head "<prefix>rpn." and classification branch "<prefix>cls." on m-conv.
void init_memory_head_params(ParamStore& store, const DetectorConfig& det,
                             const ContextConfig& cfg, Rng& rng, const std::string& prefix);

RpnOutput memory_rpn(Bindings& b, const DetectorConfig& det, const Var& mconv, bool trainable,
                     const std::string& prefix = "mem/head.");

/// Pooled m-conv through m-fc6 and m-fc7, concatenated with base fc7, then two
/// fc layers before the logit and regression heads.
ClsOutput memory_cls(Bindings& b, const DetectorConfig& det, const Var& mconv,
                     std::span<const RoI> rois, const Var& base_fc7, bool trainable,
                     const std::string& prefix = "mem/head.");

struct FusedScores {
  Var base;
  Var memory;  // invalid when the memory path is absent
  Var fused;
};

/// Combines base and memory logits for one head at the given iteration.
FusedScores fuse(const Var& base, const Var& memory, int iteration, FusionDesign design);

// Reconstruction heads "rec/rpn." and "rec/cls.": plain detector heads on m-conv.
void init_reconstruction_params(ParamStore& store, const DetectorConfig& det,
                                const ContextConfig& cfg, Rng& rng);

struct ReconstructionOutput {
  RpnOutput rpn;
  ClsOutput cls;
};

ReconstructionOutput reconstruction_heads(Bindings& b, const DetectorConfig& det,
                                          const Var& mconv, std::span<const RoI> rois,
                                          bool trainable);

}  // namespace smn
