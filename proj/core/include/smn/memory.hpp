#pragma once

#include <string>

#include "smn/autodiff.hpp"
#include "smn/box.hpp"
#include "smn/params.hpp"

namespace smn {

struct MemoryConfig {
  int prior_h = 8;
  int prior_w = 8;
  int depth = 16;  // D
  int patch = 7;   // P
  void validate() const;
};

/// Memory grid aligned with the feature map, and the number of writes so far.
/// Immutable: memory_update returns a new state.
struct MemoryState {
  Var grid;  // [h' x w' x D]
  int iteration = 0;
};

// Prior grid "mem/prior" (zeros), input module "mem/in.*", GRU "mem/gru.*".
void init_memory_params(ParamStore& store, const MemoryConfig& cfg, int feature_channels,
                        int num_classes, Rng& rng);

MemoryState init_memory(const Var& prior, int feat_h, int feat_w);

/// Tiles the (C+1) score vector over the patch, concatenates it with the conv
/// patch and fuses both with two 1x1 conv+relu layers. Scores must sum to 1.
Var build_input_features(Bindings& b, const Var& conv_patch, const Var& scores, bool trainable,
                         const std::string& prefix = "mem/in.");

struct GruOutput {
  Var update;     // z
  Var candidate;  // h~
  Var output;     // (1 - z) * h + z * h~
};

/// Convolutional GRU with 3x3 same-padded convs:
///   z  = sigmoid(Wz*x + Uz*h + bz),  r = sigmoid(Wr*x + Ur*h + br)
///   h~ = tanh(W*x + U*(r . h) + b),   h' = (1 - z) . h + z . h~
GruOutput gru_write(Bindings& b, const Var& old_patch, const Var& input_patch, bool trainable,
                    const std::string& prefix = "mem/gru.");

/// Feature-space region a detection addresses. Boxes that clip to less than
/// half a cell are widened to half a cell, staying inside the map.
BoundingBox memory_region(const BoundingBox& image_box, int stride, int feat_h, int feat_w);

/// Reads the old patch and the conv patch at the detection, builds the input
/// features, runs the GRU and writes the gated result back. Cells outside the
/// region are left bit-identical.
MemoryState memory_update(Bindings& b, const MemoryConfig& cfg, const MemoryState& state,
                          const BoundingBox& image_box, int stride, const Var& features,
                          const Var& scores, bool trainable);

/// Keeps the learned prior inside [-1, 1] after an optimizer step.
void project_prior(ParamStore& store);

}  // namespace smn
