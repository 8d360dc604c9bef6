#include "smn/model.hpp"

#include "smn/error.hpp"
#include "smn/ops.hpp"

namespace smn {

namespace {

bool memory_path(const ModelConfig& cfg, ModelKind kind, int iteration) {
  switch (kind) {
    case ModelKind::base: return false;
    case ModelKind::mlp: return true;
    case ModelKind::smn: return cfg.context.design != FusionDesign::d || iteration > 0;
  }
  return false;
}

// The mlp baseline always fuses like design d past iteration 0.
FusionDesign design_for(const ModelConfig& cfg, ModelKind kind) {
  return kind == ModelKind::smn ? cfg.context.design : FusionDesign::d;
}

int iteration_for(ModelKind kind, const MemoryState* memory) {
  if (kind == ModelKind::mlp) return 1;
  if (kind == ModelKind::base) return 0;
  return fusion_iteration(memory);
}

const char* head_prefix(ModelKind kind) { return kind == ModelKind::mlp ? "mlp/head." : "mem/head."; }

}  // namespace

void init_model_params(ParamStore& store, const ModelConfig& cfg, ModelKind kind, Rng& rng) {
  const DetectorConfig& det = cfg.detector;
  init_base_params(store, det, rng);
  if (kind == ModelKind::smn) {
    init_memory_params(store, cfg.memory, det.channels.back(), det.num_classes, rng);
    init_context_params(store, cfg.context, cfg.memory.depth, rng, "ctx/");
    init_memory_head_params(store, det, cfg.context, rng, "mem/head.");
    init_reconstruction_params(store, det, cfg.context, rng);
  } else if (kind == ModelKind::mlp) {
    init_context_params(store, cfg.context, det.channels.back(), rng, "mlp/ctx.");
    init_memory_head_params(store, det, cfg.context, rng, "mlp/head.");
  }
}

ImageContext encode_image(Bindings& b, const ModelConfig& cfg, const Tensor& image,
                          bool train_base) {
  const DetectorConfig& det = cfg.detector;
  ImageContext ctx;
  ctx.image_h = image.dim(0);
  ctx.image_w = image.dim(1);
  ctx.features = backbone_forward(b, det, b.tape().constant(prepare_image(image)), train_base);
  ctx.base_rpn = rpn_forward(b, det, ctx.features, train_base);
  const int fh = ctx.features.shape()[0], fw = ctx.features.shape()[1];
  ctx.anchors = inference_anchors(
      build_anchors(fh, fw, det.anchor_scales, det.anchor_ratios, det.stride), ctx.image_h,
      ctx.image_w);
  return ctx;
}

RpnStep rpn_step(Bindings& b, const ModelConfig& cfg, ModelKind kind, const ImageContext& img,
                 const MemoryState* memory, ProposalMode mode, bool train_smn, bool train_base) {
  (void)train_base;
  RpnStep step;
  step.iteration = iteration_for(kind, memory);
  const FusionDesign design = design_for(cfg, kind);
  Var mem_logits, mem_deltas;
  if (memory_path(cfg, kind, step.iteration)) {
    if (kind == ModelKind::smn) {
      if (!memory) throw ValueError("rpn_step: memory state required for the smn model");
      step.mconv = context_forward(b, cfg.context, memory->grid, train_smn, "ctx/");
    } else {
      step.mconv = context_forward(b, cfg.context, img.features, train_smn, "mlp/ctx.");
    }
    RpnOutput m = memory_rpn(b, cfg.detector, step.mconv, train_smn, head_prefix(kind));
    mem_logits = m.logits;
    mem_deltas = m.deltas;
  }
  step.logits = fuse(img.base_rpn.logits, mem_logits, step.iteration, design);
  step.deltas = fuse(img.base_rpn.deltas, mem_deltas, step.iteration, design);
  step.proposals = propose(step.logits.fused.value(), step.deltas.fused.value(), img.anchors,
                           cfg.detector, mode, img.image_h, img.image_w);
  return step;
}

ClsStep cls_step(Bindings& b, const ModelConfig& cfg, ModelKind kind, const ImageContext& img,
                 const RpnStep& rpn, std::span<const RoI> rois, bool train_smn, bool train_base) {
  ClsStep step;
  step.base = classify_rois(b, cfg.detector, img.features, rois, train_base);
  const FusionDesign design = design_for(cfg, kind);
  Var mem_logits, mem_deltas;
  if (rpn.mconv.valid()) {
    const bool joint = design == FusionDesign::a || design == FusionDesign::b;
    Var fc7 = joint ? step.base.fc7 : b.tape().stop_gradient(step.base.fc7);
    ClsOutput m = memory_cls(b, cfg.detector, rpn.mconv, rois, fc7, train_smn, head_prefix(kind));
    step.memory_fc7 = m.fc7;
    mem_logits = m.logits;
    mem_deltas = m.deltas;
  }
  step.logits = fuse(step.base.logits, mem_logits, rpn.iteration, design);
  step.deltas = fuse(step.base.deltas, mem_deltas, rpn.iteration, design);
  return step;
}

}  // namespace smn
