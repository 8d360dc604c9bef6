#include "smn/context.hpp"

#include "smn/error.hpp"
#include "smn/ops.hpp"

namespace smn {

void ContextConfig::validate() const {
  if (depth < 1) throw ConfigError("context.depth: must be >= 1");
  if (kernel < 1 || kernel % 2 == 0) throw ConfigError("context.kernel: must be odd");
  if (channels < 1) throw ConfigError("context.channels: must be >= 1");
  if (residual_period < 1 || depth < residual_period)
    throw ConfigError("context.residual_period: must be in [1, depth]");
  if (recon_weight < 0) throw ConfigError("context.recon_weight: must be >= 0");
}

std::string to_string(FusionDesign d) {
  switch (d) {
    case FusionDesign::a: return "a";
    case FusionDesign::b: return "b";
    case FusionDesign::c: return "c";
    case FusionDesign::d: return "d";
  }
  return "d";
}

FusionDesign design_from_string(const std::string& s) {
  if (s == "a") return FusionDesign::a;
  if (s == "b") return FusionDesign::b;
  if (s == "c") return FusionDesign::c;
  if (s == "d") return FusionDesign::d;
  throw ConfigError("context.design: unknown design '" + s + "' (expected a, b, c or d)");
}

void init_context_params(ParamStore& store, const ContextConfig& cfg, int in_channels, Rng& rng,
                         const std::string& prefix) {
  int in = in_channels;
  const int k = cfg.kernel;
  for (int i = 1; i <= cfg.depth; ++i) {
    const std::string n = prefix + "conv" + std::to_string(i);
    store.add_gaussian(n + ".w", {k, k, in, cfg.channels}, k * k * in, 1.0, rng);
    store.add_zeros(n + ".b", {cfg.channels});
    in = cfg.channels;
  }
}

Var context_forward(Bindings& b, const ContextConfig& cfg, const Var& grid, bool trainable,
                    const std::string& prefix) {
  const int pad = cfg.kernel / 2;
  auto layer = [&](int i, const Var& x) {
    const std::string n = prefix + "conv" + std::to_string(i);
    return relu(conv2d(x, b(n + ".w", trainable), b(n + ".b", trainable), 1, pad));
  };
  Var h = layer(1, grid);
  int i = 2;
  while (i + cfg.residual_period - 1 <= cfg.depth) {
    Var branch = h;
    for (int j = 0; j < cfg.residual_period; ++j) branch = layer(i + j, branch);
    h = add(h, branch);
    i += cfg.residual_period;
  }
  for (; i <= cfg.depth; ++i) h = layer(i, h);
  return h;
}

void init_memory_head_params(ParamStore& store, const DetectorConfig& det,
                             const ContextConfig& cfg, Rng& rng, const std::string& prefix) {
  init_rpn_params(store, det, cfg.channels, rng, prefix + "rpn.", cfg.head_init);
  const std::string c = prefix + "cls.";
  const int in = det.pool * det.pool * cfg.channels;
  store.add_gaussian(c + "fc6.w", {in, det.fc}, in, 1.0, rng);
  store.add_zeros(c + "fc6.b", {det.fc});
  store.add_gaussian(c + "fc7.w", {det.fc, det.fc}, det.fc, 1.0, rng);
  store.add_zeros(c + "fc7.b", {det.fc});
  store.add_gaussian(c + "fuse1.w", {2 * det.fc, det.fc}, 2 * det.fc, cfg.fc7_init, rng);
  store.add_zeros(c + "fuse1.b", {det.fc});
  store.add_gaussian(c + "fuse2.w", {det.fc, det.fc}, det.fc, 1.0, rng);
  store.add_zeros(c + "fuse2.b", {det.fc});
  store.add_gaussian(c + "logit.w", {det.fc, det.num_classes + 1}, det.fc, cfg.head_init, rng);
  store.add_zeros(c + "logit.b", {det.num_classes + 1});
  store.add_gaussian(c + "delta.w", {det.fc, 4 * det.num_classes}, det.fc, cfg.head_init, rng);
  store.add_zeros(c + "delta.b", {4 * det.num_classes});
}

RpnOutput memory_rpn(Bindings& b, const DetectorConfig& det, const Var& mconv, bool trainable,
                     const std::string& prefix) {
  return rpn_forward(b, det, mconv, trainable, prefix + "rpn.");
}

ClsOutput memory_cls(Bindings& b, const DetectorConfig& det, const Var& mconv,
                     std::span<const RoI> rois, const Var& base_fc7, bool trainable,
                     const std::string& prefix) {
  const std::string c = prefix + "cls.";
  auto fc = [&](const std::string& n, const Var& x) {
    return fully_connected(x, b(c + n + ".w", trainable), b(c + n + ".b", trainable));
  };
  Var x = pool_rois(det, mconv, rois);
  Var m7 = relu(fc("fc7", relu(fc("fc6", x))));
  if (base_fc7.shape() != m7.shape())
    throw ShapeError("memory_cls: base fc7 " + shape_str(base_fc7.shape()) + " vs m-fc7 " +
                     shape_str(m7.shape()));
  Var h = relu(fc("fuse2", relu(fc("fuse1", concat_last(base_fc7, m7)))));
  return {m7, fc("logit", h), fc("delta", h)};
}

FusedScores fuse(const Var& base, const Var& memory, int iteration, FusionDesign design) {
  const bool memory_path = design != FusionDesign::d || iteration > 0;
  if (!memory_path) return {base, Var{}, base};
  if (!memory.valid()) throw ValueError("fuse: memory logits required at this iteration");
  if (memory.shape() != base.shape())
    throw ShapeError("fuse: base " + shape_str(base.shape()) + " vs memory " +
                     shape_str(memory.shape()));
  Tape& tape = *base.tape();
  switch (design) {
    case FusionDesign::a:
      return {base, memory, memory};
    case FusionDesign::b:
      return {base, memory, add(base, memory)};
    case FusionDesign::c:
    case FusionDesign::d:
      break;
  }
  const Var b = iteration > 0 ? tape.stop_gradient(base) : base;
  return {base, memory, add(b, memory)};
}

void init_reconstruction_params(ParamStore& store, const DetectorConfig& det,
                                const ContextConfig& cfg, Rng& rng) {
  init_rpn_params(store, det, cfg.channels, rng, "rec/rpn.", cfg.head_init);
  init_cls_params(store, det, det.pool * det.pool * cfg.channels, rng, "rec/cls.", cfg.head_init);
}

ReconstructionOutput reconstruction_heads(Bindings& b, const DetectorConfig& det,
                                          const Var& mconv, std::span<const RoI> rois,
                                          bool trainable) {
  ReconstructionOutput out;
  out.rpn = rpn_forward(b, det, mconv, trainable, "rec/rpn.");
  out.cls = classify_rois(b, det, mconv, rois, trainable, "rec/cls.");
  return out;
}

}  // namespace smn
