#include "smn/memory.hpp"

#include <algorithm>
#include <cmath>

#include "smn/error.hpp"
#include "smn/ops.hpp"

namespace smn {

void MemoryConfig::validate() const {
  if (patch < 2) throw ConfigError("memory.patch: must be >= 2");
  if (depth < 1) throw ConfigError("memory.depth: must be >= 1");
  if (prior_h < 1 || prior_w < 1) throw ConfigError("memory.prior: extents must be positive");
}

void init_memory_params(ParamStore& store, const MemoryConfig& cfg, int feature_channels,
                        int num_classes, Rng& rng) {
  const int d = cfg.depth;
  store.add_zeros("mem/prior", {cfg.prior_h, cfg.prior_w, d});
  const int in = feature_channels + num_classes + 1;
  store.add_gaussian("mem/in.fuse1.w", {1, 1, in, d}, in, 1.0, rng);
  store.add_zeros("mem/in.fuse1.b", {d});
  store.add_gaussian("mem/in.fuse2.w", {1, 1, d, d}, d, 1.0, rng);
  store.add_zeros("mem/in.fuse2.b", {d});
  for (const char* g : {"z", "r", "h"}) {
    const std::string n = std::string("mem/gru.") + g;
    store.add_gaussian(n + ".wx", {3, 3, d, d}, 9 * d, 0.5, rng);
    store.add_gaussian(n + ".uh", {3, 3, d, d}, 9 * d, 0.5, rng);
    store.add_zeros(n + ".b", {d});
  }
}

MemoryState init_memory(const Var& prior, int feat_h, int feat_w) {
  return {bilinear_resize(prior, feat_h, feat_w), 0};
}

Var build_input_features(Bindings& b, const Var& conv_patch, const Var& scores, bool trainable,
                         const std::string& prefix) {
  const Tensor& s = scores.value();
  double total = 0.0;
  for (double v : s.values()) total += v;
  if (std::abs(total - 1.0) > 1e-6)
    throw ValueError("build_input_features: class scores sum to " + std::to_string(total) +
                     ", expected 1");
  const int p_h = conv_patch.shape()[0], p_w = conv_patch.shape()[1];
  Var x = concat_last(conv_patch, tile_hw(reshape(scores, {static_cast<int>(s.size())}), p_h, p_w));
  x = relu(conv2d(x, b(prefix + "fuse1.w", trainable), b(prefix + "fuse1.b", trainable), 1, 0));
  return relu(conv2d(x, b(prefix + "fuse2.w", trainable), b(prefix + "fuse2.b", trainable), 1, 0));
}

GruOutput gru_write(Bindings& b, const Var& old_patch, const Var& input_patch, bool trainable,
                    const std::string& prefix) {
  if (old_patch.shape() != input_patch.shape())
    throw ShapeError("gru_write: old patch " + shape_str(old_patch.shape()) +
                     " vs input patch " + shape_str(input_patch.shape()));
  auto gate_pre = [&](const std::string& g, const Var& h) {
    const std::string n = prefix + g;
    Var bx = b(n + ".b", trainable);
    Var zero_bias = b.tape().constant(Tensor(bx.shape(), 0.0));
    return add(conv2d(input_patch, b(n + ".wx", trainable), bx, 1, 1),
               conv2d(h, b(n + ".uh", trainable), zero_bias, 1, 1));
  };
  Var z = sigmoid(gate_pre("z", old_patch));
  Var r = sigmoid(gate_pre("r", old_patch));
  Var cand = tanh(gate_pre("h", mul(r, old_patch)));
  Var out = add(mul(one_minus(z), old_patch), mul(z, cand));
  return {z, cand, out};
}

BoundingBox memory_region(const BoundingBox& image_box, int stride, int feat_h, int feat_w) {
  if (!image_box.valid()) throw ValueError("memory_update: detection box has non-positive area");
  BoundingBox f = to_feature_coords(image_box, stride, feat_h, feat_w);
  auto widen = [](double& lo, double& hi, int cells) {
    const double need = std::min(0.5, static_cast<double>(cells - 1));
    if (hi - lo >= need) return;
    const double mid = std::clamp(0.5 * (lo + hi), 0.5 * need, (cells - 1) - 0.5 * need);
    lo = mid - 0.5 * need;
    hi = mid + 0.5 * need;
  };
  widen(f.x1, f.x2, feat_w);
  widen(f.y1, f.y2, feat_h);
  return f;
}

MemoryState memory_update(Bindings& b, const MemoryConfig& cfg, const MemoryState& state,
                          const BoundingBox& image_box, int stride, const Var& features,
                          const Var& scores, bool trainable) {
  const int fh = features.shape()[0], fw = features.shape()[1];
  if (state.grid.shape()[0] != fh || state.grid.shape()[1] != fw)
    throw ShapeError("memory_update: memory " + shape_str(state.grid.shape()) +
                     " is not aligned with features " + shape_str(features.shape()));
  const BoundingBox region = memory_region(image_box, stride, fh, fw);
  Var old_patch = roi_read(state.grid, region, cfg.patch, cfg.patch);
  Var conv_patch = roi_read(features, region, cfg.patch, cfg.patch);
  Var x = build_input_features(b, conv_patch, scores, trainable);
  GruOutput g = gru_write(b, old_patch, x, trainable);
  return {roi_gated_write(state.grid, region, g.update, g.candidate), state.iteration + 1};
}

void project_prior(ParamStore& store) {
  if (!store.contains("mem/prior")) return;
  for (double& v : store.get("mem/prior").value.values()) v = std::clamp(v, -1.0, 1.0);
}

}  // namespace smn
