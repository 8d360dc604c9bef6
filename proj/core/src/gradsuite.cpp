#include <map>

#include "smn/context.hpp"
#include "smn/gradcheck.hpp"
#include "smn/memory.hpp"
#include "smn/ops.hpp"
#include "smn/rng.hpp"

namespace smn {

namespace {

Tensor normal(Shape shape, double std, Rng& rng) {
  Tensor t(std::move(shape), 0.0);
  for (double& v : t.values()) v = rng.normal(0.0, std);
  return t;
}

Tensor uniform(Shape shape, double lo, double hi, Rng& rng) {
  Tensor t(std::move(shape), 0.0);
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

// Box with corners in [lo, hi] and a minimum extent.
BoundingBox random_box(double lo_x, double hi_x, double lo_y, double hi_y, double min_extent,
                       Rng& rng) {
  const double x1 = rng.uniform(lo_x, hi_x - min_extent);
  const double y1 = rng.uniform(lo_y, hi_y - min_extent);
  return {x1, y1, rng.uniform(x1 + min_extent, hi_x), rng.uniform(y1 + min_extent, hi_y)};
}

// Parameters of `store` under `prefix`, redrawn so no case starts from zeros.
struct ParamLeaves {
  std::vector<std::string> names;
  std::vector<Tensor> values;
};

ParamLeaves leaves(const ParamStore& store, const std::string& prefix, double std, Rng& rng) {
  ParamLeaves out;
  for (const auto& name : store.names(prefix)) {
    out.names.push_back(name);
    out.values.push_back(normal(store.get(name).value.shape(), std, rng));
  }
  return out;
}

void append(std::vector<Tensor>& inputs, const ParamLeaves& p) {
  inputs.insert(inputs.end(), p.values.begin(), p.values.end());
}

void bind_all(Bindings& b, const ParamLeaves& p, std::span<const Var> v, std::size_t offset) {
  for (std::size_t i = 0; i < p.names.size(); ++i) b.bind(p.names[i], v[offset + i]);
}

}  // namespace

std::vector<GradCase> gradient_suite(std::uint64_t seed) {
  Rng rng(Rng::mix(seed ^ 0x67726164ULL));
  std::vector<GradCase> cases;
  auto add_case = [&](std::string name, GraphFn fn, std::vector<Tensor> inputs) {
    cases.push_back({std::move(name), std::move(fn), std::move(inputs)});
  };

  // Single operators.
  add_case("conv2d/stride1", [](Tape&, std::span<const Var> v) { return conv2d(v[0], v[1], v[2], 1, 1); },
           {normal({5, 5, 2}, 1, rng), normal({3, 3, 2, 3}, 0.5, rng), normal({3}, 0.5, rng)});
  add_case("conv2d/stride2", [](Tape&, std::span<const Var> v) { return conv2d(v[0], v[1], v[2], 2, 1); },
           {normal({6, 6, 2}, 1, rng), normal({3, 3, 2, 2}, 0.5, rng), normal({2}, 0.5, rng)});
  add_case("conv2d/1x1", [](Tape&, std::span<const Var> v) { return conv2d(v[0], v[1], v[2], 1, 0); },
           {normal({4, 3, 3}, 1, rng), normal({1, 1, 3, 2}, 0.5, rng), normal({2}, 0.5, rng)});
  add_case("fully_connected",
           [](Tape&, std::span<const Var> v) { return fully_connected(v[0], v[1], v[2]); },
           {normal({3, 4}, 1, rng), normal({4, 5}, 0.5, rng), normal({5}, 0.5, rng)});
  add_case("relu", [](Tape&, std::span<const Var> v) { return relu(v[0]); }, {normal({4, 4}, 1, rng)});
  add_case("sigmoid", [](Tape&, std::span<const Var> v) { return sigmoid(v[0]); }, {normal({4, 4}, 2, rng)});
  add_case("tanh", [](Tape&, std::span<const Var> v) { return tanh(v[0]); }, {normal({4, 4}, 1, rng)});
  add_case("softmax", [](Tape&, std::span<const Var> v) { return softmax(v[0]); }, {normal({3, 5}, 1, rng)});
  add_case("bilinear_resize", [](Tape&, std::span<const Var> v) { return bilinear_resize(v[0], 7, 3); },
           {normal({4, 5, 2}, 1, rng)});
  {
    const BoundingBox box = random_box(0, 6, 0, 5, 1.0, rng);
    add_case("roi_read", [box](Tape&, std::span<const Var> v) { return roi_read(v[0], box, 3, 3); },
             {normal({6, 7, 2}, 1, rng)});
    add_case("roi_write",
             [box](Tape&, std::span<const Var> v) { return roi_write(v[0], box, v[1]); },
             {normal({6, 7, 2}, 1, rng), normal({3, 3, 2}, 1, rng)});
    add_case("roi_gated_write",
             [box](Tape&, std::span<const Var> v) {
               return roi_gated_write(v[0], box, sigmoid(v[1]), tanh(v[2]));
             },
             {uniform({6, 7, 2}, -1, 1, rng), normal({3, 3, 2}, 1, rng), normal({3, 3, 2}, 1, rng)});
  }
  {
    std::vector<BoundingBox> boxes{random_box(0, 5, 0, 5, 1.5, rng), random_box(0, 5, 0, 5, 0.5, rng)};
    add_case("roi_max_pool",
             [boxes](Tape&, std::span<const Var> v) { return roi_max_pool(v[0], boxes, 2, 2); },
             {normal({6, 6, 2}, 1, rng)});
  }
  add_case("add", [](Tape&, std::span<const Var> v) { return add(v[0], v[1]); },
           {normal({3, 4}, 1, rng), normal({3, 4}, 1, rng)});
  add_case("sub", [](Tape&, std::span<const Var> v) { return sub(v[0], v[1]); },
           {normal({3, 4}, 1, rng), normal({3, 4}, 1, rng)});
  add_case("mul", [](Tape&, std::span<const Var> v) { return mul(v[0], v[1]); },
           {normal({3, 4}, 1, rng), normal({3, 4}, 1, rng)});
  add_case("scale", [](Tape&, std::span<const Var> v) { return scale(v[0], -1.7); }, {normal({5}, 1, rng)});
  add_case("one_minus", [](Tape&, std::span<const Var> v) { return one_minus(v[0]); }, {normal({5}, 1, rng)});
  add_case("concat_last", [](Tape&, std::span<const Var> v) { return concat_last(v[0], v[1]); },
           {normal({2, 3, 2}, 1, rng), normal({2, 3, 3}, 1, rng)});
  add_case("tile_hw", [](Tape&, std::span<const Var> v) { return tile_hw(v[0], 2, 3); }, {normal({4}, 1, rng)});
  add_case("reshape", [](Tape&, std::span<const Var> v) { return reshape(v[0], {6, 2}); },
           {normal({2, 3, 2}, 1, rng)});
  add_case("gather_rows",
           [](Tape&, std::span<const Var> v) {
             const int rows[] = {2, 0, 2};
             return gather_rows(v[0], rows);
           },
           {normal({3, 4}, 1, rng)});
  add_case("sum", [](Tape&, std::span<const Var> v) { return sum(v[0]); }, {normal({3, 4}, 1, rng)});
  {
    const Tensor w = normal({3, 4}, 1, rng);
    add_case("weighted_sum", [w](Tape&, std::span<const Var> v) { return weighted_sum(v[0], w); },
             {normal({3, 4}, 1, rng)});
  }
  add_case("add_n",
           [](Tape&, std::span<const Var> v) {
             const Var terms[] = {v[0], v[1], v[0]};
             return add_n(terms);
           },
           {normal({3}, 1, rng), normal({3}, 1, rng)});
  add_case("softmax_cross_entropy",
           [](Tape&, std::span<const Var> v) {
             const int labels[] = {0, 3, -1, 2};
             return softmax_cross_entropy(v[0], labels, 3.0);
           },
           {normal({4, 4}, 1.5, rng)});
  {
    Tensor t = uniform({6}, 0, 1, rng), w = uniform({6}, 0, 1, rng);
    for (double& x : t.values()) x = x > 0.5 ? 1.0 : 0.0;
    w[1] = 0.0;
    add_case("sigmoid_bce",
             [t, w](Tape&, std::span<const Var> v) { return sigmoid_bce(v[0], t, w, 4.0); },
             {normal({6}, 2, rng)});
  }
  {
    const Tensor t = normal({3, 4}, 1, rng), w = uniform({3, 4}, 0, 1, rng);
    add_case("smooth_l1",
             [t, w](Tape&, std::span<const Var> v) { return smooth_l1(v[0], t, w, 1.0 / 9.0, 2.0); },
             {normal({3, 4}, 1, rng)});
  }

  // Composite: input fusion -> GRU -> gated write on a small memory.
  MemoryConfig mcfg;
  mcfg.prior_h = 3;
  mcfg.prior_w = 3;
  mcfg.depth = 2;
  mcfg.patch = 3;
  constexpr int kStride = 4, kFh = 6, kFw = 6, kChannels = 3, kClasses = 2;
  ParamStore mem_store;
  init_memory_params(mem_store, mcfg, kChannels, kClasses, rng);
  const ParamLeaves mem = leaves(mem_store, "mem/in.", 0.5, rng);
  ParamLeaves gru = leaves(mem_store, "mem/gru.", 0.35, rng);
  ParamLeaves mem_all = mem;
  mem_all.names.insert(mem_all.names.end(), gru.names.begin(), gru.names.end());
  mem_all.values.insert(mem_all.values.end(), gru.values.begin(), gru.values.end());
  const double extent = kStride * kFw;
  std::vector<BoundingBox> writes;
  for (int i = 0; i < 3; ++i) writes.push_back(random_box(0, extent, 0, extent, 6.0, rng));

  auto memory_case = [&](const std::string& name, int steps) {
    std::vector<Tensor> inputs{normal({kFh, kFw, kChannels}, 1, rng),
                               uniform({kFh, kFw, mcfg.depth}, -0.9, 0.9, rng)};
    for (int i = 0; i < steps; ++i) inputs.push_back(normal({kClasses + 1}, 1, rng));
    append(inputs, mem_all);
    const auto boxes = std::vector<BoundingBox>(writes.begin(), writes.begin() + steps);
    add_case(
        name,
        [mem_all, mcfg, boxes, steps](Tape& tape, std::span<const Var> v) {
          const ParamStore empty;
          Bindings b(tape, empty);
          bind_all(b, mem_all, v, 2 + steps);
          MemoryState s{v[1], 0};
          for (int i = 0; i < steps; ++i)
            s = memory_update(b, mcfg, s, boxes[i], kStride, v[0], softmax(v[2 + i]), true);
          return s.grid;
        },
        std::move(inputs));
  };
  memory_case("memory/fusion-gru-write", 1);
  memory_case("memory/bptt-3-steps", 3);

  // Composite: context net and memory heads, fused with a stop-gradient base.
  DetectorConfig det;
  det.pool = 3;
  det.fc = 4;
  det.num_classes = kClasses;
  det.rpn_channels = 3;
  det.anchor_scales = {8.0};
  det.anchor_ratios = {1.0};
  ContextConfig ccfg;
  ccfg.depth = 3;
  ccfg.channels = 3;
  ParamStore head_store;
  init_context_params(head_store, ccfg, mcfg.depth, rng, "ctx/");
  init_memory_head_params(head_store, det, ccfg, rng, "mem/head.");
  const ParamLeaves heads = leaves(head_store, "", 0.4, rng);
  std::vector<RoI> rois{{random_box(0, extent, 0, extent, 6.0, rng), 0.9, -1},
                        {random_box(0, extent, 0, extent, 6.0, rng), 0.8, -1}};
  const Tensor base_cls = normal({2, kClasses + 1}, 1, rng);
  const Tensor base_rpn = normal({kFh * kFw}, 1, rng);
  const Tensor base_fc7 = uniform({2, det.fc}, 0, 1, rng);
  {
    std::vector<Tensor> inputs{uniform({kFh, kFw, mcfg.depth}, -1, 1, rng)};
    append(inputs, heads);
    add_case(
        "heads/fused-stopgrad",
        [heads, det, ccfg, rois, base_cls, base_rpn, base_fc7](Tape& tape, std::span<const Var> v) {
          const ParamStore empty;
          Bindings b(tape, empty);
          bind_all(b, heads, v, 1);
          Var mconv = context_forward(b, ccfg, v[0], true);
          Var fc7 = tape.stop_gradient(tape.constant(base_fc7));
          ClsOutput cls = memory_cls(b, det, mconv, rois, fc7, true);
          RpnOutput rpn = memory_rpn(b, det, mconv, true);
          Var fc = fuse(tape.constant(base_cls), cls.logits, 1, FusionDesign::d).fused;
          Var fr = fuse(tape.constant(base_rpn), rpn.logits, 1, FusionDesign::d).fused;
          return concat_last(reshape(fc, {static_cast<int>(fc.value().size())}),
                             concat_last(fr, reshape(cls.deltas,
                                                     {static_cast<int>(cls.deltas.value().size())})));
        },
        std::move(inputs));
  }
  return cases;
}

std::vector<SuiteEntry> run_gradient_suite(std::uint64_t first_seed, int seeds,
                                           const GradCheckOptions& options) {
  std::vector<SuiteEntry> out;
  std::map<std::string, std::size_t> index;
  for (int s = 0; s < seeds; ++s) {
    for (const auto& c : gradient_suite(first_seed + s)) {
      GradCheckOptions opt = options;
      opt.projection_seed = options.projection_seed + s;
      const GradCheckResult r = grad_check(c.graph, c.inputs, opt);
      auto it = index.find(c.name);
      if (it == index.end()) {
        index[c.name] = out.size();
        out.push_back({c.name, r});
        continue;
      }
      GradCheckResult& acc = out[it->second].result;
      acc.checked += r.checked;
      acc.kink_rechecks += r.kink_rechecks;
      if (r.max_rel_error > acc.max_rel_error) {
        acc.max_rel_error = r.max_rel_error;
        acc.worst = "seed " + std::to_string(first_seed + s) + ", " + r.worst;
      }
    }
  }
  return out;
}

}  // namespace smn
