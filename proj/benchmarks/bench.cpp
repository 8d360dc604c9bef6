#include <benchmark/benchmark.h>

#include "smn/config.hpp"
#include "smn/eval.hpp"
#include "smn/ops.hpp"
#include "smn/rollout.hpp"

using namespace smn;

namespace {

Tensor random_tensor(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(-1, 1);
  return t;
}

void BM_Conv2dForwardBackward(benchmark::State& state) {
  const int size = static_cast<int>(state.range(0)), ch = static_cast<int>(state.range(1));
  Rng rng(1);
  const Tensor x = random_tensor({size, size, ch}, rng), w = random_tensor({3, 3, ch, ch}, rng),
               b = random_tensor({ch}, rng);
  for (auto _ : state) {
    Tape tape;
    const Var vx = tape.variable(x), vw = tape.variable(w), vb = tape.variable(b);
    tape.backward(sum(conv2d(vx, vw, vb, 1, 1)));
    benchmark::DoNotOptimize(tape.grad(vw).data());
  }
}
BENCHMARK(BM_Conv2dForwardBackward)->Args({16, 32})->Args({32, 32})->Args({64, 16});

void BM_RoiReadWrite(benchmark::State& state) {
  Rng rng(2);
  const Tensor map = random_tensor({16, 16, 32}, rng);
  const Tensor patch = random_tensor({7, 7, 32}, rng);
  const BoundingBox box{2.3, 3.1, 11.7, 9.4};
  for (auto _ : state) {
    Tape tape;
    const Var m = tape.variable(map);
    const Var r = roi_read(m, box, 7, 7);
    const Var w = roi_write(m, box, add(r, tape.constant(patch)));
    tape.backward(sum(w));
    benchmark::DoNotOptimize(tape.grad(m).data());
  }
}
BENCHMARK(BM_RoiReadWrite);

struct ToyModel {
  RunConfig cfg = RunConfig::toy();
  ParamStore store;
  Tensor image;
  ToyModel() {
    Rng rng(3);
    init_model_params(store, cfg.model, ModelKind::smn, rng);
    image = generate_scenes(cfg.scene, 4, 1).front().image;
  }
};

void BM_BaseDetect(benchmark::State& state) {
  const ToyModel m;
  for (auto _ : state)
    benchmark::DoNotOptimize(base_detect(m.store, m.cfg.model.detector, m.image, ProposalMode::nms_top_k));
}
BENCHMARK(BM_BaseDetect)->Unit(benchmark::kMillisecond);

void BM_DetectSequence(benchmark::State& state) {
  const ToyModel m;
  RolloutConfig rc;
  rc.iterations = static_cast<int>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(detect_sequence(m.store, m.cfg.model, m.image, rc));
  state.SetItemsProcessed(state.iterations() * rc.iterations);
}
BENCHMARK(BM_DetectSequence)->Arg(1)->Arg(10)->Unit(benchmark::kMillisecond);

void BM_Evaluate(benchmark::State& state) {
  Rng rng(5);
  const int images = static_cast<int>(state.range(0));
  std::vector<std::vector<Detection>> dets(images);
  std::vector<std::vector<Instance>> gts(images);
  for (int i = 0; i < images; ++i) {
    for (int k = 0; k < 5; ++k) {
      const double x = rng.uniform(0, 50), y = rng.uniform(0, 50);
      gts[i].push_back({rng.integer(0, 3), {x, y, x + rng.uniform(4, 14), y + rng.uniform(4, 14)}});
    }
    for (int k = 0; k < 20; ++k) {
      const auto& g = gts[i][rng.integer(0, 4)];
      dets[i].push_back({{g.box.x1 + rng.uniform(-2, 2), g.box.y1, g.box.x2, g.box.y2 + rng.uniform(-2, 2)},
                         rng.integer(0, 3), rng.uniform()});
    }
  }
  for (auto _ : state) benchmark::DoNotOptimize(evaluate(dets, gts, 4));
}
BENCHMARK(BM_Evaluate)->Arg(200)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
