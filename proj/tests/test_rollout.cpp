#include <algorithm>

#include "doctest.h"
#include "fixtures.hpp"
#include "oracles.hpp"
#include "smn/rollout.hpp"

using namespace smn;
using fixture::random_tensor;

namespace {

struct Model {
  ModelConfig cfg = fixture::tiny_model();
  ParamStore store;
  explicit Model(std::uint64_t seed) {
    Rng rng(seed);
    init_model_params(store, cfg, ModelKind::smn, rng);
  }
};

Tensor random_probs(Rng& rng, int rows, int cols, bool coarse) {
  Tensor p({rows, cols});
  for (int r = 0; r < rows; ++r) {
    double s = 0;
    for (int c = 0; c < cols; ++c) s += p[r * cols + c] = coarse ? rng.integer(1, 4) : rng.uniform(0.01, 1);
    for (int c = 0; c < cols; ++c) p[r * cols + c] /= s;
  }
  return p;
}

}  // namespace

TEST_CASE("select_next: single candidate, score ties and the linear-scan oracle") {
  const Tensor one({1, 3}, std::vector<double>{0.2, 0.5, 0.3});
  const std::vector<RoI> single{{{1, 1, 5, 5}}};
  CHECK(select_next(single, one) == 0);

  const Tensor tie({2, 3}, std::vector<double>{0.2, 0.8, 0.0, 0.2, 0.0, 0.8});
  const std::vector<RoI> two{{{5, 1, 9, 9}}, {{2, 7, 9, 9}}};
  CHECK(select_next(two, tie) == 1);

  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = rng.integer(1, 100);
    std::vector<RoI> rois(n);
    for (auto& r : rois) {
      const double x = rng.integer(0, 5), y = rng.integer(0, 5);
      r.box = {x, y, x + rng.integer(1, 3), y + rng.integer(1, 3)};
    }
    const Tensor p = random_probs(rng, n, 4, true);
    CHECK(select_next(rois, p) == oracle::select(rois, p));
  }
}

TEST_CASE("emit: the laptop and keyboard example") {
  DetectorConfig cfg;
  cfg.num_classes = 3;
  const RoI roi{{10, 10, 30, 30}};
  const std::vector<double> probs{0.25, 0.40, 0.35, 0.0};
  const std::vector<double> deltas(12, 0.0);
  const auto hard = emit(roi, probs, deltas, cfg, Emission::hardmax, 0.05, 3, 64, 64);
  REQUIRE(hard.size() == 1);
  CHECK(hard[0].cls == 0);
  CHECK(hard[0].score == 0.40);
  CHECK(hard[0].iteration == 3);
  const auto soft = emit(roi, probs, deltas, cfg, Emission::softmax, 0.05, 3, 64, 64);
  REQUIRE(soft.size() == 2);
  CHECK(soft[0].cls == 0);
  CHECK(soft[1].cls == 1);
  CHECK(soft[1].score == 0.35);

  const std::vector<double> bg{0.7, 0.2, 0.1, 0.0};
  CHECK(emit(roi, bg, deltas, cfg, Emission::hardmax, 0.05, 0, 64, 64).empty());
}

TEST_CASE("detect_sequence: empty at N=0, deterministic, one write per iteration") {
  Model m(2);
  Rng rng(3);
  const Tensor img = random_tensor({64, 64, 3}, rng, 0, 1);
  RolloutConfig rc;
  rc.iterations = 0;
  CHECK(detect_sequence(m.store, m.cfg, img, rc).iterations.empty());

  rc.iterations = 6;
  const RolloutTrace a = detect_sequence(m.store, m.cfg, img, rc);
  const RolloutTrace b = detect_sequence(m.store, m.cfg, img, rc);
  REQUIRE(a.iterations.size() == 6);
  CHECK(a.final_memory == b.final_memory);
  CHECK(a.detections() == b.detections());
  for (int i = 0; i < 6; ++i) {
    CHECK(a.iterations[i].index == i);
    if (i > 0) CHECK(a.iterations[i].memory_digest != a.iterations[i - 1].memory_digest);
  }
  CHECK(a.iterations[0].memory_logits.empty());
  CHECK(a.iterations[0].fused_logits == a.iterations[0].base_logits);
  CHECK(a.detections().size() <= static_cast<std::size_t>(6 * m.cfg.detector.num_classes));

  rc.emission = Emission::hardmax;
  CHECK(detect_sequence(m.store, m.cfg, img, rc).detections().size() <= 6);
}

TEST_CASE("detect_sequence: replaying the trace rebuilds the final memory") {
  Model m(4);
  Rng rng(5);
  RolloutConfig rc;
  rc.iterations = 5;
  for (int trial = 0; trial < 3; ++trial) {
    const Tensor img = random_tensor({64, 64, 3}, rng, 0, 1);
    const RolloutTrace t = detect_sequence(m.store, m.cfg, img, rc);
    CHECK(digest(replay_memory(m.store, m.cfg, img, t)) == digest(t.final_memory));
  }
}

TEST_CASE("hybrid_detect: N2=0 is the base detector, N1=0 is detect_sequence") {
  Model m(6);
  Rng rng(7);
  const Tensor img = random_tensor({64, 64, 3}, rng, 0, 1);
  RolloutConfig rc;
  rc.n1 = 5;
  rc.n2 = 0;
  const auto hybrid = hybrid_detect(m.store, m.cfg, img, rc).detections();
  auto base = base_detect(m.store, m.cfg.detector, img, ProposalMode::nms_top_k);
  if (base.size() > 5) base.resize(5);
  REQUIRE(hybrid.size() == base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    CHECK(hybrid[i].box == base[i].box);
    CHECK(hybrid[i].cls == base[i].cls);
    CHECK(hybrid[i].score == base[i].score);
  }

  rc.n1 = 0;
  rc.n2 = 4;
  rc.iterations = 4;
  const RolloutTrace h = hybrid_detect(m.store, m.cfg, img, rc);
  const RolloutTrace s = detect_sequence(m.store, m.cfg, img, rc);
  CHECK(h.detections() == s.detections());
  CHECK(h.final_memory == s.final_memory);
}

TEST_CASE("rollout: perturbing an early score row reaches later iterations only through memory") {
  Model m(8);
  Rng rng(9);
  const Tensor img = random_tensor({64, 64, 3}, rng, 0, 1);
  auto flip = [](int iteration, std::vector<double>& p) {
    if (iteration != 0) return;
    std::reverse(p.begin(), p.end());
  };
  RolloutConfig rc;
  rc.iterations = 3;
  const RolloutTrace plain = detect_sequence(m.store, m.cfg, img, rc);
  const RolloutTrace moved = detect_sequence(m.store, m.cfg, img, rc, flip);
  CHECK(plain.iterations[1].fused_logits != moved.iterations[1].fused_logits);
  CHECK(plain.iterations[0].fused_logits == moved.iterations[0].fused_logits);

  rc.n1 = 3;
  rc.n2 = 0;
  const auto h0 = hybrid_detect(m.store, m.cfg, img, rc).detections();
  const auto h1 = hybrid_detect(m.store, m.cfg, img, rc, flip).detections();
  CHECK(h0 == h1);
}
