#pragma once

#include "smn/config.hpp"
#include "smn/rng.hpp"
#include "smn/tensor.hpp"

namespace fixture {

inline smn::Tensor random_tensor(smn::Shape shape, smn::Rng& rng, double lo = -1.0,
                                 double hi = 1.0) {
  smn::Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

// The toy model shrunk further so unit tests train in seconds.
inline smn::ModelConfig tiny_model(int num_classes = 4) {
  smn::ModelConfig m;
  m.detector.channels = {8, 8, 8, 8};
  m.detector.rpn_channels = 8;
  m.detector.fc = 16;
  m.detector.num_classes = num_classes;
  m.memory.depth = 4;
  m.context.channels = 8;
  return m;
}

// Base-stage sampling has no flipped stratum.
inline smn::TrainConfig quick_train(int steps, bool smn_stage = false) {
  smn::TrainConfig tc;
  if (!smn_stage) {
    tc.rpn_ratios = {1, 0, 1};
    tc.roi_ratios = {1, 0, 3};
  }
  tc.steps = steps;
  tc.lr_drop_step = steps;
  tc.rpn_sample = 32;
  tc.roi_sample = 16;
  tc.checkpoint_every = 0;
  return tc;
}

}  // namespace fixture
