#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "smn/model.hpp"
#include "smn/scene.hpp"
#include "smn/targets.hpp"

namespace smn {

struct CurriculumStage {
  int unroll = 2;  // N
  int steps = 0;
};

struct TrainConfig {
  int steps = 3000;
  int batch = 2;
  double lr = 1e-3;
  int lr_drop_step = 2000;  // global step at which lr is multiplied by lr_drop
  double lr_drop = 0.1;
  double momentum = 0.9;
  double clip_norm = 0.0;  // global gradient-norm clip, 0 disables
  int rpn_sample = 64;
  SampleRatios rpn_ratios{2, 1, 1};
  int roi_sample = 32;
  SampleRatios roi_ratios{1, 1, 2};
  double rpn_cls_weight = 1.0;
  double rpn_reg_weight = 1.0;
  double cls_weight = 1.0;
  double cls_reg_weight = 1.0;
  int unroll = 2;
  std::vector<CurriculumStage> curriculum;  // empty: a single stage of `steps` at `unroll`
  std::uint64_t seed = 1;
  int checkpoint_every = 500;
  void validate(bool smn_stage) const;
  double lr_at(std::uint64_t step) const;
};

/// One row of the training log.
struct LossRecord {
  std::uint64_t step = 0;
  double lr = 0.0;
  double rpn_cls = 0.0;
  double rpn_reg = 0.0;
  double cls = 0.0;
  double cls_reg = 0.0;
  double recon = 0.0;
  double dedup = 0.0;  // classification loss restricted to flipped RoIs (logged only)
  double total = 0.0;
  double seconds = 0.0;
};

struct TrainLog {
  std::vector<LossRecord> records;
  void write_csv(std::ostream& out) const;
};

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: no checkpoints or logs on disk
  std::uint64_t config_digest = 0;
  std::function<void(const LossRecord&)> on_step;  // progress hook
};

/// Image indices of the batch at a global step: a seeded permutation per epoch.
std::vector<std::size_t> batch_indices(std::size_t dataset_size, int batch, std::uint64_t seed,
                                       std::uint64_t step);

/// Base detector loss for one image, accumulated into the store's gradients
/// when backprop is set. Returns the per-term values.
LossRecord base_image_loss(ParamStore& store, const ModelConfig& cfg, const TrainConfig& tc,
                           const SceneRecord& rec, Rng& rng, bool backprop);

/// Joint RPN + classification training of the base detector.
TrainLog train_base(ParamStore& store, const ModelConfig& cfg, const Dataset& data,
                    const TrainConfig& tc, std::uint64_t start_step = 0,
                    const TrainOptions& opts = {});

/// Unrolls `unroll` iterations on one image and backpropagates through the
/// whole chain. Base weights are frozen under design d and receive no gradient.
LossRecord smn_image_loss(ParamStore& store, const ModelConfig& cfg, const TrainConfig& tc,
                          const SceneRecord& rec, int unroll, Rng& rng, bool backprop);

/// One optimizer step over a batch. Returns the batch-mean losses.
LossRecord smn_train_step(ParamStore& store, const ModelConfig& cfg, const TrainConfig& tc,
                          const Dataset& data, std::uint64_t step, int unroll);

TrainLog train_smn(ParamStore& store, const ModelConfig& cfg, const Dataset& data,
                   const TrainConfig& tc, int unroll, int steps, std::uint64_t start_step = 0,
                   const TrainOptions& opts = {});

/// Runs the stages in order, each continuing from the previous stage's weights
/// and optimizer state. Unroll counts must be non-decreasing.
TrainLog curriculum_train(ParamStore& store, const ModelConfig& cfg, const Dataset& data,
                          const TrainConfig& tc, const std::vector<CurriculumStage>& schedule,
                          std::uint64_t start_step = 0, const TrainOptions& opts = {});

/// Single-shot training of the mlp baseline's context net and heads on top of
/// a frozen base detector.
TrainLog train_mlp(ParamStore& store, const ModelConfig& cfg, const Dataset& data,
                   const TrainConfig& tc, std::uint64_t start_step = 0,
                   const TrainOptions& opts = {});

/// Parameter prefixes that a training stage updates.
std::vector<std::string> smn_prefixes();

}  // namespace smn
