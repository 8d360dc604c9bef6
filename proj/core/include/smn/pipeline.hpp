#pragma once

#include <cstdint>

#include "smn/config.hpp"

namespace smn {

/// Seeds of the training stages: base 1, smn 2, mlp 3, each mixed with the run seed.
TrainConfig stage_config(const RunConfig& cfg, ModelKind kind);

/// Digest a checkpoint of the given kind is stamped with.
std::uint64_t stage_digest(const RunConfig& cfg, ModelKind kind);

struct StageResult {
  ParamStore params;
  TrainLog log;
};

/// Trains the base detector from a fresh init seeded by cfg.seed.
StageResult run_base_stage(const RunConfig& cfg, const Dataset& train,
                           const TrainOptions& opts = {});

/// Trains the smn (over its curriculum, or one stage at train.smn.unroll when
/// the curriculum is empty) or mlp model on top of a frozen base.
StageResult run_memory_stage(const RunConfig& cfg, ModelKind kind, const ParamStore& base,
                             const Dataset& train, const TrainOptions& opts = {});

}  // namespace smn
