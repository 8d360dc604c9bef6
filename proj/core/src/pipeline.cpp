#include "smn/pipeline.hpp"

#include "smn/error.hpp"

namespace smn {

TrainConfig stage_config(const RunConfig& cfg, ModelKind kind) {
  TrainConfig tc;
  std::uint64_t stage = 0;
  switch (kind) {
    case ModelKind::base: tc = cfg.train_base; stage = 1; break;
    case ModelKind::smn: tc = cfg.train_smn; stage = 2; break;
    case ModelKind::mlp: tc = cfg.train_mlp; stage = 3; break;
  }
  tc.seed = Rng::mix(cfg.seed + stage);
  return tc;
}

std::uint64_t stage_digest(const RunConfig& cfg, ModelKind kind) {
  switch (kind) {
    case ModelKind::base: return base_config_digest(cfg);
    case ModelKind::smn: return smn_config_digest(cfg);
    case ModelKind::mlp: return mlp_config_digest(cfg);
  }
  return 0;
}

StageResult run_base_stage(const RunConfig& cfg, const Dataset& train, const TrainOptions& opts) {
  StageResult r;
  Rng rng(cfg.seed);
  init_model_params(r.params, cfg.model, ModelKind::base, rng);
  r.log = train_base(r.params, cfg.model, train, stage_config(cfg, ModelKind::base), 0, opts);
  return r;
}

StageResult run_memory_stage(const RunConfig& cfg, ModelKind kind, const ParamStore& base,
                             const Dataset& train, const TrainOptions& opts) {
  if (kind == ModelKind::base) throw ConfigError("run_memory_stage: expected smn or mlp");
  StageResult r;
  Rng rng(cfg.seed);
  init_model_params(r.params, cfg.model, kind, rng);
  r.params.load_from(base, "base/");
  const TrainConfig tc = stage_config(cfg, kind);
  if (kind == ModelKind::smn) {
    std::vector<CurriculumStage> schedule = tc.curriculum;
    if (schedule.empty()) schedule = {{tc.unroll, tc.steps}};
    r.log = curriculum_train(r.params, cfg.model, train, tc, schedule, 0, opts);
  } else {
    r.log = train_mlp(r.params, cfg.model, train, tc, 0, opts);
  }
  return r;
}

}  // namespace smn
