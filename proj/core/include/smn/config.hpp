#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "smn/eval.hpp"
#include "smn/model.hpp"
#include "smn/rollout.hpp"
#include "smn/scene.hpp"
#include "smn/trainer.hpp"

namespace smn {

/// The whole pipeline's configuration. Profile "toy" runs on a desk CPU;
/// "paper-reference" records the full-scale settings for documentation and
/// refuses to execute.
struct RunConfig {
  std::string profile = "toy";
  std::uint64_t seed = 1;
  SceneConfig scene;
  int train_scenes = 2000;
  int test_scenes = 200;
  ModelConfig model;
  RolloutConfig rollout;
  TrainConfig train_base;
  TrainConfig train_smn;
  TrainConfig train_mlp;
  EvalConfig eval;
  std::vector<Protocol> protocols;
  std::map<std::string, std::string> citations;  // dotted field -> source note

  static RunConfig toy();
  static RunConfig paper_reference();
  static RunConfig for_profile(const std::string& name);  // ConfigError if unknown

  /// Cross-section checks; throws ConfigError naming the field.
  void validate() const;
  /// Throws ConfigError unless the profile can run at desk scale.
  void require_executable() const;
};

/// Parses a JSON document over the defaults of its "profile" (toy when
/// absent). Fields left out keep their defaults; unknown fields, wrong types
/// and malformed JSON raise ConfigError with the line or dotted field path.
RunConfig parse_run_config(const std::string& text);
std::string serialize_run_config(const RunConfig& cfg);

/// Applies "a.b.c=value" overrides. The value is read as JSON when it parses,
/// else as a string. The path must name an existing field.
RunConfig apply_overrides(const RunConfig& cfg, const std::vector<std::string>& sets);

/// Reads the file (MissingArtifact if absent), switches profile when
/// `profile` is non-empty, then applies overrides.
RunConfig load_run_config(const std::filesystem::path& path, const std::string& profile,
                          const std::vector<std::string>& sets);

enum class Split { train, test };

/// The train or test scenes of a run, seeded from cfg.seed and stamped with
/// dataset_config_digest. The two splits use disjoint seed streams.
Dataset generate_split(const RunConfig& cfg, Split split);

/// Digests over the fields each artifact depends on. A checkpoint stores the
/// digest of the stage that wrote it.
std::uint64_t dataset_config_digest(const RunConfig& cfg);
std::uint64_t base_config_digest(const RunConfig& cfg);
std::uint64_t smn_config_digest(const RunConfig& cfg);
std::uint64_t mlp_config_digest(const RunConfig& cfg);

}  // namespace smn
