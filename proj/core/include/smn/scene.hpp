#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "smn/box.hpp"
#include "smn/tensor.hpp"

namespace smn {

enum class ShapeKind { circle, square, triangle, bar, diamond, ring, cross };
enum class Relation { near, above, inside };

using Color = std::array<double, 3>;

struct ClassSpec {
  std::string name;
  ShapeKind shape = ShapeKind::square;
  Color color{1.0, 0.0, 0.0};
  double min_size = 8.0;  // pixels, box height
  double max_size = 16.0;
  double frequency = 1.0;  // relative sampling weight
};

/// Every instance of `dependent` is placed in `relation` to some instance of
/// `trigger`, with center distance in [min_distance, max_distance] pixels, and is
/// rendered with its color pulled toward the background by `contrast`.
struct ContextRule {
  int trigger = 0;
  int dependent = 1;
  Relation relation = Relation::near;
  double min_distance = 0.0;
  double max_distance = 16.0;
  double contrast = 1.0;  // in (0, 1]
};

/// Unannotated look-alikes of a class, placed away from rule triggers.
struct DecoySpec {
  int mimic = 0;
  int min_count = 0;
  int max_count = 0;
  double min_trigger_distance = 20.0;
};

struct SceneConfig {
  int image_h = 64;
  int image_w = 64;
  std::vector<ClassSpec> classes;
  int min_instances = 1;
  int max_instances = 6;
  double max_pair_iou = 0.3;
  double noise_std = 0.02;
  Color background{0.45, 0.45, 0.45};
  std::vector<ContextRule> rules;
  std::vector<DecoySpec> decoys;
  bool single_class_scenes = false;
  int stride = 4;  // image extents must be divisible by the detector stride
  int max_retries = 500;

  int num_classes() const { return static_cast<int>(classes.size()); }
  int class_index(const std::string& name) const;  // -1 if absent
  void validate() const;  // throws ConfigError

  static SceneConfig toy_default();
};

struct Instance {
  int cls = 0;
  BoundingBox box;
  friend bool operator==(const Instance&, const Instance&) = default;
};

struct SceneRecord {
  Tensor image;  // H x W x 3, values k/255
  std::vector<Instance> instances;
  std::uint64_t seed = 0;
  friend bool operator==(const SceneRecord&, const SceneRecord&) = default;
};

/// Deterministic in (config, seed). Throws ValueError when rules and overlap
/// policy cannot be satisfied within config.max_retries attempts.
SceneRecord generate_scene(const SceneConfig& config, std::uint64_t seed);

/// Scenes for seeds base_seed + 0 .. base_seed + count - 1.
std::vector<SceneRecord> generate_scenes(const SceneConfig& config, std::uint64_t base_seed,
                                         std::size_t count);

/// Standalone rule checker: list of human-readable violations (empty if sound).
std::vector<std::string> check_scene(const SceneConfig& config, const SceneRecord& record);

/// Shape distance used by rules: Euclidean distance between box centers.
double center_distance(const BoundingBox& a, const BoundingBox& b);
bool relation_holds(const ContextRule& rule, const BoundingBox& trigger,
                    const BoundingBox& dependent);

// Dataset file: "SMND", u32 version, u64 config digest, u64 record count, then
// per record: u64 seed, u32 H, u32 W, u32 C, H*W*C bytes (value*255),
// u32 instance count, per instance u32 class and 4 f64 box coordinates.
struct Dataset {
  std::uint64_t config_digest = 0;
  std::vector<SceneRecord> records;
};

void write_dataset(const std::filesystem::path& path, const Dataset& dataset);
Dataset read_dataset(const std::filesystem::path& path);
void write_dataset(std::ostream& out, const Dataset& dataset);
Dataset read_dataset(std::istream& in);
std::uint64_t dataset_digest(const Dataset& dataset);

/// One JSON object per line: {"seed":..,"boxes":[[x1,y1,x2,y2],..],"classes":[..]}.
void write_annotations_jsonl(std::ostream& out, const std::vector<SceneRecord>& records);

std::string to_string(ShapeKind k);
std::string to_string(Relation r);
ShapeKind shape_from_string(const std::string& s);
Relation relation_from_string(const std::string& s);

}  // namespace smn
