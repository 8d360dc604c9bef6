#include "smn/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "smn/error.hpp"

namespace smn {

namespace {

using nlohmann::json;

// Field visitors. `fields(v, obj)` lists a struct's members once; Writer turns
// them into JSON and Reader fills them back with path-qualified diagnostics.
struct Writer;
struct Reader;

template <typename V> void fields(V& v, ClassSpec& c) {
  v.field("name", c.name);
  v.field("shape", c.shape);
  v.field("color", c.color);
  v.field("min_size", c.min_size);
  v.field("max_size", c.max_size);
  v.field("frequency", c.frequency);
}

template <typename V> void fields(V& v, ContextRule& r) {
  v.field("trigger", r.trigger);
  v.field("dependent", r.dependent);
  v.field("relation", r.relation);
  v.field("min_distance", r.min_distance);
  v.field("max_distance", r.max_distance);
  v.field("contrast", r.contrast);
}

template <typename V> void fields(V& v, DecoySpec& d) {
  v.field("mimic", d.mimic);
  v.field("min_count", d.min_count);
  v.field("max_count", d.max_count);
  v.field("min_trigger_distance", d.min_trigger_distance);
}

template <typename V> void fields(V& v, SceneConfig& s) {
  v.field("image_h", s.image_h);
  v.field("image_w", s.image_w);
  v.field("classes", s.classes);
  v.field("min_instances", s.min_instances);
  v.field("max_instances", s.max_instances);
  v.field("max_pair_iou", s.max_pair_iou);
  v.field("noise_std", s.noise_std);
  v.field("background", s.background);
  v.field("rules", s.rules);
  v.field("decoys", s.decoys);
  v.field("single_class_scenes", s.single_class_scenes);
  v.field("stride", s.stride);
  v.field("max_retries", s.max_retries);
}

template <typename V> void fields(V& v, DetectorConfig& d) {
  v.field("stride", d.stride);
  v.field("channels", d.channels);
  v.field("rpn_channels", d.rpn_channels);
  v.field("anchor_scales", d.anchor_scales);
  v.field("anchor_ratios", d.anchor_ratios);
  v.field("proposals", d.proposals);
  v.field("non_aggressive", d.non_aggressive);
  v.field("rpn_nms_iou", d.rpn_nms_iou);
  v.field("nms_iou", d.nms_iou);
  v.field("pool", d.pool);
  v.field("fc", d.fc);
  v.field("num_classes", d.num_classes);
  v.field("rpn_positive_iou", d.rpn_positive_iou);
  v.field("rpn_negative_iou", d.rpn_negative_iou);
  v.field("fg_iou", d.fg_iou);
  v.field("rpn_delta_weights", d.rpn_delta_weights);
  v.field("cls_delta_weights", d.cls_delta_weights);
  v.field("head_init", d.head_init);
  v.field("score_floor", d.score_floor);
  v.field("max_detections", d.max_detections);
}

template <typename V> void fields(V& v, MemoryConfig& m) {
  v.field("prior_h", m.prior_h);
  v.field("prior_w", m.prior_w);
  v.field("depth", m.depth);
  v.field("patch", m.patch);
}

template <typename V> void fields(V& v, ContextConfig& c) {
  v.field("depth", c.depth);
  v.field("kernel", c.kernel);
  v.field("channels", c.channels);
  v.field("residual_period", c.residual_period);
  v.field("design", c.design);
  v.field("recon_weight", c.recon_weight);
  v.field("head_init", c.head_init);
  v.field("fc7_init", c.fc7_init);
}

template <typename V> void fields(V& v, RolloutConfig& r) {
  v.field("iterations", r.iterations);
  v.field("n1", r.n1);
  v.field("n2", r.n2);
  v.field("emission", r.emission);
  v.field("emission_floor", r.emission_floor);
  v.field("selection_threshold", r.selection_threshold);
  v.field("proposals", r.proposals);
}

template <typename V> void fields(V& v, CurriculumStage& s) {
  v.field("unroll", s.unroll);
  v.field("steps", s.steps);
}

template <typename V> void fields(V& v, TrainConfig& t) {
  v.field("steps", t.steps);
  v.field("batch", t.batch);
  v.field("lr", t.lr);
  v.field("lr_drop_step", t.lr_drop_step);
  v.field("lr_drop", t.lr_drop);
  v.field("momentum", t.momentum);
  v.field("clip_norm", t.clip_norm);
  v.field("rpn_sample", t.rpn_sample);
  v.field("rpn_ratios", t.rpn_ratios);
  v.field("roi_sample", t.roi_sample);
  v.field("roi_ratios", t.roi_ratios);
  v.field("rpn_cls_weight", t.rpn_cls_weight);
  v.field("rpn_reg_weight", t.rpn_reg_weight);
  v.field("cls_weight", t.cls_weight);
  v.field("cls_reg_weight", t.cls_reg_weight);
  v.field("unroll", t.unroll);
  v.field("curriculum", t.curriculum);
  v.field("checkpoint_every", t.checkpoint_every);
}

template <typename V> void fields(V& v, EvalConfig& e) {
  v.field("iou_thresholds", e.iou_thresholds);
  v.field("max_detections", e.max_detections);
  v.field("ar_cap", e.ar_cap);
  v.field("small_max", e.small_max);
  v.field("medium_max", e.medium_max);
}

template <typename V> void fields(V& v, Protocol& p) {
  v.field("name", p.name);
  v.field("cap", p.cap);
  v.field("emission", p.emission);
  v.field("proposals", p.proposals);
  v.field("n1", p.n1);
}

// The "train" section groups the three stages; "eval" carries the protocols.
struct TrainSection {
  TrainConfig base, smn, mlp;
};
template <typename V> void fields(V& v, TrainSection& t) {
  v.field("base", t.base);
  v.field("smn", t.smn);
  v.field("mlp", t.mlp);
}

struct EvalSection {
  EvalConfig eval;
  std::vector<Protocol> protocols;
};
template <typename V> void fields(V& v, EvalSection& e) {
  fields(v, e.eval);
  v.field("protocols", e.protocols);
}

struct SceneSection {
  SceneConfig scene;
  int train_scenes = 0, test_scenes = 0;
};
template <typename V> void fields(V& v, SceneSection& s) {
  fields(v, s.scene);
  v.field("train_scenes", s.train_scenes);
  v.field("test_scenes", s.test_scenes);
}

template <typename T>
concept Visitable = requires(Writer& w, T& t) { fields(w, t); };

// Enum <-> string tables.
std::string enum_name(ShapeKind k) { return to_string(k); }
std::string enum_name(Relation r) { return to_string(r); }
std::string enum_name(FusionDesign d) { return to_string(d); }
std::string enum_name(Emission e) { return to_string(e); }
std::string enum_name(ProposalMode m) { return to_string(m); }
void enum_parse(const std::string& s, ShapeKind& k) { k = shape_from_string(s); }
void enum_parse(const std::string& s, Relation& r) { r = relation_from_string(s); }
void enum_parse(const std::string& s, FusionDesign& d) { d = design_from_string(s); }
void enum_parse(const std::string& s, Emission& e) { e = emission_from_string(s); }
void enum_parse(const std::string& s, ProposalMode& m) { m = proposal_mode_from_string(s); }

template <typename T>
concept NamedEnum = std::is_enum_v<T> && requires(T t) { enum_name(t); };

[[noreturn]] void field_error(const std::string& path, const std::string& msg) {
  throw ConfigError(path + ": " + msg);
}

json to_json(const auto& v);

struct Writer {
  json j = json::object();
  template <typename T> void field(const char* key, T& v) { j[key] = to_json(v); }
};

json to_json(const auto& v) {
  using T = std::decay_t<decltype(v)>;
  if constexpr (Visitable<T>) {
    Writer w;
    fields(w, const_cast<T&>(v));
    return w.j;
  } else if constexpr (NamedEnum<T>) {
    return enum_name(v);
  } else if constexpr (std::is_same_v<T, SampleRatios>) {
    return json::array({v.positive, v.flipped, v.negative});
  } else if constexpr (requires { v.begin(); } && !std::is_same_v<T, std::string>) {
    json a = json::array();
    for (const auto& e : v) a.push_back(to_json(e));
    return a;
  } else {
    return json(v);
  }
}

template <typename T> void from_json(const json& j, T& out, const std::string& path);

struct Reader {
  const json& j;
  std::string path;
  std::set<std::string> seen;
  template <typename T> void field(const char* key, T& v) {
    seen.insert(key);
    if (j.contains(key)) from_json(j.at(key), v, path.empty() ? key : path + "." + key);
  }
  void reject_unknown() const {
    for (auto it = j.begin(); it != j.end(); ++it)
      if (!seen.count(it.key()))
        field_error(path.empty() ? it.key() : path + "." + it.key(), "unknown field");
  }
};

template <typename T> void from_json(const json& j, T& out, const std::string& path) {
  if constexpr (Visitable<T>) {
    if (!j.is_object()) field_error(path, "expected an object");
    Reader r{j, path, {}};
    fields(r, out);
    r.reject_unknown();
  } else if constexpr (NamedEnum<T>) {
    if (!j.is_string()) field_error(path, "expected a string");
    try {
      enum_parse(j.get<std::string>(), out);
    } catch (const Error& e) {
      field_error(path, e.what());
    }
  } else if constexpr (std::is_same_v<T, SampleRatios>) {
    std::vector<int> v;
    from_json(j, v, path);
    if (v.size() != 3) field_error(path, "expected [positive, flipped, negative]");
    out = {v[0], v[1], v[2]};
  } else if constexpr (std::is_same_v<T, std::array<double, 3>> ||
                       std::is_same_v<T, std::array<double, 4>>) {
    std::vector<double> v;
    from_json(j, v, path);
    if (v.size() != out.size())
      field_error(path, "expected an array of " + std::to_string(out.size()) + " numbers");
    std::copy(v.begin(), v.end(), out.begin());
  } else if constexpr (requires { out.push_back(typename T::value_type{}); } &&
                       !std::is_same_v<T, std::string>) {
    if (!j.is_array()) field_error(path, "expected an array");
    T result;
    for (std::size_t i = 0; i < j.size(); ++i) {
      typename T::value_type e{};
      from_json(j[i], e, path + "[" + std::to_string(i) + "]");
      result.push_back(std::move(e));
    }
    out = std::move(result);
  } else if constexpr (std::is_same_v<T, bool>) {
    if (!j.is_boolean()) field_error(path, "expected true or false");
    out = j.get<bool>();
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!j.is_string()) field_error(path, "expected a string");
    out = j.get<std::string>();
  } else if constexpr (std::is_integral_v<T>) {
    if (!j.is_number_integer()) field_error(path, "expected an integer");
    if constexpr (std::is_unsigned_v<T>) {
      if (j.is_number_unsigned()) out = j.get<T>();
      else field_error(path, "expected a non-negative integer");
    } else {
      out = j.get<T>();
    }
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!j.is_number()) field_error(path, "expected a number");
    out = j.get<T>();
  } else {
    static_assert(sizeof(T) == 0, "unsupported config field type");
  }
}

json run_to_json(const RunConfig& c) {
  json j = json::object();
  j["profile"] = c.profile;
  j["seed"] = c.seed;
  j["scene"] = to_json(SceneSection{c.scene, c.train_scenes, c.test_scenes});
  j["detector"] = to_json(c.model.detector);
  j["memory"] = to_json(c.model.memory);
  j["context"] = to_json(c.model.context);
  j["rollout"] = to_json(c.rollout);
  j["train"] = to_json(TrainSection{c.train_base, c.train_smn, c.train_mlp});
  j["eval"] = to_json(EvalSection{c.eval, c.protocols});
  j["citations"] = c.citations;
  return j;
}

RunConfig run_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  std::string profile = "toy";
  if (j.contains("profile")) from_json(j.at("profile"), profile, "profile");
  RunConfig c = RunConfig::for_profile(profile);
  static const std::set<std::string> known{"profile", "seed",    "scene", "detector", "memory",
                                           "context", "rollout", "train", "eval",     "citations"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key())) field_error(it.key(), "unknown field");
  if (j.contains("seed")) from_json(j.at("seed"), c.seed, "seed");
  if (j.contains("scene")) {
    SceneSection s{c.scene, c.train_scenes, c.test_scenes};
    from_json(j.at("scene"), s, "scene");
    c.scene = s.scene;
    c.train_scenes = s.train_scenes;
    c.test_scenes = s.test_scenes;
  }
  if (j.contains("detector")) from_json(j.at("detector"), c.model.detector, "detector");
  if (j.contains("memory")) from_json(j.at("memory"), c.model.memory, "memory");
  if (j.contains("context")) from_json(j.at("context"), c.model.context, "context");
  if (j.contains("rollout")) from_json(j.at("rollout"), c.rollout, "rollout");
  if (j.contains("train")) {
    TrainSection t{c.train_base, c.train_smn, c.train_mlp};
    from_json(j.at("train"), t, "train");
    c.train_base = t.base;
    c.train_smn = t.smn;
    c.train_mlp = t.mlp;
  }
  if (j.contains("eval")) {
    EvalSection e{c.eval, c.protocols};
    from_json(j.at("eval"), e, "eval");
    c.eval = e.eval;
    c.protocols = e.protocols;
  }
  if (j.contains("citations")) {
    const json& cj = j.at("citations");
    if (!cj.is_object()) field_error("citations", "expected an object of strings");
    c.citations.clear();
    for (auto it = cj.begin(); it != cj.end(); ++it) {
      if (!it.value().is_string()) field_error("citations." + it.key(), "expected a string");
      c.citations[it.key()] = it.value().get<std::string>();
    }
  }
  c.validate();
  return c;
}

json parse_text(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    throw ConfigError("config: line " + std::to_string(line) + ", column " +
                      std::to_string(col) + ": malformed JSON");
  }
}

std::uint64_t hash_json(std::uint64_t seed, const json& j) {
  const std::string s = j.dump();
  return fnv1a(s.data(), s.size(), seed);
}

std::map<std::string, std::string> default_citations() {
  return {
      {"seed", "all randomness derives from this value"},
      {"scene", "synthetic stand-in for the detection benchmark; the low-contrast ball near a "
                "racket plays the tiny-object-in-context role"},
      {"detector.stride", "backbone feature map at a fixed fraction of the image (1/16 at full "
                          "scale, 1/4 here)"},
      {"detector.proposals", "NMS-based region sampling keeping the top k (300 at full scale)"},
      {"detector.non_aggressive", "top regions taken without NMS (5k at full scale)"},
      {"detector.pool", "RoI features cropped and resized before the fc layers"},
      {"memory.depth", "memory cell dimension D (256 at full scale)"},
      {"memory.patch", "memory patch written per detection, matching the RoI crop size"},
      {"context.depth", "five-layer context ConvNet with residual connections"},
      {"context.design", "design d: base alone at the first iteration, memory added with the "
                         "base gradient stopped afterwards"},
      {"context.recon_weight", "reconstruction loss weight on the memory branches"},
      {"context.head_init", "manually set per-branch init variance; memory heads start near "
                            "zero"},
      {"rollout.iterations", "N unrolled detection iterations (10)"},
      {"rollout.emission", "soft max-prediction for the selected box, so one box may carry "
                           "several classes"},
      {"rollout.n1", "hybrid mode: first N1 detections from the base detector after per-class "
                     "NMS (50 at full scale)"},
      {"rollout.n2", "hybrid mode: later N2 iterations run the memory (10)"},
      {"train.base.lr", "initial learning rate 1e-3, reduced to 1e-4 two thirds into training"},
      {"train.base.steps", "fixed step budget (30k at full scale)"},
      {"train.smn.rpn_ratios", "positive/flipped/negative sampling ratio 2:1:1 for proposals"},
      {"train.smn.roi_ratios", "positive/flipped/negative sampling ratio 1:1:2 for regions"},
      {"train.smn.curriculum", "bootstrap longer roll-outs from shorter ones; de-duplication "
                               "is learned at N from 2 to 4"},
      {"train.smn.momentum", "SGD with momentum 0.9"},
      {"train.mlp", "MLP baseline: the context ConvNet stacked on backbone features with the "
                    "same output modules"},
      {"eval", "COCO-style AP/AR with detection caps N of 5/10 and size buckets scaled to the "
               "image area"},
  };
}

}  // namespace

RunConfig RunConfig::toy() {
  RunConfig c;
  c.profile = "toy";
  c.scene = SceneConfig::toy_default();
  c.model.detector.num_classes = c.scene.num_classes();

  c.train_base.steps = 3000;
  c.train_base.lr_drop_step = 2000;
  c.train_base.rpn_ratios = {1, 0, 1};
  c.train_base.roi_ratios = {1, 0, 3};

  c.train_smn.curriculum = {{2, 1000}, {4, 1000}, {10, 1000}};
  c.train_smn.steps = 3000;
  c.train_smn.lr_drop_step = 2000;

  c.train_mlp = c.train_base;

  c.protocols = {
      {"n5", 5, Emission::softmax, ProposalMode::nms_top_k, 0},
      {"n10", 10, Emission::softmax, ProposalMode::nms_top_k, 0},
      {"n10-hardmax", 10, Emission::hardmax, ProposalMode::nms_top_k, 0},
      {"n10-topk", 10, Emission::softmax, ProposalMode::non_aggressive, 0},
      {"hybrid-n20", 20, Emission::softmax, ProposalMode::nms_top_k, 10},
  };
  c.citations = default_citations();
  return c;
}

RunConfig RunConfig::paper_reference() {
  RunConfig c = toy();
  c.profile = "paper-reference";
  c.scene.image_h = 640;
  c.scene.image_w = 640;
  c.scene.stride = 16;
  c.scene.max_instances = 20;
  DetectorConfig& d = c.model.detector;
  d.stride = 16;
  d.channels = {64, 64, 128, 128, 256, 256, 512, 512};
  d.rpn_channels = 512;
  d.anchor_scales = {128.0, 256.0, 512.0};
  d.proposals = 300;
  d.non_aggressive = 5000;
  d.fc = 4096;
  c.model.memory.depth = 256;
  c.model.memory.prior_h = 40;
  c.model.memory.prior_w = 40;
  c.model.context.channels = 512;
  for (TrainConfig* t : {&c.train_base, &c.train_smn, &c.train_mlp}) {
    t->steps = 30000;
    t->lr_drop_step = 20000;
    t->roi_sample = 128;
    t->rpn_sample = 256;
    t->batch = 1;
  }
  c.train_smn.curriculum = {{2, 10000}, {5, 10000}, {10, 10000}};
  c.train_scenes = 35000;
  c.test_scenes = 5000;
  c.protocols = {
      {"n5", 5, Emission::softmax, ProposalMode::nms_top_k, 0},
      {"n10", 10, Emission::softmax, ProposalMode::nms_top_k, 0},
      {"hybrid-n60", 60, Emission::softmax, ProposalMode::non_aggressive, 50},
  };
  return c;
}

RunConfig RunConfig::for_profile(const std::string& name) {
  if (name == "toy") return toy();
  if (name == "paper-reference") return paper_reference();
  throw ConfigError("profile: expected toy or paper-reference, got '" + name + "'");
}

void RunConfig::validate() const {
  scene.validate();
  const DetectorConfig& d = model.detector;
  d.validate(scene.image_h, scene.image_w);
  if (d.num_classes != scene.num_classes())
    throw ConfigError("detector.num_classes: " + std::to_string(d.num_classes) +
                      " but the scene defines " + std::to_string(scene.num_classes()) +
                      " classes");
  if (scene.stride != d.stride)
    throw ConfigError("scene.stride: must equal detector.stride");
  model.memory.validate();
  model.context.validate();
  rollout.validate();
  train_base.validate(false);
  train_smn.validate(true);
  train_mlp.validate(false);
  eval.validate();
  if (train_scenes <= 0) throw ConfigError("scene.train_scenes: must be > 0");
  if (test_scenes <= 0) throw ConfigError("scene.test_scenes: must be > 0");
  std::set<std::string> names;
  for (std::size_t i = 0; i < protocols.size(); ++i) {
    const Protocol& p = protocols[i];
    const std::string where = "eval.protocols[" + std::to_string(i) + "]";
    if (p.cap <= 0) throw ConfigError(where + ".cap: must be > 0");
    if (p.n1 < 0 || p.n1 > p.cap) throw ConfigError(where + ".n1: must be in [0, cap]");
    if (p.name.empty() || !names.insert(p.name).second)
      throw ConfigError(where + ".name: must be non-empty and unique");
  }
}

void RunConfig::require_executable() const {
  if (profile == "paper-reference")
    throw ConfigError(
        "profile: paper-reference documents the full-scale settings and does not run at desk "
        "scale; use --profile toy");
}

RunConfig parse_run_config(const std::string& text) { return run_from_json(parse_text(text)); }

std::string serialize_run_config(const RunConfig& cfg) { return run_to_json(cfg).dump(2) + "\n"; }

RunConfig apply_overrides(const RunConfig& cfg, const std::vector<std::string>& sets) {
  json j = run_to_json(cfg);
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0)
      throw ConfigError("--set " + s + ": expected key=value");
    const std::string key = s.substr(0, eq), raw = s.substr(eq + 1);
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    json* node = &j;
    std::stringstream ss(key);
    std::string part, walked;
    while (std::getline(ss, part, '.')) {
      walked += (walked.empty() ? "" : ".") + part;
      if (node->is_array()) {
        std::size_t idx = 0;
        try {
          idx = std::stoul(part);
        } catch (const std::exception&) {
          throw ConfigError("--set " + key + ": '" + walked + "' needs an array index");
        }
        if (idx >= node->size()) throw ConfigError("--set " + key + ": index out of range");
        node = &(*node)[idx];
      } else if (node->is_object() && node->contains(part)) {
        node = &(*node)[part];
      } else {
        throw ConfigError("--set " + key + ": unknown field '" + walked + "'");
      }
    }
    *node = value;
  }
  return run_from_json(j);
}

RunConfig load_run_config(const std::filesystem::path& path, const std::string& profile,
                          const std::vector<std::string>& sets) {
  std::ifstream in(path);
  if (!in) throw MissingArtifact("config file not found: " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  json j = parse_text(buf.str());
  if (!profile.empty()) {
    if (!j.is_object()) throw ConfigError("config: top level must be an object");
    j["profile"] = profile;
  }
  return apply_overrides(run_from_json(j), sets);
}

Dataset generate_split(const RunConfig& cfg, Split split) {
  Dataset d;
  d.config_digest = dataset_config_digest(cfg);
  const bool train = split == Split::train;
  // Scene seeds are base + index; bases 2^40 apart keep the splits disjoint.
  const std::uint64_t base = Rng::mix(cfg.seed) & ~((std::uint64_t{1} << 41) - 1);
  d.records = generate_scenes(cfg.scene, base + (train ? 0 : std::uint64_t{1} << 40),
                              train ? cfg.train_scenes : cfg.test_scenes);
  return d;
}

std::uint64_t dataset_config_digest(const RunConfig& c) {
  json j = to_json(SceneSection{c.scene, c.train_scenes, c.test_scenes});
  j["seed"] = c.seed;
  return hash_json(0x5ce9eULL, j);
}

std::uint64_t base_config_digest(const RunConfig& c) {
  return hash_json(hash_json(dataset_config_digest(c), to_json(c.model.detector)),
                   to_json(c.train_base));
}

std::uint64_t smn_config_digest(const RunConfig& c) {
  json j = json::object();
  j["memory"] = to_json(c.model.memory);
  j["context"] = to_json(c.model.context);
  j["train"] = to_json(c.train_smn);
  return hash_json(base_config_digest(c), j);
}

std::uint64_t mlp_config_digest(const RunConfig& c) {
  json j = json::object();
  j["memory"] = to_json(c.model.memory);
  j["context"] = to_json(c.model.context);
  j["train"] = to_json(c.train_mlp);
  return hash_json(base_config_digest(c) ^ 0x6d6c70ULL, j);
}

}  // namespace smn
