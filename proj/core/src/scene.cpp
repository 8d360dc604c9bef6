#include "smn/scene.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "json.hpp"
#include "smn/error.hpp"
#include "smn/rng.hpp"

namespace smn {

namespace {

constexpr std::uint32_t kDatasetVersion = 1;
constexpr char kDatasetMagic[4] = {'S', 'M', 'N', 'D'};
constexpr int kPlacementTries = 50;

double shape_aspect(ShapeKind k) { return k == ShapeKind::bar ? 3.0 : 1.0; }

// Point-in-shape test in box-normalized coordinates u, v in [0, 1].
bool inside_shape(ShapeKind k, double u, double v) {
  switch (k) {
    case ShapeKind::square:
    case ShapeKind::bar:
      return true;
    case ShapeKind::circle: {
      const double du = u - 0.5, dv = v - 0.5;
      return du * du + dv * dv <= 0.25;
    }
    case ShapeKind::ring: {
      const double du = u - 0.5, dv = v - 0.5;
      const double r2 = du * du + dv * dv;
      return r2 <= 0.25 && r2 >= 0.09;
    }
    case ShapeKind::triangle:
      // apex at top center, base along the bottom edge
      return std::abs(u - 0.5) <= 0.5 * v;
    case ShapeKind::diamond:
      return std::abs(u - 0.5) + std::abs(v - 0.5) <= 0.5;
    case ShapeKind::cross:
      return std::abs(u - 0.5) <= 0.18 || std::abs(v - 0.5) <= 0.18;
  }
  return false;
}

void render_shape(Tensor& image, const BoundingBox& box, ShapeKind kind, const Color& color) {
  const int h = image.dim(0), w = image.dim(1);
  const int y0 = std::max(0, static_cast<int>(std::floor(box.y1)));
  const int y1 = std::min(h, static_cast<int>(std::ceil(box.y2)));
  const int x0 = std::max(0, static_cast<int>(std::floor(box.x1)));
  const int x1 = std::min(w, static_cast<int>(std::ceil(box.x2)));
  static constexpr double kSub[2] = {0.25, 0.75};
  for (int y = y0; y < y1; ++y) {
    for (int x = x0; x < x1; ++x) {
      int hits = 0;
      for (double sy : kSub)
        for (double sx : kSub) {
          const double u = (x + sx - box.x1) / box.width();
          const double v = (y + sy - box.y1) / box.height();
          if (u >= 0 && u <= 1 && v >= 0 && v <= 1 && inside_shape(kind, u, v)) ++hits;
        }
      if (!hits) continue;
      const double cov = hits / 4.0;
      for (int c = 0; c < 3; ++c) image.at(y, x, c) = image.at(y, x, c) * (1 - cov) + color[c] * cov;
    }
  }
}

double rule_contrast(const SceneConfig& cfg, int cls) {
  double contrast = 1.0;
  for (const auto& r : cfg.rules)
    if (r.dependent == cls) contrast = std::min(contrast, r.contrast);
  return contrast;
}

Color render_color(const SceneConfig& cfg, int cls) {
  const double k = rule_contrast(cfg, cls);
  const Color& base = cfg.classes[cls].color;
  Color out;
  for (int c = 0; c < 3; ++c) out[c] = cfg.background[c] + k * (base[c] - cfg.background[c]);
  return out;
}

int draw_class(const SceneConfig& cfg, Rng& rng) {
  double total = 0.0;
  for (const auto& c : cfg.classes) total += c.frequency;
  double u = rng.uniform() * total;
  for (int i = 0; i < cfg.num_classes(); ++i) {
    u -= cfg.classes[i].frequency;
    if (u < 0) return i;
  }
  return cfg.num_classes() - 1;
}

BoundingBox sized_box(const SceneConfig& cfg, int cls, double cx, double cy, Rng& rng) {
  const ClassSpec& spec = cfg.classes[cls];
  const int hpx = rng.integer(static_cast<int>(std::ceil(spec.min_size)),
                              static_cast<int>(std::floor(spec.max_size)));
  const int wpx = std::min(cfg.image_w, static_cast<int>(std::lround(hpx * shape_aspect(spec.shape))));
  const double x = std::round(cx - 0.5 * wpx);
  const double y = std::round(cy - 0.5 * hpx);
  return {x, y, x + wpx, y + hpx};
}

bool fits(const SceneConfig& cfg, const BoundingBox& b) {
  return b.x1 >= 0 && b.y1 >= 0 && b.x2 <= cfg.image_w && b.y2 <= cfg.image_h && b.area() >= 4.0;
}

bool overlap_ok(const SceneConfig& cfg, const BoundingBox& b, const std::vector<BoundingBox>& placed) {
  for (const auto& p : placed)
    if (iou(b, p) > cfg.max_pair_iou) return false;
  return true;
}

std::vector<int> draw_classes(const SceneConfig& cfg, Rng& rng) {
  const int n = rng.integer(cfg.min_instances, cfg.max_instances);
  std::vector<int> classes;
  if (n == 0) return classes;
  if (cfg.single_class_scenes) {
    classes.assign(n, draw_class(cfg, rng));
  } else {
    for (int i = 0; i < n; ++i) classes.push_back(draw_class(cfg, rng));
  }
  // A dependent class never appears without its trigger.
  for (const auto& rule : cfg.rules) {
    const bool has_dep = std::count(classes.begin(), classes.end(), rule.dependent) > 0;
    const bool has_trig = std::count(classes.begin(), classes.end(), rule.trigger) > 0;
    if (!has_dep || has_trig) continue;
    if (static_cast<int>(classes.size()) < cfg.max_instances && !cfg.single_class_scenes) {
      classes.push_back(rule.trigger);
      continue;
    }
    auto it = std::find_if(classes.begin(), classes.end(), [&](int c) {
      return std::none_of(cfg.rules.begin(), cfg.rules.end(),
                          [&](const ContextRule& r) { return r.dependent == c || r.trigger == c; });
    });
    if (it == classes.end() || cfg.single_class_scenes) {
      it = std::find(classes.begin(), classes.end(), rule.dependent);
    }
    *it = rule.trigger;
    if (cfg.single_class_scenes) std::fill(classes.begin(), classes.end(), rule.trigger);
  }
  return classes;
}

int placement_rank(const SceneConfig& cfg, int cls) {
  for (const auto& r : cfg.rules)
    if (r.dependent == cls) return 2;
  for (const auto& r : cfg.rules)
    if (r.trigger == cls) return 0;
  return 1;
}

bool place_dependent(const SceneConfig& cfg, int cls, const std::vector<Instance>& placed,
                     const std::vector<BoundingBox>& occupied, Rng& rng, BoundingBox& out) {
  std::vector<const ContextRule*> rules;
  for (const auto& r : cfg.rules)
    if (r.dependent == cls) rules.push_back(&r);
  const ContextRule& rule = *rules[rng.below(rules.size())];
  std::vector<const Instance*> anchors;
  for (const auto& p : placed)
    if (p.cls == rule.trigger) anchors.push_back(&p);
  if (anchors.empty()) return false;
  for (int t = 0; t < kPlacementTries; ++t) {
    const BoundingBox& trig = anchors[rng.below(anchors.size())]->box;
    double cx = trig.cx(), cy = trig.cy();
    const double d = rng.uniform(rule.min_distance, rule.max_distance);
    switch (rule.relation) {
      case Relation::near: {
        const double theta = rng.uniform(0.0, 6.283185307179586);
        cx += d * std::cos(theta);
        cy += d * std::sin(theta);
        break;
      }
      case Relation::above:
        cx += rng.uniform(-0.25, 0.25) * trig.width();
        cy -= d;
        break;
      case Relation::inside:
        cx += rng.uniform(-0.25, 0.25) * trig.width();
        cy += rng.uniform(-0.25, 0.25) * trig.height();
        break;
    }
    BoundingBox b = sized_box(cfg, cls, cx, cy, rng);
    if (!fits(cfg, b)) continue;
    // Every rule on this class must hold against some trigger instance.
    bool sound = true;
    for (const ContextRule* r : rules) {
      bool any = false;
      for (const auto& p : placed)
        if (p.cls == r->trigger && relation_holds(*r, p.box, b)) any = true;
      sound = sound && any;
    }
    if (!sound) continue;
    if (rule.relation != Relation::inside && !overlap_ok(cfg, b, occupied)) continue;
    out = b;
    return true;
  }
  return false;
}

bool place_free(const SceneConfig& cfg, int cls, const std::vector<BoundingBox>& occupied, Rng& rng,
                BoundingBox& out) {
  for (int t = 0; t < kPlacementTries; ++t) {
    const double cx = rng.uniform(0.0, cfg.image_w);
    const double cy = rng.uniform(0.0, cfg.image_h);
    BoundingBox b = sized_box(cfg, cls, cx, cy, rng);
    if (!fits(cfg, b) || !overlap_ok(cfg, b, occupied)) continue;
    out = b;
    return true;
  }
  return false;
}

bool decoy_ok(const SceneConfig& cfg, const DecoySpec& d, const BoundingBox& b,
              const std::vector<Instance>& placed) {
  for (const auto& r : cfg.rules) {
    if (r.dependent != d.mimic) continue;
    for (const auto& p : placed)
      if (p.cls == r.trigger && center_distance(p.box, b) < d.min_trigger_distance) return false;
  }
  return true;
}

}  // namespace

int SceneConfig::class_index(const std::string& name) const {
  for (int i = 0; i < num_classes(); ++i)
    if (classes[i].name == name) return i;
  return -1;
}

void SceneConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("scene." + m); };
  if (num_classes() < 2) fail("classes: need at least 2 classes");
  if (image_h <= 0 || image_w <= 0) fail("image_h/image_w: must be positive");
  if (stride <= 0 || image_h % stride != 0 || image_w % stride != 0)
    fail("image_h/image_w: extents must be divisible by the detector stride");
  if (min_instances < 0 || max_instances < min_instances) fail("instances: bad range");
  if (max_pair_iou < 0 || max_pair_iou > 1) fail("max_pair_iou: must be in [0, 1]");
  if (noise_std < 0) fail("noise_std: must be >= 0");
  if (max_retries < 1) fail("max_retries: must be >= 1");
  for (std::size_t i = 0; i < classes.size(); ++i) {
    const auto& c = classes[i];
    if (c.min_size < 2 || c.max_size < c.min_size || std::floor(c.max_size) < std::ceil(c.min_size))
      fail("classes[" + std::to_string(i) + "]: bad size range");
    if (c.frequency <= 0) fail("classes[" + std::to_string(i) + "].frequency: must be > 0");
  }
  for (std::size_t i = 0; i < rules.size(); ++i) {
    const auto& r = rules[i];
    const std::string at = "rules[" + std::to_string(i) + "]";
    if (r.trigger < 0 || r.trigger >= num_classes() || r.dependent < 0 || r.dependent >= num_classes())
      fail(at + ": class index out of range");
    if (r.trigger == r.dependent) fail(at + ": dependent must differ from trigger");
    if (!(r.contrast > 0 && r.contrast <= 1)) fail(at + ".contrast: must be in (0, 1]");
    if (r.min_distance < 0 || r.max_distance < r.min_distance) fail(at + ": bad distance bounds");
  }
  for (std::size_t i = 0; i < decoys.size(); ++i) {
    const auto& d = decoys[i];
    if (d.mimic < 0 || d.mimic >= num_classes() || d.min_count < 0 || d.max_count < d.min_count)
      fail("decoys[" + std::to_string(i) + "]: bad spec");
  }
}

SceneConfig SceneConfig::toy_default() {
  SceneConfig c;
  c.classes = {
      {"racket", ShapeKind::bar, {0.95, 0.85, 0.10}, 6, 8, 1.0},
      {"ball", ShapeKind::circle, {0.95, 0.20, 0.20}, 6, 8, 1.0},
      {"box", ShapeKind::square, {0.15, 0.75, 0.25}, 8, 16, 1.0},
      {"kite", ShapeKind::triangle, {0.20, 0.35, 0.95}, 8, 16, 1.0},
  };
  c.rules = {{0, 1, Relation::near, 8.0, 16.0, 0.3}};
  return c;
}

double center_distance(const BoundingBox& a, const BoundingBox& b) {
  return std::hypot(a.cx() - b.cx(), a.cy() - b.cy());
}

bool relation_holds(const ContextRule& rule, const BoundingBox& t, const BoundingBox& d) {
  const double dist = center_distance(t, d);
  switch (rule.relation) {
    case Relation::near:
      return dist >= rule.min_distance && dist <= rule.max_distance;
    case Relation::above: {
      const double dy = t.cy() - d.cy();
      return dy >= rule.min_distance && dy <= rule.max_distance &&
             std::abs(t.cx() - d.cx()) <= std::max(0.5 * t.width(), 4.0);
    }
    case Relation::inside:
      return d.x1 >= t.x1 && d.y1 >= t.y1 && d.x2 <= t.x2 && d.y2 <= t.y2;
  }
  return false;
}

SceneRecord generate_scene(const SceneConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(Rng::mix(seed ^ 0x5ce9e5ULL));
  SceneRecord rec;
  rec.seed = seed;

  std::vector<Instance> placed;
  std::vector<Instance> decoy_boxes;
  bool ok = false;
  for (int attempt = 0; attempt < cfg.max_retries && !ok; ++attempt) {
    std::vector<int> classes = draw_classes(cfg, rng);
    std::stable_sort(classes.begin(), classes.end(), [&](int a, int b) {
      return placement_rank(cfg, a) < placement_rank(cfg, b);
    });
    placed.clear();
    decoy_boxes.clear();
    std::vector<BoundingBox> occupied;
    ok = true;
    for (int cls : classes) {
      BoundingBox b;
      const bool dependent = placement_rank(cfg, cls) == 2;
      const bool done = dependent ? place_dependent(cfg, cls, placed, occupied, rng, b)
                                  : place_free(cfg, cls, occupied, rng, b);
      if (!done) {
        ok = false;
        break;
      }
      placed.push_back({cls, b});
      occupied.push_back(b);
    }
    if (!ok) continue;
    for (const auto& d : cfg.decoys) {
      const int count = rng.integer(d.min_count, d.max_count);
      for (int i = 0; i < count && ok; ++i) {
        bool done = false;
        for (int t = 0; t < kPlacementTries && !done; ++t) {
          BoundingBox b;
          if (!place_free(cfg, d.mimic, occupied, rng, b)) break;
          if (!decoy_ok(cfg, d, b, placed)) continue;
          decoy_boxes.push_back({d.mimic, b});
          occupied.push_back(b);
          done = true;
        }
        ok = done;
      }
    }
  }
  if (!ok) {
    throw ValueError("scene generation: rules/overlap policy unsatisfiable after " +
                     std::to_string(cfg.max_retries) + " attempts (seed " + std::to_string(seed) + ")");
  }

  Tensor image({cfg.image_h, cfg.image_w, 3}, 0.0);
  for (int y = 0; y < cfg.image_h; ++y)
    for (int x = 0; x < cfg.image_w; ++x)
      for (int c = 0; c < 3; ++c) image.at(y, x, c) = cfg.background[c];
  // Decoys first so annotated instances sit on top.
  for (const auto& d : decoy_boxes)
    render_shape(image, d.box, cfg.classes[d.cls].shape, render_color(cfg, d.cls));
  for (const auto& inst : placed)
    render_shape(image, inst.box, cfg.classes[inst.cls].shape, render_color(cfg, inst.cls));
  for (double& v : image.values()) {
    const double noisy = v + (cfg.noise_std > 0 ? cfg.noise_std * rng.normal() : 0.0);
    v = std::round(std::clamp(noisy, 0.0, 1.0) * 255.0) / 255.0;
  }
  rec.image = std::move(image);
  rec.instances = std::move(placed);
  return rec;
}

std::vector<SceneRecord> generate_scenes(const SceneConfig& config, std::uint64_t base_seed,
                                         std::size_t count) {
  std::vector<SceneRecord> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_scene(config, base_seed + i));
  return out;
}

std::vector<std::string> check_scene(const SceneConfig& cfg, const SceneRecord& rec) {
  std::vector<std::string> issues;
  const auto& inst = rec.instances;
  for (std::size_t i = 0; i < inst.size(); ++i) {
    const auto& b = inst[i].box;
    if (!(b.x1 >= 0 && b.y1 >= 0 && b.x2 <= cfg.image_w && b.y2 <= cfg.image_h))
      issues.push_back("instance " + std::to_string(i) + " outside image");
    if (b.area() < 4.0) issues.push_back("instance " + std::to_string(i) + " smaller than 4 px^2");
    if (inst[i].cls < 0 || inst[i].cls >= cfg.num_classes())
      issues.push_back("instance " + std::to_string(i) + " has bad class");
    for (std::size_t j = i + 1; j < inst.size(); ++j) {
      bool exempt = false;
      for (const auto& r : cfg.rules)
        if (r.relation == Relation::inside &&
            ((inst[i].cls == r.trigger && inst[j].cls == r.dependent) ||
             (inst[j].cls == r.trigger && inst[i].cls == r.dependent)))
          exempt = true;
      if (!exempt && iou(b, inst[j].box) > cfg.max_pair_iou + 1e-12)
        issues.push_back("instances " + std::to_string(i) + "," + std::to_string(j) + " overlap");
    }
  }
  for (std::size_t ri = 0; ri < cfg.rules.size(); ++ri) {
    const auto& r = cfg.rules[ri];
    for (std::size_t i = 0; i < inst.size(); ++i) {
      if (inst[i].cls != r.dependent) continue;
      bool any = false;
      for (const auto& t : inst)
        if (t.cls == r.trigger && relation_holds(r, t.box, inst[i].box)) any = true;
      if (!any)
        issues.push_back("rule " + std::to_string(ri) + " violated by instance " + std::to_string(i));
    }
  }
  return issues;
}

void write_dataset(std::ostream& out, const Dataset& ds) {
  out.write(kDatasetMagic, 4);
  io::put_u32(out, kDatasetVersion);
  io::put_u64(out, ds.config_digest);
  io::put_u64(out, ds.records.size());
  for (const auto& rec : ds.records) {
    io::put_u64(out, rec.seed);
    const Tensor& img = rec.image;
    io::put_u32(out, static_cast<std::uint32_t>(img.dim(0)));
    io::put_u32(out, static_cast<std::uint32_t>(img.dim(1)));
    io::put_u32(out, static_cast<std::uint32_t>(img.dim(2)));
    std::string bytes(img.size(), '\0');
    for (std::size_t i = 0; i < img.size(); ++i)
      bytes[i] = static_cast<char>(static_cast<unsigned char>(std::lround(img[i] * 255.0)));
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    io::put_u32(out, static_cast<std::uint32_t>(rec.instances.size()));
    for (const auto& inst : rec.instances) {
      io::put_u32(out, static_cast<std::uint32_t>(inst.cls));
      io::put_f64(out, inst.box.x1);
      io::put_f64(out, inst.box.y1);
      io::put_f64(out, inst.box.x2);
      io::put_f64(out, inst.box.y2);
    }
  }
}

Dataset read_dataset(std::istream& in) {
  char magic[4] = {};
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != std::string(kDatasetMagic, 4))
    throw FormatError("dataset: bad magic");
  Dataset ds;
  std::uint64_t count = 0;
  try {
    const std::uint32_t version = io::get_u32(in);
    if (version != kDatasetVersion) throw FormatError("unsupported version " + std::to_string(version));
    ds.config_digest = io::get_u64(in);
    count = io::get_u64(in);
  } catch (const FormatError& e) {
    throw FormatError(std::string("dataset header: ") + e.what());
  }
  if (count > (1u << 24)) throw FormatError("dataset header: implausible record count");
  for (std::uint64_t r = 0; r < count; ++r) {
    try {
      SceneRecord rec;
      rec.seed = io::get_u64(in);
      const std::uint32_t h = io::get_u32(in), w = io::get_u32(in), c = io::get_u32(in);
      if (h == 0 || w == 0 || c == 0 || h > 4096 || w > 4096 || c > 16)
        throw FormatError("bad image extents");
      std::string bytes(static_cast<std::size_t>(h) * w * c, '\0');
      in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
      if (!in) throw FormatError("truncated image payload");
      std::vector<double> values(bytes.size());
      for (std::size_t i = 0; i < bytes.size(); ++i)
        values[i] = static_cast<unsigned char>(bytes[i]) / 255.0;
      rec.image = Tensor({static_cast<int>(h), static_cast<int>(w), static_cast<int>(c)}, std::move(values));
      const std::uint32_t n = io::get_u32(in);
      if (n > 4096) throw FormatError("implausible instance count");
      for (std::uint32_t i = 0; i < n; ++i) {
        Instance inst;
        inst.cls = static_cast<int>(io::get_u32(in));
        inst.box.x1 = io::get_f64(in);
        inst.box.y1 = io::get_f64(in);
        inst.box.x2 = io::get_f64(in);
        inst.box.y2 = io::get_f64(in);
        rec.instances.push_back(inst);
      }
      ds.records.push_back(std::move(rec));
    } catch (const FormatError& e) {
      throw FormatError("dataset record " + std::to_string(r) + ": " + e.what());
    }
  }
  return ds;
}

void write_dataset(const std::filesystem::path& path, const Dataset& ds) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw MissingArtifact("cannot open " + path.string() + " for writing");
  write_dataset(out, ds);
  if (!out) throw Error("write failed: " + path.string());
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact("dataset not found: " + path.string());
  return read_dataset(in);
}

std::uint64_t dataset_digest(const Dataset& ds) {
  std::ostringstream os(std::ios::binary);
  write_dataset(os, ds);
  const std::string s = os.str();
  return fnv1a(s.data(), s.size());
}

void write_annotations_jsonl(std::ostream& out, const std::vector<SceneRecord>& records) {
  for (const auto& rec : records) {
    nlohmann::json j;
    j["seed"] = rec.seed;
    j["boxes"] = nlohmann::json::array();
    j["classes"] = nlohmann::json::array();
    for (const auto& inst : rec.instances) {
      j["boxes"].push_back({inst.box.x1, inst.box.y1, inst.box.x2, inst.box.y2});
      j["classes"].push_back(inst.cls);
    }
    out << j.dump() << '\n';
  }
}

std::string to_string(ShapeKind k) {
  switch (k) {
    case ShapeKind::circle: return "circle";
    case ShapeKind::square: return "square";
    case ShapeKind::triangle: return "triangle";
    case ShapeKind::bar: return "bar";
    case ShapeKind::diamond: return "diamond";
    case ShapeKind::ring: return "ring";
    case ShapeKind::cross: return "cross";
  }
  return "square";
}

std::string to_string(Relation r) {
  switch (r) {
    case Relation::near: return "near";
    case Relation::above: return "above";
    case Relation::inside: return "inside";
  }
  return "near";
}

ShapeKind shape_from_string(const std::string& s) {
  for (ShapeKind k : {ShapeKind::circle, ShapeKind::square, ShapeKind::triangle, ShapeKind::bar,
                      ShapeKind::diamond, ShapeKind::ring, ShapeKind::cross})
    if (to_string(k) == s) return k;
  throw ConfigError("unknown shape '" + s + "'");
}

Relation relation_from_string(const std::string& s) {
  for (Relation r : {Relation::near, Relation::above, Relation::inside})
    if (to_string(r) == s) return r;
  throw ConfigError("unknown relation '" + s + "'");
}

}  // namespace smn
