// smn: command-line driver for data generation, training, evaluation and
// diagnostics. Every command reads one RunConfig (--config, --profile, --set)
// and works inside one output directory (--out).

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "smn/config.hpp"
#include "smn/error.hpp"
#include "smn/gradcheck.hpp"
#include "smn/pipeline.hpp"
#include "smn/report.hpp"

namespace fs = std::filesystem;
using namespace smn;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitMissing = 3;
constexpr int kExitNumerical = 4;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "run";
  std::string profile;
  std::vector<std::string> sets;
};

RunConfig load(const Common& c) {
  RunConfig cfg;
  if (c.config.empty()) {
    cfg = RunConfig::for_profile(c.profile.empty() ? "toy" : c.profile);
    cfg = apply_overrides(cfg, c.sets);
  } else {
    cfg = load_run_config(c.config, c.profile, c.sets);
  }
  if (c.seed) {
    cfg.seed = *c.seed;
    cfg.validate();
  }
  cfg.require_executable();
  return cfg;
}

fs::path out_dir(const Common& c) {
  fs::create_directories(c.out);
  return c.out;
}

Dataset read_split(const RunConfig& cfg, const fs::path& dir, const std::string& name) {
  const fs::path p = dir / (name + ".smnd");
  if (!fs::exists(p))
    throw MissingArtifact("dataset not found: " + p.string() + " (run `smn gen-data` first)");
  Dataset d = read_dataset(p);
  if (d.config_digest != dataset_config_digest(cfg))
    throw ConfigError("dataset " + p.string() +
                      " was generated with a different scene config or seed; rerun gen-data");
  return d;
}

Checkpoint require_checkpoint(const fs::path& p, std::uint64_t digest, const std::string& stage) {
  if (!fs::exists(p))
    throw MissingArtifact("checkpoint not found: " + p.string() + " (run `smn " + stage +
                          "` first)");
  return load_checkpoint(p, digest);
}

TrainOptions options(const fs::path& ckpt_dir, std::uint64_t digest) {
  fs::create_directories(ckpt_dir);
  TrainOptions o;
  o.out_dir = ckpt_dir;
  o.config_digest = digest;
  o.on_step = [](const LossRecord& r) {
    if (r.step % 100 == 0)
      std::printf("step %6llu  lr %.1e  loss %.4f  (%.0fs)\n",
                  static_cast<unsigned long long>(r.step), r.lr, r.total, r.seconds);
  };
  return o;
}

void write_log(const fs::path& p, const TrainLog& log) {
  std::ofstream out(p);
  log.write_csv(out);
}

ModelKind kind_from(const std::string& s) {
  if (s == "base") return ModelKind::base;
  if (s == "smn") return ModelKind::smn;
  if (s == "mlp") return ModelKind::mlp;
  throw ConfigError("method: expected base, mlp or smn, got '" + s + "'");
}

void print_table(const std::vector<ComparisonRow>& rows) {
  std::printf("%-8s %-14s %6s %6s %6s %6s %6s %6s %6s %6s\n", "method", "protocol", "AP",
              "AP50", "AP75", "APs", "APm", "APl", "AR10", "AR");
  for (const auto& row : rows) {
    const EvalResult& r = row.result;
    std::printf("%-8s %-14s %6.1f %6.1f %6.1f %6.1f %6.1f %6.1f %6.1f %6.1f\n",
                row.method.c_str(), row.protocol.c_str(), 100 * r.ap, 100 * r.ap50, 100 * r.ap75,
                100 * r.ap_small, 100 * r.ap_medium, 100 * r.ap_large, 100 * r.ar10, 100 * r.ar);
  }
}

// One JSON object per line: {"image": i, "detections": [{"box": [x1,y1,x2,y2],
// "class": c, "score": s}, ...]}. Images without a line have no detections.
std::vector<std::vector<Detection>> read_detections(const fs::path& p, std::size_t images) {
  std::ifstream in(p);
  if (!in) throw MissingArtifact("detection file not found: " + p.string());
  std::vector<std::vector<Detection>> out(images);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto where = p.string() + ":" + std::to_string(n);
    try {
      const auto j = nlohmann::json::parse(line);
      const auto i = j.at("image").get<std::size_t>();
      if (i >= images) throw ValueError(where + ": image index " + std::to_string(i) + " out of range");
      for (const auto& d : j.at("detections")) {
        const auto b = d.at("box").get<std::vector<double>>();
        if (b.size() != 4) throw ValueError(where + ": box needs 4 numbers");
        out[i].push_back({{b[0], b[1], b[2], b[3]}, d.at("class").get<int>(), d.at("score").get<double>()});
      }
    } catch (const nlohmann::json::exception& e) {
      throw ValueError(where + ": " + e.what());
    }
  }
  return out;
}

int cmd_config(const Common& c) {
  const RunConfig cfg = load(c);
  std::printf("%s\n", serialize_run_config(cfg).c_str());
  return 0;
}

int cmd_gen_data(const Common& c) {
  const RunConfig cfg = load(c);
  const fs::path dir = out_dir(c);
  for (Split s : {Split::train, Split::test}) {
    const std::string name = s == Split::train ? "train" : "test";
    const Dataset d = generate_split(cfg, s);
    write_dataset(dir / (name + ".smnd"), d);
    std::ofstream ann(dir / (name + ".jsonl"));
    write_annotations_jsonl(ann, d.records);
    std::printf("%s: %zu scenes, digest %s\n", name.c_str(), d.records.size(),
                hex64(dataset_digest(d)).c_str());
  }
  std::ofstream(dir / "config.json") << serialize_run_config(cfg);
  return 0;
}

int cmd_train_base(const Common& c) {
  const RunConfig cfg = load(c);
  const fs::path dir = out_dir(c);
  const Dataset train = read_split(cfg, dir, "train");
  const std::uint64_t digest = base_config_digest(cfg);
  const StageResult r = run_base_stage(cfg, train, options(dir / "ckpt", digest));
  save_checkpoint(dir / "base.ckpt", {digest, static_cast<std::uint64_t>(cfg.train_base.steps), r.params});
  write_log(dir / "base_log.csv", r.log);
  std::printf("wrote %s (checksum %s)\n", (dir / "base.ckpt").c_str(),
              hex64(r.params.checksum("base/")).c_str());
  return 0;
}

int cmd_train_smn(const Common& c, const std::string& model) {
  const RunConfig cfg = load(c);
  const fs::path dir = out_dir(c);
  const ModelKind kind = kind_from(model);
  if (kind == ModelKind::base) throw ConfigError("--model: train-smn trains smn or mlp");
  const Dataset train = read_split(cfg, dir, "train");
  const Checkpoint base = require_checkpoint(dir / "base.ckpt", base_config_digest(cfg), "train-base");
  const std::uint64_t digest = stage_digest(cfg, kind);
  const StageResult r = run_memory_stage(cfg, kind, base.params, train, options(dir / "ckpt", digest));
  const fs::path ckpt = dir / (model + ".ckpt");
  save_checkpoint(ckpt, {digest, r.log.records.size(), r.params});
  write_log(dir / (model + "_log.csv"), r.log);
  std::printf("wrote %s; base checksum %s (was %s)\n", ckpt.c_str(),
              hex64(r.params.checksum("base/")).c_str(), hex64(base.params.checksum("base/")).c_str());
  return 0;
}

std::vector<Protocol> select_protocols(const RunConfig& cfg, const std::string& name) {
  if (name.empty()) return cfg.protocols;
  for (const auto& p : cfg.protocols)
    if (p.name == name) return {p};
  throw ConfigError("--protocol: no protocol named '" + name + "' in eval.protocols");
}

int cmd_eval(const Common& c, const std::string& method, const std::string& protocol,
             const std::string& detections) {
  const RunConfig cfg = load(c);
  const fs::path dir = out_dir(c);
  const Dataset test = read_split(cfg, dir, "test");
  const auto gts = ground_truth(test.records);
  std::vector<ComparisonRow> rows;
  if (!detections.empty()) {
    const auto dets = read_detections(detections, test.records.size());
    rows.push_back({"file", fs::path(detections).filename().string(),
                    evaluate(dets, gts, cfg.model.detector.num_classes, cfg.eval)});
  } else {
    const ModelKind kind = kind_from(method);
    const std::string stage = kind == ModelKind::base ? "train-base" : "train-smn";
    const Checkpoint ck = require_checkpoint(dir / (method + ".ckpt"), stage_digest(cfg, kind), stage);
    for (const auto& p : select_protocols(cfg, protocol)) {
      const auto dets = detect_all(ck.params, cfg.model, kind, test.records, p);
      rows.push_back({method, p.name, evaluate(dets, gts, cfg.model.detector.num_classes, cfg.eval)});
    }
    std::ofstream out(dir / ("eval_" + method + ".csv"));
    write_comparison_csv(out, rows);
  }
  print_table(rows);
  return 0;
}

int cmd_compare(const Common& c, const std::vector<std::string>& methods) {
  const RunConfig cfg = load(c);
  const fs::path dir = out_dir(c);
  const Dataset test = read_split(cfg, dir, "test");
  std::vector<MethodSpec> specs;
  for (const auto& m : methods) {
    const ModelKind kind = kind_from(m);
    const fs::path p = dir / (m + ".ckpt");
    if (fs::exists(p)) load_checkpoint(p, stage_digest(cfg, kind));
    specs.push_back({m, kind, p});
  }
  const auto rows = compare(specs, cfg.model, test.records, cfg.protocols, cfg.eval);
  std::ofstream(dir / "comparison.csv") << [&] {
    std::ostringstream s;
    write_comparison_csv(s, rows);
    return s.str();
  }();
  std::ofstream(dir / "pr_curves.svg") << svg_pr_curves(rows);
  std::ofstream(dir / "comparison.svg") << svg_comparison(rows);
  print_table(rows);
  return 0;
}

int cmd_gradcheck(int seeds, std::uint64_t first_seed) {
  bool ok = true;
  std::printf("%-26s %12s %9s %7s\n", "op", "max rel err", "checked", "kinks");
  for (const auto& e : run_gradient_suite(first_seed, seeds)) {
    const bool pass = e.result.passed(1e-4);
    ok = ok && pass;
    std::printf("%-26s %12.3e %9zu %7zu %s\n", e.name.c_str(), e.result.max_rel_error,
                e.result.checked, e.result.kink_rechecks, pass ? "" : "FAIL");
  }
  return ok ? 0 : kExitNumerical;
}

std::vector<double> softmax(std::vector<double> z) {
  const double m = *std::max_element(z.begin(), z.end());
  double sum = 0;
  for (double& v : z) sum += v = std::exp(v - m);
  for (double& v : z) v /= sum;
  return z;
}

struct Rollout {
  RunConfig cfg;
  Checkpoint ck;
  SceneRecord record;
  RolloutTrace trace;
};

Rollout run_rollout(const Common& c, std::size_t image, int iterations) {
  Rollout r{load(c), {}, {}, {}};
  const fs::path dir = out_dir(c);
  const Dataset test = read_split(r.cfg, dir, "test");
  if (image >= test.records.size())
    throw ConfigError("--image: index " + std::to_string(image) + " out of range (test has " +
                      std::to_string(test.records.size()) + " scenes)");
  r.ck = require_checkpoint(dir / "smn.ckpt", smn_config_digest(r.cfg), "train-smn");
  r.record = test.records[image];
  RolloutConfig rc = r.cfg.rollout;
  if (iterations > 0) rc.iterations = iterations;
  r.trace = detect_sequence(r.ck.params, r.cfg.model, r.record.image, rc);
  return r;
}

int cmd_explain(const Common& c, std::size_t image, int iterations) {
  const Rollout r = run_rollout(c, image, iterations);
  const auto& classes = r.cfg.scene.classes;
  std::printf("image %zu: %zu ground-truth instances\n", image, r.record.instances.size());
  std::printf("%4s  %-28s %-8s %9s %9s %9s\n", "iter", "roi", "class", "p(base)", "p(fused)",
              "delta");
  for (const auto& it : r.trace.iterations) {
    const int k = it.selected_class;
    const std::vector<double> base = softmax(it.base_logits);
    const std::string name = k == 0 ? "bg" : classes[k - 1].name;
    char box[64];
    std::snprintf(box, sizeof box, "[%.1f %.1f %.1f %.1f]", it.roi.box.x1, it.roi.box.y1,
                  it.roi.box.x2, it.roi.box.y2);
    std::printf("%4d  %-28s %-8s %9.3f %9.3f %+9.3f\n", it.index, box, name.c_str(), base[k],
                it.probs[k], it.probs[k] - base[k]);
  }
  const fs::path p = fs::path(c.out) / ("explain_" + std::to_string(image) + ".jsonl");
  std::ofstream out(p);
  write_trace_jsonl(out, r.trace);
  std::printf("trace written to %s\n", p.c_str());
  return 0;
}

int cmd_dump_memory(const Common& c, std::size_t image, int iterations) {
  const Rollout r = run_rollout(c, image, iterations);
  const fs::path p = fs::path(c.out) / ("memory_" + std::to_string(image) + ".smnt");
  save_tensor(p, r.trace.final_memory);
  const Tensor& m = r.trace.final_memory;
  const int h = m.dim(0), w = m.dim(1), d = m.dim(2);
  std::printf("memory %dx%dx%d after %zu writes, digest %s\n", h, w, d, r.trace.iterations.size(),
              hex64(digest(m)).c_str());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double n = 0;
      for (int k = 0; k < d; ++k) n += m[(static_cast<std::size_t>(y) * w + x) * d + k] * m[(static_cast<std::size_t>(y) * w + x) * d + k];
      std::printf("%5.2f", std::sqrt(n));
    }
    std::printf("\n");
  }
  std::printf("tensor written to %s\n", p.c_str());
  return 0;
}

int cmd_report(const Common& c) {
  const fs::path dir = out_dir(c);
  int written = 0;
  for (const char* stage : {"base", "smn", "mlp"}) {
    const fs::path log = dir / (std::string(stage) + "_log.csv");
    if (!fs::exists(log)) continue;
    std::ofstream(dir / (std::string("loss_") + stage + ".svg"))
        << svg_loss_curve(std::string(stage) + " training loss", read_train_log(log));
    ++written;
  }
  if (fs::exists(dir / "comparison.csv")) {
    std::ofstream(dir / "comparison.svg") << svg_comparison(read_comparison_csv(dir / "comparison.csv"));
    ++written;
  }
  if (written == 0)
    throw MissingArtifact("report: no training logs or comparison.csv in " + dir.string());
  std::printf("wrote %d plot(s) to %s\n", written, dir.c_str());
  return 0;
}

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "Run configuration (JSON)");
  app->add_option("--seed", c.seed, "Seed for every random stream");
  app->add_option("--out", c.out, "Working directory for artifacts")->capture_default_str();
  app->add_option("--profile", c.profile, "Profile: toy or paper-reference");
  app->add_option("--set", c.sets, "Override a field: dotted.path=value (repeatable)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spatial memory detection pipeline"};
  app.require_subcommand(1);
  Common common;
  std::string model = "smn", method = "smn", protocol, detections;
  std::vector<std::string> methods{"base", "mlp", "smn"};
  std::size_t image = 0;
  int iterations = 0, seeds = 20;
  std::uint64_t first_seed = 1;

  auto* show = app.add_subcommand("config", "Print the resolved configuration as JSON");
  auto* gen = app.add_subcommand("gen-data", "Generate train and test scenes");
  auto* tb = app.add_subcommand("train-base", "Train the base detector");
  auto* ts = app.add_subcommand("train-smn", "Train the memory model (or the mlp baseline) on a frozen base");
  ts->add_option("--model", model, "smn or mlp")->capture_default_str();
  auto* ev = app.add_subcommand("eval", "Evaluate one method on the test scenes");
  ev->add_option("--method", method, "base, mlp or smn")->capture_default_str();
  ev->add_option("--protocol", protocol, "Protocol name (default: all)");
  ev->add_option("--detections", detections, "Evaluate a JSON-lines detection file instead");
  auto* cmp = app.add_subcommand("compare", "Evaluate every method under every protocol");
  cmp->add_option("--methods", methods, "Methods to compare")->capture_default_str();
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
  gc->add_option("--seeds", seeds, "Number of seeds")->capture_default_str();
  gc->add_option("--first-seed", first_seed, "First seed")->capture_default_str();
  auto* ex = app.add_subcommand("explain", "Per-iteration base vs memory-augmented scores");
  auto* dm = app.add_subcommand("dump-memory", "Write the memory after a roll-out");
  for (auto* s : {ex, dm}) {
    s->add_option("--image", image, "Test scene index")->capture_default_str();
    s->add_option("--iterations", iterations, "Roll-out length (default: rollout.iterations)");
  }
  auto* rep = app.add_subcommand("report", "Render SVG plots from logs and tables");
  for (auto* s : {show, gen, tb, ts, ev, cmp, gc, ex, dm, rep}) add_common(s, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*show) return cmd_config(common);
    if (*gen) return cmd_gen_data(common);
    if (*tb) return cmd_train_base(common);
    if (*ts) return cmd_train_smn(common, model);
    if (*ev) return cmd_eval(common, method, protocol, detections);
    if (*cmp) return cmd_compare(common, methods);
    if (*gc) return cmd_gradcheck(seeds, first_seed);
    if (*ex) return cmd_explain(common, image, iterations);
    if (*dm) return cmd_dump_memory(common, image, iterations);
    if (*rep) return cmd_report(common);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const MissingArtifact& e) {
    std::fprintf(stderr, "missing artifact: %s\n", e.what());
    return kExitMissing;
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
