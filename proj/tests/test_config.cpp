#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "smn/config.hpp"
#include "smn/error.hpp"
#include "smn/report.hpp"

using namespace smn;

namespace {

std::string message_of(const std::string& text) {
  try {
    parse_run_config(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

RunConfig small_run() {
  return apply_overrides(RunConfig::toy(), {"scene.train_scenes=6", "scene.test_scenes=3"});
}

}  // namespace

TEST_CASE("config: serialize then parse is the identity for both profiles") {
  for (const RunConfig& cfg : {RunConfig::toy(), RunConfig::paper_reference()}) {
    const std::string text = serialize_run_config(cfg);
    const RunConfig back = parse_run_config(text);
    CHECK(serialize_run_config(back) == text);
    CHECK(back.profile == cfg.profile);
  }
  const RunConfig moved =
      apply_overrides(RunConfig::toy(), {"seed=99", "rollout.emission=hardmax", "eval.ar_cap=7",
                                         "train.smn.curriculum=[{\"unroll\":3,\"steps\":4}]"});
  CHECK(moved.seed == 99);
  CHECK(moved.rollout.emission == Emission::hardmax);
  CHECK(moved.eval.ar_cap == 7);
  REQUIRE(moved.train_smn.curriculum.size() == 1);
  CHECK(serialize_run_config(parse_run_config(serialize_run_config(moved))) ==
        serialize_run_config(moved));
}

TEST_CASE("config: absent fields keep defaults, profile picks the base") {
  CHECK(serialize_run_config(parse_run_config("{}")) == serialize_run_config(RunConfig::toy()));
  const RunConfig r = parse_run_config(R"({"seed": 5, "rollout": {"iterations": 4}})");
  CHECK(r.seed == 5);
  CHECK(r.rollout.iterations == 4);
  CHECK(r.model.detector.num_classes == RunConfig::toy().model.detector.num_classes);
  CHECK(parse_run_config(R"({"profile": "paper-reference"})").profile == "paper-reference");
}

TEST_CASE("config: diagnostics name the line, column or dotted field") {
  CHECK(message_of("{\n  \"seed\": 1,\n  oops\n}").find("line 3") != std::string::npos);
  CHECK(message_of("{\"seed\": 1,}").find("column") != std::string::npos);
  CHECK(message_of(R"({"rollout": {"iterations": "ten"}})").find("rollout.iterations") != std::string::npos);
  CHECK(message_of(R"({"detector": {"colour": 1}})").find("detector.colour") != std::string::npos);
  CHECK(message_of(R"({"profile": "huge"})").find("profile") != std::string::npos);
  CHECK(message_of("[1, 2]").find("top level") != std::string::npos);

  CHECK_THROWS_WITH_AS(apply_overrides(RunConfig::toy(), {"rollout.nope=1"}),
                       doctest::Contains("unknown field"), ConfigError);
  CHECK_THROWS_WITH_AS(apply_overrides(RunConfig::toy(), {"seed"}), doctest::Contains("key=value"),
                       ConfigError);
  CHECK_THROWS_AS(apply_overrides(RunConfig::toy(), {"eval.protocols.99.cap=1"}), ConfigError);
}

TEST_CASE("config: cross-field validation and the paper-reference guard") {
  CHECK_NOTHROW(RunConfig::toy().validate());
  CHECK_NOTHROW(RunConfig::toy().require_executable());
  CHECK_THROWS_WITH_AS(RunConfig::paper_reference().require_executable(),
                       doctest::Contains("paper-reference"), ConfigError);
  CHECK_THROWS_AS(apply_overrides(RunConfig::toy(), {"scene.train_scenes=0"}).validate(), ConfigError);
  CHECK_THROWS_AS(RunConfig::for_profile("medium"), ConfigError);
  CHECK_THROWS_AS(load_run_config("/nonexistent/run.json", "", {}), MissingArtifact);
}

TEST_CASE("config: load_run_config reads a file then applies profile and overrides") {
  const auto path = std::filesystem::temp_directory_path() / "smn_test_config.json";
  {
    std::ofstream(path) << serialize_run_config(RunConfig::toy());
  }
  const RunConfig r = load_run_config(path, "", {"seed=17"});
  CHECK(r.seed == 17);
  CHECK(load_run_config(path, "paper-reference", {}).profile == "paper-reference");
  std::filesystem::remove(path);
}

TEST_CASE("generate_split: deterministic, digest-stamped, disjoint splits") {
  const RunConfig cfg = small_run();
  const Dataset a = generate_split(cfg, Split::train), b = generate_split(cfg, Split::train);
  const Dataset t = generate_split(cfg, Split::test);
  CHECK(a.records.size() == 6);
  CHECK(t.records.size() == 3);
  CHECK(dataset_digest(a) == dataset_digest(b));
  CHECK(a.config_digest == dataset_config_digest(cfg));
  CHECK(dataset_digest(a) != dataset_digest(t));
  CHECK(digest(a.records[0].image) != digest(t.records[0].image));

  RunConfig other = cfg;
  other.seed = 2;
  CHECK(dataset_config_digest(other) != dataset_config_digest(cfg));
  CHECK(dataset_digest(generate_split(other, Split::train)) != dataset_digest(a));

  // Stage digests follow only the fields each stage reads.
  RunConfig rollout_only = cfg;
  rollout_only.rollout.iterations = 3;
  CHECK(base_config_digest(rollout_only) == base_config_digest(cfg));
  RunConfig lr = cfg;
  lr.train_smn.lr *= 2;
  CHECK(smn_config_digest(lr) != smn_config_digest(cfg));
  CHECK(base_config_digest(lr) == base_config_digest(cfg));
  CHECK(mlp_config_digest(lr) == mlp_config_digest(cfg));
}

TEST_CASE("report: SVGs are deterministic and logs round-trip through CSV") {
  TrainLog log;
  for (int i = 0; i < 120; ++i) {
    LossRecord r;
    r.step = i;
    r.lr = 0.01;
    r.rpn_cls = 1.0 / (i + 1);
    r.total = 2.0 / (i + 1);
    log.records.push_back(r);
  }
  const std::string svg = svg_loss_curve("smn", log);
  CHECK(svg == svg_loss_curve("smn", log));
  CHECK(svg.starts_with("<svg"));

  const auto path = std::filesystem::temp_directory_path() / "smn_test_log.csv";
  {
    std::ofstream out(path);
    log.write_csv(out);
  }
  const TrainLog back = read_train_log(path);
  REQUIRE(back.records.size() == log.records.size());
  for (std::size_t i = 0; i < log.records.size(); ++i) {
    CHECK(back.records[i].step == log.records[i].step);
    CHECK(back.records[i].total == doctest::Approx(log.records[i].total).epsilon(1e-12));
  }
  std::filesystem::remove(path);

  EvalResult r;
  r.ap = 0.25;
  r.ar10 = 0.5;
  const std::vector<ComparisonRow> rows{{"base", "n10", r}, {"smn", "n10", r}};
  const auto csv = std::filesystem::temp_directory_path() / "smn_test_cmp.csv";
  {
    std::ofstream out(csv);
    write_comparison_csv(out, rows);
  }
  const auto read = read_comparison_csv(csv);
  REQUIRE(read.size() == 2);
  CHECK(read[1].method == "smn");
  CHECK(read[0].result.ap == doctest::Approx(0.25));
  CHECK(svg_comparison(rows) == svg_comparison(read));
  std::filesystem::remove(csv);
}
