#include <cmath>
#include <sstream>

#include "doctest.h"
#include "oracles.hpp"
#include "smn/error.hpp"
#include "smn/scene.hpp"

using namespace smn;

TEST_CASE("scene: zero instances gives a background-only image") {
  SceneConfig c = SceneConfig::toy_default();
  c.min_instances = c.max_instances = 0;
  c.noise_std = 0;
  const SceneRecord r = generate_scene(c, 5);
  CHECK(r.instances.empty());
  CHECK(r.image.shape() == Shape{64, 64, 3});
  const double bg = std::round(c.background[0] * 255) / 255;
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) CHECK(r.image.at(y, x, 0) == doctest::Approx(bg).epsilon(1e-12));
}

TEST_CASE("scene: the same config and seed give identical records") {
  const SceneConfig c = SceneConfig::toy_default();
  for (std::uint64_t seed : {0ull, 1ull, 77ull, 1ull << 40}) CHECK(generate_scene(c, seed) == generate_scene(c, seed));
  CHECK_FALSE(generate_scene(c, 1) == generate_scene(c, 2));
}

TEST_CASE("scene: every ball has a racket within the distance bound over 1000 scenes") {
  const SceneConfig c = SceneConfig::toy_default();
  const auto scenes = generate_scenes(c, 1000, 1000);
  int balls = 0;
  for (const auto& s : scenes) {
    CHECK(check_scene(c, s).empty());
    for (const auto& b : s.instances) {
      if (b.cls != 1) continue;
      ++balls;
      bool ok = false;
      for (const auto& r : s.instances) {
        if (r.cls != 0) continue;
        const double d = std::hypot(0.5 * (r.box.x1 + r.box.x2 - b.box.x1 - b.box.x2),
                                    0.5 * (r.box.y1 + r.box.y2 - b.box.y1 - b.box.y2));
        ok = ok || (d >= 8.0 && d <= 16.0);
      }
      CHECK(ok);
    }
  }
  CHECK(balls > 500);
}

TEST_CASE("scene: boxes lie inside the image with area >= 4 and bounded pairwise IoU") {
  const SceneConfig c = SceneConfig::toy_default();
  for (const auto& s : generate_scenes(c, 3000, 300)) {
    CHECK(s.instances.size() >= static_cast<std::size_t>(c.min_instances));
    CHECK(s.instances.size() <= static_cast<std::size_t>(c.max_instances));
    for (std::size_t i = 0; i < s.instances.size(); ++i) {
      const auto& b = s.instances[i].box;
      CHECK(b.x1 >= 0);
      CHECK(b.y1 >= 0);
      CHECK(b.x2 <= 64);
      CHECK(b.y2 <= 64);
      CHECK((b.x2 - b.x1) * (b.y2 - b.y1) >= 4);
      for (std::size_t j = i + 1; j < s.instances.size(); ++j)
        CHECK(oracle::box_iou(b, s.instances[j].box) <= c.max_pair_iou + 1e-12);
    }
  }
}

TEST_CASE("scene: class frequencies stay within 20% of their targets") {
  const SceneConfig c = SceneConfig::toy_default();
  std::vector<double> count(c.num_classes(), 0.0);
  double total = 0;
  for (const auto& s : generate_scenes(c, 5000, 1000))
    for (const auto& inst : s.instances) {
      count[inst.cls] += 1;
      total += 1;
    }
  double weight = 0;
  for (const auto& k : c.classes) weight += k.frequency;
  for (int k = 0; k < c.num_classes(); ++k) {
    const double target = c.classes[k].frequency / weight;
    INFO("class " << c.classes[k].name << " share " << count[k] / total);
    CHECK(std::abs(count[k] / total - target) <= 0.2 * target);
  }
}

TEST_CASE("scene: single-class scenes hold one class each") {
  SceneConfig c = SceneConfig::toy_default();
  c.rules.clear();
  c.single_class_scenes = true;
  for (const auto& s : generate_scenes(c, 9000, 200))
    for (const auto& inst : s.instances) CHECK(inst.cls == s.instances.front().cls);
}

TEST_CASE("scene: config validation names the field") {
  SceneConfig c = SceneConfig::toy_default();
  c.image_w = 66;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("scene.image_h/image_w"), ConfigError);
  c = SceneConfig::toy_default();
  c.rules[0].dependent = 0;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("rules[0]"), ConfigError);
  c = SceneConfig::toy_default();
  c.classes.resize(1);
  c.rules.clear();
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("scene: unsatisfiable placement fails loudly") {
  SceneConfig c = SceneConfig::toy_default();
  c.min_instances = c.max_instances = 40;
  c.max_pair_iou = 0.0;
  c.max_retries = 20;
  CHECK_THROWS_AS(generate_scene(c, 1), ValueError);
}

TEST_CASE("dataset: round trip, empty file and truncation") {
  const SceneConfig c = SceneConfig::toy_default();
  Dataset d{0x1234, generate_scenes(c, 42, 5)};
  std::stringstream s;
  write_dataset(s, d);
  const std::string bytes = s.str();
  std::stringstream in(bytes);
  const Dataset back = read_dataset(in);
  CHECK(back.config_digest == d.config_digest);
  CHECK(back.records == d.records);
  CHECK(dataset_digest(back) == dataset_digest(d));

  std::stringstream e;
  write_dataset(e, Dataset{7, {}});
  std::stringstream e_in(e.str());
  const Dataset empty = read_dataset(e_in);
  CHECK(empty.records.empty());
  CHECK(empty.config_digest == 7);

  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t cut = rng.below(bytes.size());
    std::stringstream part(bytes.substr(0, cut));
    CHECK_THROWS_AS(read_dataset(part), Error);
  }
  std::string bad = bytes;
  bad[0] = 'X';
  std::stringstream magic(bad);
  CHECK_THROWS_AS(read_dataset(magic), FormatError);
}
