#include <fstream>
#include <map>
#include <sstream>

#include "decisive/config.hpp"
#include "decisive/errors.hpp"
#include "doctest.h"
#include "json.hpp"

using namespace decisive;

namespace {

std::map<std::string, std::string> as_map(const KeyValues& kv) {
  return {kv.begin(), kv.end()};
}

}  // namespace

TEST_CASE("default config matches the golden file") {
  std::ifstream in(std::string(DECISIVE_GOLDEN_DIR) + "/default_config.txt");
  REQUIRE(in);
  std::stringstream ss;
  ss << in.rdbuf();
  CHECK(config_to_text(Config{}) == ss.str());
}

TEST_CASE("default hyperparameters are the published ones") {
  const auto kv = as_map(to_key_values(Config{}));
  const std::map<std::string, double> published = {
      {"sim.steps", 50},
      {"guidance.guided_steps", 15},
      {"guidance.iterations", 5},
      {"guidance.alpha_cross", 0.3},
      {"guidance.alpha_var", 0.21},
      {"guidance.alpha_dice", 0.49},
      {"guidance.tau", 15},
      {"cluster.window", 30},
      {"cluster.variance_threshold", 0.025},
      {"train.margin", 0.5},
      {"head.soft_layout_dim", 10},
      {"train.triplets_per_image", 50},
      {"train.steps", 5000},
      {"train.learning_rate", 1e-4},
      {"train.subject_pick_prob", 0.75},
  };
  for (const auto& [key, value] : published) {
    REQUIRE(kv.count(key) == 1);
    CHECK(std::stod(kv.at(key)) == value);
  }
}

TEST_CASE("text form round-trips") {
  Config c;
  set_key(c, "guidance.step_size", "3.25");
  set_key(c, "cluster.metric", "euclidean");
  set_key(c, "guidance.variance_mode", "verbatim");
  set_key(c, "data.seed", "18446744073709551615");
  Config back;
  apply_config_text(back, config_to_text(c));
  CHECK(config_to_text(back) == config_to_text(c));
  CHECK(back.guidance.step_size == 3.25);
  CHECK(back.cluster.metric == ClusterMetric::kEuclidean);
  CHECK(back.data.seed == 18446744073709551615ULL);
}

TEST_CASE("config text accepts comments and blank lines") {
  Config c;
  apply_config_text(c, "# header\n\n  train.steps = 12   # inline\nsim.sigma_max=0\n");
  CHECK(c.train.steps == 12);
  CHECK(c.sim.sigma_max == 0.0);
}

TEST_CASE("bad keys and values are rejected") {
  Config c;
  CHECK_THROWS_AS(set_key(c, "train.nope", "1"), InputError);
  CHECK_THROWS_AS(set_key(c, "train.steps", "ten"), InputError);
  CHECK_THROWS_AS(set_key(c, "train.steps", "-1"), InputError);
  CHECK_THROWS_AS(set_key(c, "sim.scene_smoothing", "8"), InputError);
  CHECK_THROWS_AS(set_key(c, "cluster.metric", "manhattan"), InputError);
  CHECK_THROWS_AS(set_key(c, "train.margin", "2"), InputError);
  CHECK_THROWS_AS(apply_config_text(c, "train.steps 5"), InputError);
  CHECK_THROWS_AS(load_config_file("/nonexistent/decisive.cfg"), InputError);
}

TEST_CASE("JSON form lists every key") {
  const auto j = nlohmann::json::parse(config_to_json(Config{}));
  const auto keys = config_keys();
  CHECK(j.size() == keys.size());
  for (const auto& k : keys) CHECK(j.contains(k));
  CHECK(to_key_values(Config{}, "guidance.").size() == 9);
}
