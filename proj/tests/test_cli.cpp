#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "decisive/soft_layout.hpp"
#include "doctest.h"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace decisive;

namespace {

const std::string kSmall =
    " --set sim.height=24 --set sim.width=24 --set sim.steps=8 --set guidance.guided_steps=3"
    " --set guidance.iterations=2 --set cluster.window=3";

fs::path scratch(const char* name) {
  const fs::path p = fs::temp_directory_path() / "decisive_cli_test" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run(const std::string& args, const fs::path& log = {}) {
  std::string cmd = std::string(DECISIVE_CLI) + " " + args;
  cmd += log.empty() ? " > /dev/null 2>&1" : " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Small dataset and checkpoint shared by the tests below.
const fs::path& fixture() {
  static const fs::path dir = [] {
    const fs::path d = scratch("fixture");
    REQUIRE(run(kSmall + " gen-data --scenes 4 --seed 1 --out " + (d / "data.jsonl").string()) == 0);
    REQUIRE(run("train --steps 5 --data " + (d / "data.jsonl").string() + " --out " + (d / "train").string()) == 0);
    return d;
  }();
  return dir;
}

std::string ckpt() { return (fixture() / "train" / "checkpoint.json").string(); }

}  // namespace

TEST_CASE("help lists flags with defaults") {
  const fs::path d = scratch("help");
  CHECK(run("--help", d / "out.txt") == 0);
  CHECK(slurp(d / "out.txt").find("--jobs") != std::string::npos);
  CHECK(run("generate --help", d / "gen.txt") == 0);
  const std::string gen = slurp(d / "gen.txt");
  CHECK(gen.find("--variant") != std::string::npos);
  CHECK(gen.find("[full]") != std::string::npos);
  CHECK(run("ablate --help", d / "abl.txt") == 0);
  CHECK(slurp(d / "abl.txt").find("[0..4]") != std::string::npos);
  CHECK(run("") == 2);
  CHECK(run("generate --bogus") == 2);
}

TEST_CASE("dataset generation is reproducible") {
  const fs::path d = scratch("gen");
  CHECK(run(kSmall + " gen-data --scenes 3 --seed 5 --out " + (d / "a.jsonl").string()) == 0);
  CHECK(run(kSmall + " --jobs 4 gen-data --scenes 3 --seed 5 --out " + (d / "b.jsonl").string()) == 0);
  CHECK(slurp(d / "a.jsonl") == slurp(d / "b.jsonl"));
  CHECK(fs::exists(d / "a.jsonl.config.json"));
  // A regular file cannot be a parent directory.
  CHECK(run("gen-data --scenes 3 --out " + (d / "a.jsonl" / "x.jsonl").string()) == 2);
}

TEST_CASE("the seed falls back to DECISIVE_SEED") {
  const fs::path d = scratch("envseed");
  CHECK(run(kSmall + " gen-data --scenes 2 --seed 7 --out " + (d / "a.jsonl").string()) == 0);
  const std::string cmd = "DECISIVE_SEED=7 " + std::string(DECISIVE_CLI) + kSmall + " gen-data --scenes 2 --out " +
                          (d / "b.jsonl").string() + " > /dev/null";
  CHECK(std::system(cmd.c_str()) == 0);
  CHECK(slurp(d / "a.jsonl") == slurp(d / "b.jsonl"));
}

TEST_CASE("zero training steps keep the initialization") {
  const fs::path d = scratch("train0");
  REQUIRE(run("train --steps 0 --seed 3 --data " + (fixture() / "data.jsonl").string() + " --out " +
              d.string()) == 0);
  const Checkpoint ck = load_checkpoint((d / "checkpoint.json").string());
  const Dataset data = read_dataset((fixture() / "data.jsonl").string());
  TrainConfig tc;
  tc.steps = 0;
  CHECK(ck.params == train(data.records, tc, 3).params);
  CHECK(ck.train.learning_rate == 1e-4);
  CHECK(ck.config_hash == data.config_hash);
  CHECK(fs::exists(d / "loss.csv"));
  const auto cfg = nlohmann::json::parse(slurp(d / "config.json"));
  CHECK(cfg.at("train.steps") == "0");
  CHECK(run("train --data /nonexistent.jsonl --out " + d.string()) == 2);
}

TEST_CASE("generate writes a full trace directory") {
  const fs::path d = scratch("generate");
  REQUIRE(run(kSmall + " generate --ckpt " + ckpt() + " --prompt dog:2 --seed 2 --out " + (d / "a").string()) == 0);
  for (int t = 1; t <= 8; ++t) {
    char name[32];
    std::snprintf(name, sizeof name, "t%04d_hard.png", t);
    CHECK(fs::exists(d / "a" / "layouts" / name));
  }
  for (const char* f : {"metrics.csv", "summary.json", "trace.json", "config.json"}) CHECK(fs::exists(d / "a" / f));
  const auto summary = nlohmann::json::parse(slurp(d / "a" / "summary.json"));
  CHECK(summary.at("failed") == false);

  CHECK(run(kSmall + " generate --ckpt " + ckpt() + " --prompt dog:2 --seed 2 --out " + (d / "b").string()) == 0);
  for (const auto& e : fs::recursive_directory_iterator(d / "a")) {
    if (!e.is_regular_file()) continue;
    const fs::path rel = fs::relative(e.path(), d / "a");
    CHECK(slurp(e.path()) == slurp(d / "b" / rel));
  }

  CHECK(run(kSmall + " generate --ckpt " + ckpt() + " --prompt dog:2 --variant no_decisive --out " +
            (d / "c").string()) == 0);
  CHECK(run(kSmall + " generate --ckpt " + ckpt() + " --prompt 'dog:two' --out " + (d / "x").string()) == 2);
  CHECK(run(kSmall + " generate --ckpt " + ckpt() + " --prompt dog:2 --variant best --out " + (d / "x").string()) ==
        2);
  CHECK(run("--set sim.height=6 --set sim.width=6 generate --ckpt " + ckpt() + " --prompt dog:10 --out " +
            (d / "x").string()) == 4);
}

TEST_CASE("eval and render read trace directories") {
  const fs::path d = scratch("eval");
  REQUIRE(run(kSmall + " generate --ckpt " + ckpt() + " --prompt cat:2 --seed 1 --out " + (d / "traces/s1").string()) == 0);
  REQUIRE(run(kSmall + " generate --ckpt " + ckpt() + " --prompt cat:2 --seed 2 --out " + (d / "traces/s2").string()) == 0);
  REQUIRE(run("eval --traces " + (d / "traces").string() + " --out " + (d / "report").string()) == 0);
  const auto rep = nlohmann::json::parse(slurp(d / "report" / "eval.json"));
  REQUIRE(rep.at("rows").size() == 2);
  const auto s1 = nlohmann::json::parse(slurp(d / "traces/s1/summary.json"));
  CHECK(rep.at("rows")[0].at("final_iou").get<double>() ==
        doctest::Approx(s1.at("metrics").at("final_iou").get<double>()));
  CHECK(rep.at("rows")[0].at("temporal_consistency").get<double>() ==
        doctest::Approx(s1.at("metrics").at("temporal_consistency").get<double>()));
  CHECK(rep.at("diversity").size() == 1);

  fs::create_directories(d / "empty");
  CHECK(run("eval --traces " + (d / "empty").string() + " --out " + (d / "r2").string()) == 2);
  CHECK(run("eval --traces " + (d / "missing").string() + " --out " + (d / "r2").string()) == 2);

  REQUIRE(run("render --trace " + (d / "traces/s1").string() + " --out " + (d / "img").string()) == 0);
  CHECK(fs::exists(d / "img" / "t0008_hard.png"));
  CHECK(slurp(d / "img" / "t0003_hard.png") == slurp(d / "traces/s1/layouts/t0003_hard.png"));
}

TEST_CASE("ablation rows and aggregates") {
  const fs::path d = scratch("ablate");
  const std::string args = kSmall + " ablate --ckpt " + ckpt() +
                           " --seeds 0..2 --variants full,no_decisive --prompts 'dog:2' --out ";
  REQUIRE(run(args + (d / "a").string()) == 0);
  REQUIRE(run("--jobs 4" + args + (d / "b").string()) == 0);
  CHECK(slurp(d / "a" / "ablation.json") == slurp(d / "b" / "ablation.json"));
  CHECK(slurp(d / "a" / "ablation.csv") == slurp(d / "b" / "ablation.csv"));

  const auto rep = nlohmann::json::parse(slurp(d / "a" / "ablation.json"));
  REQUIRE(rep.at("rows").size() == 6);
  for (const auto& s : rep.at("summary")) {
    double sum = 0.0;
    int n = 0;
    for (const auto& r : rep.at("rows")) {
      if (r.at("variant") != s.at("variant")) continue;
      sum += r.at("metrics").at("final_iou").get<double>();
      ++n;
    }
    CHECK(n == 3);
    CHECK(s.at("final_iou").at("mean").get<double>() == doctest::Approx(sum / n).epsilon(1e-12));
  }
  CHECK(run(kSmall + " ablate --ckpt " + ckpt() + " --seeds 2..1 --out " + (d / "c").string()) == 2);
  CHECK(run(kSmall + " ablate --ckpt " + ckpt() + " --variants full,bogus --out " + (d / "c").string()) == 2);
}
