#include <cmath>
#include <cstdio>
#include <filesystem>

#include "decisive/errors.hpp"
#include "decisive/soft_layout.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace decisive;
using decisive::testing::random_tensor;

namespace {

GroundTruthMasks stripes(std::size_t H, std::size_t W, int k) {
  GroundTruthMasks m;
  m.height = H;
  m.width = W;
  m.instance_classes.assign(k, 0);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) m.labels.push_back(static_cast<int>(x % (k + 1)));
  return m;
}

std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("triplet loss margin cases") {
  Graph g;
  Tensor rows = Tensor::from({1, 0, 0, 1});
  rows = rows.reshaped({2, 2});
  // S[a] = S[p], sim(a, n) = 0.
  CHECK(triplet_loss(g.constant(rows), {{0, 0, 1}}, 0.5).value().item() == doctest::Approx(0.0));
  // sim(a, p) = sim(a, n).
  CHECK(triplet_loss(g.constant(rows), {{0, 1, 1}}, 0.5).value().item() == doctest::Approx(0.5));
  // Two triplets sum.
  CHECK(triplet_loss(g.constant(rows), {{0, 1, 0}, {0, 1, 1}}, 0.5).value().item() == doctest::Approx(2.0));
}

TEST_CASE("triplet loss gradient agrees with finite differences") {
  const GroundTruthMasks m = stripes(8, 8, 2);
  TrainConfig cfg;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    CounterRng rng(seed, 2);
    const auto triplets = sample_triplets(m, rng, cfg);
    const Tensor S = random_tensor({64, 4}, seed);
    const GradCheckResult r =
        grad_check([&](Graph&, Var s) { return triplet_loss(s, triplets, cfg.margin); }, S);
    CHECK(r.max_rel_error <= 1e-4);
  }
}

TEST_CASE("sampled triplets respect the segments") {
  const GroundTruthMasks m = stripes(6, 9, 2);
  TrainConfig cfg;
  cfg.triplets_per_image = 4000;
  CounterRng rng(11);
  const auto ts = sample_triplets(m, rng, cfg);
  REQUIRE(ts.size() == 4000);
  int subject = 0;
  for (const auto& t : ts) {
    CHECK(m.labels[t.anchor] == m.labels[t.positive]);
    CHECK(m.labels[t.anchor] != m.labels[t.negative]);
    subject += m.labels[t.anchor] > 0;
  }
  CHECK(subject / 4000.0 == doctest::Approx(0.75).epsilon(0.05));

  CounterRng again(11);
  const auto ts2 = sample_triplets(m, again, cfg);
  CHECK(ts2.front().anchor == ts.front().anchor);
  CHECK(ts2.back().negative == ts.back().negative);
}

TEST_CASE("a mask with one label cannot give triplets") {
  GroundTruthMasks m = stripes(4, 4, 1);
  for (int& l : m.labels) l = 1;
  CounterRng rng(0);
  CHECK_THROWS_WITH_AS(sample_triplets(m, rng, TrainConfig{}), "degenerate mask", InputError);
}

TEST_CASE("prediction shape and sparse agreement") {
  const HeadParams p = HeadParams::init(3, 12);
  FeatureStack f;
  f.features = random_tensor({7, 9, 12}, 4);
  f.time_embedding = time_embedding(20, 50);
  f.t = 20;
  const SoftLayout s = predict(f, p);
  REQUIRE(s.S.shape() == Shape{7, 9, kSoftLayoutDim});
  CHECK(s.t == 20);

  std::vector<float> ff(f.features.data().begin(), f.features.data().end());
  FeatureStack rounded = f;
  for (std::size_t i = 0; i < ff.size(); ++i) rounded.features[i] = ff[i];
  const SoftLayout full = predict(rounded, p);
  const std::vector<std::size_t> pix = {0, 8, 30, 62};
  Graph g;
  const Tensor rows = predict_at(g, ff, 7, 9, 12, f.time_embedding, pix, bind_params(g, p, false)).value();
  for (std::size_t i = 0; i < pix.size(); ++i)
    for (std::size_t c = 0; c < kSoftLayoutDim; ++c)
      CHECK(rows[i * kSoftLayoutDim + c] == doctest::Approx(full.S[pix[i] * kSoftLayoutDim + c]).epsilon(1e-12));
}

TEST_CASE("parameter init is seeded") {
  CHECK(HeadParams::init(1, 12) == HeadParams::init(1, 12));
  CHECK(!(HeadParams::init(1, 12) == HeadParams::init(2, 12)));
  const HeadParams z = HeadParams::zeros(12);
  for (const auto& [name, t] : z.named()) {
    CHECK(!name.empty());
    for (double v : t->data()) CHECK(v == 0.0);
  }
}

TEST_CASE("checkpoints round-trip exactly") {
  Checkpoint c;
  c.params = HeadParams::init(9, 12, 0.3);
  c.train.learning_rate = 3e-4;
  c.step = 17;
  c.config_hash = "abc";
  c.loss_curve = {1.5, 0.25};
  const std::string path = temp_path("decisive_ckpt_test.json");
  save_checkpoint(c, path);
  const Checkpoint r = load_checkpoint(path);
  CHECK(r.params == c.params);
  CHECK(r.step == 17);
  CHECK(r.config_hash == "abc");
  CHECK(r.loss_curve == c.loss_curve);
  CHECK(r.train.learning_rate == 3e-4);
  std::remove(path.c_str());
  CHECK_THROWS_AS(load_checkpoint(path), InputError);
}

TEST_CASE("training lowers the triplet loss on a small corpus") {
  DatasetConfig dc;
  dc.scenes = 6;
  dc.seed = 2;
  SimConfig sim;
  sim.height = 32;
  sim.width = 32;
  const Dataset d = generate_dataset(dc, sim);
  REQUIRE(!d.records.empty());
  TrainConfig tc;
  tc.steps = 150;
  tc.learning_rate = 1e-3;
  const TrainResult r = train(d.records, tc, 1);
  CHECK(r.steps == 150);
  CHECK(r.params.all_finite());
  const double before = evaluate_triplet_loss(d.records, HeadParams::init(1 ^ 0x1A17ULL, 12, tc.init_stddev), tc, 5);
  const double after = evaluate_triplet_loss(d.records, r.params, tc, 5);
  CHECK(after < before);
  CHECK(train(d.records, tc, 1).params == r.params);
  CHECK_THROWS_AS(train({}, tc, 1), InputError);
}
