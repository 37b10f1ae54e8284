#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "decisive/errors.hpp"
#include "decisive/layout_cluster.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace decisive;
using decisive::testing::random_tensor;

namespace {

SoftLayout soft(Tensor S, int t) {
  return SoftLayout{std::move(S), t};
}

// Lexicographically first permutation reaching the best total.
std::pair<std::vector<int>, double> brute_force(const std::vector<std::vector<double>>& s,
                                                bool maximize) {
  std::vector<int> p(s.size());
  std::iota(p.begin(), p.end(), 0);
  std::vector<int> best;
  double best_total = 0.0;
  do {
    double total = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) total += s[i][p[i]];
    const bool better = maximize ? total > best_total : total < best_total;
    if (best.empty() || better) {
      best = p;
      best_total = total;
    }
  } while (std::next_permutation(p.begin(), p.end()));
  return {best, best_total};
}

std::vector<std::vector<double>> int_matrix(std::size_t n, std::uint64_t seed, int levels) {
  CounterRng rng(seed, 7);
  std::vector<std::vector<double>> m(n, std::vector<double>(n));
  for (auto& row : m)
    for (auto& v : row) v = static_cast<double>(rng.below(levels));
  return m;
}

HardLayout layout_of(std::vector<int> labels, std::size_t h, std::size_t w, int k) {
  HardLayout m;
  m.height = h;
  m.width = w;
  m.k = k;
  m.labels = std::move(labels);
  m.instance_tags.assign(k + 1, -1);
  for (int l = 1; l <= k; ++l) m.instance_tags[l] = l - 1;
  return m;
}

// Two unit directions, one for pixels inside a disc and one outside.
Tensor disc_soft(std::size_t H, std::size_t W, double cy, double cx, double r) {
  Tensor S({H, W, 4});
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const bool in = std::hypot(y - cy, x - cx) <= r;
      S[(y * W + x) * 4 + (in ? 1 : 0)] = 1.0;
    }
  return S;
}

}  // namespace

TEST_CASE("layout history keeps w+1 entries newest first") {
  LayoutHistory h(2);
  for (int t = 10; t >= 6; --t) h.push(soft(Tensor({4, 3}, static_cast<double>(t)), t));
  REQUIRE(h.entries().size() == 3);
  CHECK(h.entries()[0].t == 6);
  CHECK(h.entries()[2].t == 8);
  CHECK_THROWS_AS(h.push(soft(Tensor({4, 3}), 7)), InputError);
  CHECK_THROWS_AS(h.push(soft(Tensor({4, 2}), 5)), InputError);
}

TEST_CASE("stack_window normalizes each entry and slices recover them") {
  LayoutHistory h(5);
  std::vector<Tensor> raw;
  for (int t = 3; t >= 1; --t) {
    raw.push_back(random_tensor({6, 10}, 40 + t));
    h.push(soft(raw.back(), t));
  }
  const Tensor X = stack_window(h);
  REQUIRE(X.shape() == Shape{6, 30});
  for (std::size_t s = 0; s < 3; ++s) {
    const Tensor& S = raw[2 - s];  // newest first
    for (std::size_t i = 0; i < 6; ++i) {
      double n = 0.0;
      for (std::size_t c = 0; c < 10; ++c) n += S[i * 10 + c] * S[i * 10 + c];
      n = std::sqrt(n);
      for (std::size_t c = 0; c < 10; ++c) CHECK(X[i * 30 + s * 10 + c] == doctest::Approx(S[i * 10 + c] / n));
    }
  }
  LayoutHistory one(0);
  one.push(soft(raw[0], 4));
  CHECK(stack_window(one).cols() == 10);
}

TEST_CASE("spherical k-means splits orthogonal groups exactly") {
  Tensor P({40, 3});
  for (std::size_t i = 0; i < 40; ++i) P[i * 3 + (i < 25 ? 0 : 2)] = 1.0 + 0.1 * static_cast<double>(i % 5);
  const KMeansResult r = spherical_kmeans(P, 2, 3);
  CHECK(r.objective == doctest::Approx(0.0).epsilon(1e-12));
  for (std::size_t i = 1; i < 40; ++i) CHECK((r.assignments[i] == r.assignments[0]) == (i < 25));
}

TEST_CASE("k-means on identical points reaches objective zero") {
  Tensor P({10, 4}, 0.5);
  const KMeansResult r = spherical_kmeans(P, 2, 1);
  CHECK(r.objective == doctest::Approx(0.0).epsilon(1e-12));
  std::set<int> used(r.assignments.begin(), r.assignments.end());
  CHECK(used.size() == 2);
}

TEST_CASE("k-means objective never increases within a restart") {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const Tensor P = random_tensor({120, 6}, seed);
    for (ClusterMetric metric : {ClusterMetric::kCosine, ClusterMetric::kEuclidean}) {
      ClusterConfig cfg;
      cfg.metric = metric;
      const KMeansResult r = spherical_kmeans(P, 4, seed, cfg);
      REQUIRE(r.objective_history.size() == 4);
      for (const auto& h : r.objective_history)
        for (std::size_t i = 1; i < h.size(); ++i) CHECK(h[i] <= h[i - 1] + 1e-12);
    }
  }
}

TEST_CASE("k-means objective matches a direct recomputation") {
  const Tensor P = random_tensor({80, 5}, 17);
  const KMeansResult r = spherical_kmeans(P, 3, 2);
  double s = 0.0;
  for (std::size_t i = 0; i < 80; ++i) {
    double pn = 0.0, dot = 0.0, cn = 0.0;
    const int a = r.assignments[i];
    for (std::size_t c = 0; c < 5; ++c) {
      pn += P[i * 5 + c] * P[i * 5 + c];
      cn += r.centroids[a * 5 + c] * r.centroids[a * 5 + c];
      dot += P[i * 5 + c] * r.centroids[a * 5 + c];
    }
    s += 1.0 - dot / std::sqrt(pn * cn);
  }
  CHECK(r.objective == doctest::Approx(s / 80.0).epsilon(1e-10));
}

TEST_CASE("k-means assignments ignore positive per-point scaling") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Tensor P = random_tensor({60, 5}, seed);
    Tensor Q = P;
    CounterRng rng(seed, 3);
    for (std::size_t i = 0; i < 60; ++i) {
      const double s = 0.1 + 10.0 * rng.uniform_at(i);
      for (std::size_t c = 0; c < 5; ++c) Q[i * 5 + c] *= s;
    }
    CHECK(spherical_kmeans(P, 3, seed).assignments == spherical_kmeans(Q, 3, seed).assignments);
  }
}

TEST_CASE("k-means rejects more clusters than points") {
  CHECK_THROWS_AS(spherical_kmeans(Tensor({2, 3}, 1.0), 3, 0), InputError);
}

TEST_CASE("background is the cluster owning most of the border") {
  std::vector<int> labels(8 * 8, 1);
  for (std::size_t y = 2; y < 6; ++y)
    for (std::size_t x = 2; x < 6; ++x) labels[y * 8 + x] = 0;
  CHECK(select_background(labels, 8, 8, 2) == 1);

  // 64x64 border ring has 252 pixels; split it evenly between 0 and 2.
  std::vector<int> split(64 * 64, 1);
  std::size_t seen = 0;
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 0; x < 64; ++x) {
      if (y != 0 && x != 0 && y != 63 && x != 63) continue;
      split[y * 64 + x] = seen++ < 126 ? 2 : 0;
    }
  CHECK(select_background(split, 64, 64, 3) == 0);
}

TEST_CASE("background election matches a border count") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    CounterRng rng(seed, 11);
    std::vector<int> labels(12 * 9);
    for (auto& l : labels) l = static_cast<int>(rng.below(4));
    std::vector<int> count(4, 0);
    for (std::size_t y = 0; y < 12; ++y)
      for (std::size_t x = 0; x < 9; ++x)
        if (y == 0 || x == 0 || y == 11 || x == 8) ++count[labels[y * 9 + x]];
    const int expect = static_cast<int>(std::max_element(count.begin(), count.end()) - count.begin());
    CHECK(select_background(labels, 12, 9, 4) == expect);
  }
}

TEST_CASE("cluster variance of two orthogonal vectors") {
  Tensor P({2, 2});
  P[0] = 1.0;
  P[3] = 1.0;
  const std::vector<std::size_t> all = {0, 1};
  CHECK(cluster_variance(P, all) == doctest::Approx(std::pow(1.0 - std::sqrt(0.5), 2)).epsilon(1e-12));
}

TEST_CASE("refinement keeps a tight cluster whole") {
  Tensor P({20, 3}, 1.0);
  std::vector<std::size_t> members(20);
  std::iota(members.begin(), members.end(), 0);
  const RefineResult r = refine_cluster(P, members, 0);
  CHECK(r.kept == members);
  CHECK(r.dropped.empty());
  CHECK(r.splits == 0);
}

TEST_CASE("refinement keeps the larger of two separated blobs") {
  Tensor P({100, 2});
  for (std::size_t i = 0; i < 100; ++i) P[i * 2 + (i % 10 < 7 ? 0 : 1)] = 1.0;
  std::vector<std::size_t> members(100);
  std::iota(members.begin(), members.end(), 0);
  const RefineResult r = refine_cluster(P, members, 4);
  REQUIRE(r.kept.size() == 70);
  for (std::size_t i : r.kept) CHECK(i % 10 < 7);
  CHECK(r.dropped.size() == 30);
}

TEST_CASE("refinement partitions its input and terminates") {
  for (std::uint64_t seed = 0; seed < 15; ++seed) {
    const Tensor P = random_tensor({64, 4}, seed);
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < 64; i += 1 + seed % 3) members.push_back(i);
    const RefineResult r = refine_cluster(P, members, seed);
    std::vector<std::size_t> all = r.kept;
    all.insert(all.end(), r.dropped.begin(), r.dropped.end());
    std::sort(all.begin(), all.end());
    CHECK(all == members);
    CHECK(!r.kept.empty());
    CHECK(r.splits < static_cast<int>(members.size()));
    CHECK(cluster_variance(P, r.kept) < ClusterConfig{}.variance_threshold);
  }
}

TEST_CASE("hungarian small cases") {
  Assignment a = hungarian({{5}}, true);
  CHECK(a.permutation == std::vector<int>{0});
  CHECK(a.total == 5.0);
  a = hungarian({{3, 0, 0}, {0, 3, 0}, {0, 0, 3}}, true);
  CHECK(a.permutation == std::vector<int>{0, 1, 2});
  CHECK(a.total == 9.0);
  a = hungarian({{3, 0, 0}, {0, 3, 0}, {0, 0, 3}}, false);
  CHECK(a.total == 0.0);
  CHECK(a.permutation == (std::vector<int>{1, 2, 0}));
}

TEST_CASE("hungarian equals brute force with lexicographic ties") {
  for (std::size_t n = 2; n <= 6; ++n) {
    for (std::uint64_t seed = 0; seed < 60; ++seed) {
      const auto m = int_matrix(n, seed * 10 + n, 4);
      for (bool maximize : {true, false}) {
        const auto [perm, total] = brute_force(m, maximize);
        const Assignment a = hungarian(m, maximize);
        CHECK(a.total == total);
        CHECK(a.permutation == perm);
      }
    }
  }
}

TEST_CASE("hungarian rejects NaN and ragged input") {
  CHECK_THROWS_AS(hungarian({{1, std::nan("")}, {0, 1}}, true), InputError);
  CHECK_THROWS_AS(hungarian({{1, 2}, {3}}, true), InputError);
}

TEST_CASE("pad_square adds zero rows or columns") {
  const auto p = pad_square({{1, 2, 3}});
  REQUIRE(p.size() == 3);
  for (const auto& row : p) CHECK(row.size() == 3);
  CHECK(p[0][2] == 3.0);
  CHECK(p[2][1] == 0.0);
}

TEST_CASE("initial tagging maximizes attention mass") {
  // 1x6 grid, clusters 1 and 2, attention of instance 0 on cluster 2.
  HardLayout raw = layout_of({0, 1, 1, 2, 2, 0}, 1, 6, 2);
  raw.instance_tags = {-1, -1, -1};
  Tensor A({2, 6});
  A[0 * 6 + 3] = 0.6;
  A[0 * 6 + 4] = 0.4;
  A[1 * 6 + 1] = 1.0;
  const PromptSpec prompt = PromptSpec::parse("dog:1,cat:1");
  const TaggingResult r = assign_initial_labels(raw, CrossAttnMaps{A}, prompt);
  CHECK(r.unassigned.empty());
  CHECK(r.layout.label_of_instance(0) > 0);
  for (std::size_t x : {3, 4}) CHECK(r.layout.instance_tags[r.layout.labels[x]] == 0);
  for (std::size_t x : {1, 2}) CHECK(r.layout.instance_tags[r.layout.labels[x]] == 1);
  CHECK_THROWS_AS(assign_initial_labels(raw, CrossAttnMaps{Tensor({2, 6})}, prompt), InputError);
}

TEST_CASE("initial tagging matches brute force on random scores") {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const int k = 4;
    CounterRng rng(seed, 5);
    std::vector<int> labels(40);
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % (k + 1));
    HardLayout raw = layout_of(labels, 5, 8, k);
    raw.instance_tags.assign(k + 1, -1);
    Tensor A({static_cast<std::size_t>(k), 40});
    for (std::size_t i = 0; i < A.size(); ++i) A[i] = static_cast<double>(rng.below(5));
    std::vector<std::vector<double>> score(k, std::vector<double>(k, 0.0));
    for (int j = 0; j < k; ++j)
      for (std::size_t x = 0; x < 40; ++x)
        if (labels[x] > 0) score[j][labels[x] - 1] += A[j * 40 + x];
    const auto [perm, total] = brute_force(score, true);
    const TaggingResult r = assign_initial_labels(raw, CrossAttnMaps{A},
                                                  PromptSpec::parse("dog:2,cat:2"));
    double got = 0.0;
    for (int j = 0; j < k; ++j) {
      const int l = r.layout.label_of_instance(j);
      REQUIRE(l > 0);
      for (std::size_t x = 0; x < 40; ++x)
        if (r.layout.labels[x] == l) got += A[j * 40 + x];
    }
    CHECK(got == doctest::Approx(total));
  }
}

TEST_CASE("temporal relabeling undoes a permutation") {
  const HardLayout prev = layout_of({0, 1, 1, 2, 2, 3, 3, 3, 0}, 3, 3, 3);
  HardLayout raw = prev;
  const std::vector<int> perm = {0, 3, 1, 2};
  for (int& l : raw.labels) l = perm[l];
  raw.instance_tags = {-1, -1, -1, -1};
  const HardLayout r = relabel_temporal(raw, prev);
  CHECK(r.labels == prev.labels);
  CHECK(r.instance_tags == prev.instance_tags);
  CHECK(relabel_temporal(prev, prev) == prev);
}

TEST_CASE("temporal relabeling maximizes total IoU and keeps sizes") {
  for (std::uint64_t seed = 0; seed < 25; ++seed) {
    CounterRng rng(seed, 9);
    const int k = 3;
    std::vector<int> a(30), b(30);
    for (std::size_t i = 0; i < 30; ++i) {
      a[i] = static_cast<int>(rng.below(k + 1));
      b[i] = static_cast<int>(rng.below(k + 1));
    }
    const HardLayout prev = layout_of(b, 5, 6, k);
    HardLayout raw = layout_of(a, 5, 6, k);
    raw.instance_tags.assign(k + 1, -1);
    std::vector<std::vector<double>> score(k, std::vector<double>(k));
    for (int i = 1; i <= k; ++i)
      for (int j = 1; j <= k; ++j) score[i - 1][j - 1] = mask_iou(a, i, b, j);
    const double best = brute_force(score, true).second;
    const HardLayout r = relabel_temporal(raw, prev);
    double got = 0.0;
    for (int l = 1; l <= k; ++l) got += mask_iou(r.labels, l, b, l);
    CHECK(got == doctest::Approx(best));
    auto sizes = [](const std::vector<int>& l) {
      std::multiset<std::size_t> s;
      for (int c = 1; c <= 3; ++c) s.insert(std::count(l.begin(), l.end(), c));
      return s;
    };
    CHECK(sizes(r.labels) == sizes(a));
    CHECK(std::count(r.labels.begin(), r.labels.end(), 0) == std::count(a.begin(), a.end(), 0));
  }
}

TEST_CASE("harden recovers a single clean blob") {
  const std::size_t H = 24, W = 24;
  LayoutHistory h(30);
  h.push(soft(disc_soft(H, W, 12, 12, 6), 50));
  Tensor A({1, H * W}, 1.0 / (H * W));
  const HardenResult r = harden(h, CrossAttnMaps{A}, PromptSpec::parse("dog:1"), 50, 50, 7);
  REQUIRE(r.layout.is_valid());
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const bool in = std::hypot(y - 12.0, x - 12.0) <= 6.0;
      CHECK((r.layout.label_at(y, x) == 1) == in);
    }
  CHECK(r.layout.instance_tags[1] == 0);
  CHECK(r.dropped.empty());
}

TEST_CASE("harden is deterministic and a partition") {
  LayoutHistory h(3);
  for (int t = 50; t >= 47; --t) h.push(soft(random_tensor({16, 16, 10}, t), t));
  Tensor A = random_tensor({2, 256}, 3);
  for (std::size_t i = 0; i < A.size(); ++i) A[i] = std::abs(A[i]);
  const PromptSpec p = PromptSpec::parse("cat:2");
  const HardenResult a = harden(h, CrossAttnMaps{A}, p, 47, 50, 11);
  const HardenResult b = harden(h, CrossAttnMaps{A}, p, 47, 50, 11);
  CHECK(a.layout == b.layout);
  CHECK(a.layout.is_valid());
  CHECK(a.layout.k == 2);
  for (std::size_t i : a.dropped) CHECK(a.layout.labels[i] == 0);
}
