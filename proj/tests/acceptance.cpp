// Acceptance suite: one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria.
#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "decisive/config.hpp"
#include "decisive/dataset.hpp"
#include "decisive/guidance.hpp"
#include "decisive/layout_cluster.hpp"
#include "decisive/metrics.hpp"
#include "decisive/pipeline.hpp"
#include "decisive/soft_layout.hpp"

namespace fs = std::filesystem;
using namespace decisive;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

Tensor normal_tensor(Shape shape, CounterRng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
  return t;
}

// ---- 1: assignment ----------------------------------------------------------

double row_sum(const std::vector<std::vector<double>>& s, const std::vector<int>& perm) {
  double v = 0.0;
  for (std::size_t i = 0; i < perm.size(); ++i) v += s[i][perm[i]];
  return v;
}

Outcome assignment_optimality() {
  const auto t0 = Clock::now();
  int mismatches = 0, total = 0;
  for (int k = 2; k <= 7; ++k) {
    for (int inst = 0; inst < 1000; ++inst) {
      CounterRng rng(static_cast<std::uint64_t>(k * 100000 + inst), 1);
      std::vector<std::vector<double>> s(k, std::vector<double>(k));
      for (auto& row : s)
        for (double& x : row) x = rng.uniform();
      const bool maximize = inst % 2 == 0;
      std::vector<int> perm(k);
      std::iota(perm.begin(), perm.end(), 0);
      double best = maximize ? -1e300 : 1e300;
      do {
        const double v = row_sum(s, perm);
        best = maximize ? std::max(best, v) : std::min(best, v);
      } while (std::next_permutation(perm.begin(), perm.end()));
      const Assignment a = hungarian(s, maximize);
      ++total;
      if (row_sum(s, a.permutation) != best) ++mismatches;
    }
  }
  const double secs = seconds_since(t0);
  return {mismatches == 0 && secs < 10.0,
          std::to_string(total - mismatches) + "/" + std::to_string(total) + " exact, " + fmt("%.2fs", secs)};
}

// ---- 2: gradients -----------------------------------------------------------

HardLayout fixture_layout(CounterRng& rng) {
  HardLayout m;
  m.height = 8;
  m.width = 8;
  m.k = 2;
  m.labels.resize(64);
  for (std::size_t i = 0; i < 64; ++i) m.labels[i] = i < 3 ? static_cast<int>(i) : static_cast<int>(rng.below(3));
  m.instance_tags = {-1, 0, 1};
  return m;
}

SceneSpec fixture_scene(CounterRng& rng, std::size_t C) {
  SceneSpec s;
  s.background_signature.assign(C, 1.0 / std::sqrt(static_cast<double>(C)));
  for (int j = 0; j < 2; ++j) {
    SceneInstance inst;
    inst.instance_id = j;
    inst.class_id = j;
    double n = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      inst.signature.push_back(rng.normal());
      n += inst.signature.back() * inst.signature.back();
    }
    for (double& v : inst.signature) v /= std::sqrt(n);
    inst.radius = 3.0;
    s.instances.push_back(inst);
  }
  return s;
}

Outcome gradient_fidelity() {
  const auto t0 = Clock::now();
  const GuidanceConfig cfg;
  const TrainConfig tc;
  SimConfig sim;
  sim.height = 8;
  sim.width = 8;
  std::map<std::string, double> worst;
  auto note = [&](const std::string& name, double e) { worst[name] = std::max(worst[name], e); };
  for (std::uint64_t f = 0; f < 100; ++f) {
    CounterRng rng(f, 2);
    const HardLayout m = fixture_layout(rng);
    const Tensor S = normal_tensor({64, 4}, rng);
    const Tensor A = normal_tensor({2, 64}, rng);

    GroundTruthMasks gt;
    gt.height = 8;
    gt.width = 8;
    gt.labels = m.labels;
    gt.instance_classes = {0, 1};
    CounterRng trng(f, 3);
    const auto triplets = sample_triplets(gt, trng, tc);
    note("triplet", grad_check([&](Graph&, Var s) { return triplet_loss(s, triplets, tc.margin); }, S).max_rel_error);
    note("variance", grad_check([&](Graph&, Var s) { return variance_loss(s, m, VarianceMode::kDistance); }, S)
                         .max_rel_error);
    note("variance_verbatim",
         grad_check([&](Graph&, Var s) { return variance_loss(s, m, VarianceMode::kVerbatim); }, S).max_rel_error);
    note("dice", grad_check(
                     [&](Graph&, Var s) {
                       return dice_loss(prob_layout(s, cluster_means_graph(s, m), {true, true, true}, cfg.tau), m);
                     },
                     S)
                     .max_rel_error);
    note("cross", grad_check([&](Graph&, Var a) { return cross_loss(ops::softmax(a, 1.0), m); }, A).max_rel_error);
    note("decisive",
         grad_check([&](Graph& g, Var s) { return decisive_loss(s, m, ops::softmax(g.constant(A), 1.0), cfg).total; },
                    S)
             .max_rel_error);

    const SceneSpec scene = fixture_scene(rng, sim.latent_channels);
    const HeadParams params = HeadParams::init(f, sim.latent_channels);
    const Tensor z = normal_tensor({8, 8, sim.latent_channels}, rng);
    note("chain", grad_check(
                      [&](Graph& g, Var zv) {
                        return guidance_objective(g, zv, 45, 50, m, scene, bind_params(g, params, false), cfg, sim)
                            .total;
                      },
                      z, 1e-5, Stencil::kThreePoint)
                      .max_rel_error);
  }
  const double secs = seconds_since(t0);
  bool ok = secs < 60.0;
  std::string detail;
  for (const auto& [name, e] : worst) {
    ok = ok && e <= (name == "chain" ? 1e-3 : 1e-4);
    detail += name + "=" + fmt("%.1e", e) + " ";
  }
  return {ok, detail + fmt("%.1fs", secs)};
}

// ---- 3: config snapshot -----------------------------------------------------

Outcome config_snapshot() {
  std::ifstream in(std::string(DECISIVE_GOLDEN_DIR) + "/default_config.txt");
  std::stringstream ss;
  ss << in.rdbuf();
  const Config c;
  const bool golden = in && config_to_text(c) == ss.str();
  const bool values = c.sim.steps == 50 && c.guidance.guided_steps == 15 && c.guidance.iterations == 5 &&
                      c.guidance.alpha_cross == 0.3 && c.guidance.alpha_var == 0.21 &&
                      c.guidance.alpha_dice == 0.49 && c.guidance.tau == 15.0 && c.cluster.window == 30 &&
                      c.cluster.variance_threshold == 0.025 && c.train.margin == 0.5 && kSoftLayoutDim == 10 &&
                      c.train.triplets_per_image == 50 && c.train.steps == 5000 && c.train.learning_rate == 1e-4;
  return {golden && values, std::string("golden ") + (golden ? "match" : "MISMATCH") + ", published values " +
                                (values ? "match" : "MISMATCH")};
}

// ---- 4: clustering ----------------------------------------------------------

SoftLayout blob_layout(const std::vector<int>& region, std::size_t n, const Tensor& dirs, CounterRng& rng, int t) {
  const std::size_t d = dirs.cols();
  Tensor S({n, n, d});
  for (std::size_t i = 0; i < n * n; ++i)
    for (std::size_t c = 0; c < d; ++c) S[i * d + c] = dirs.at(region[i], c) + 0.35 * rng.normal();
  return {std::move(S), t};
}

Outcome clustering_invariants() {
  const auto t0 = Clock::now();
  int monotone_fail = 0, scale_fail = 0;
  for (std::uint64_t inst = 0; inst < 500; ++inst) {
    CounterRng rng(inst, 4);
    const std::size_t n = 30 + rng.below(90), D = 3 + rng.below(12);
    const int k = 2 + static_cast<int>(rng.below(5));
    Tensor P = normal_tensor({n, D}, rng);
    const KMeansResult r = spherical_kmeans(P, k, inst);
    for (const auto& h : r.objective_history)
      for (std::size_t i = 1; i < h.size(); ++i)
        if (h[i] > h[i - 1] + 1e-12 * std::abs(h[i - 1])) ++monotone_fail;
    Tensor Q = P;
    for (std::size_t i = 0; i < n; ++i) {
      const double s = std::exp(4.0 * rng.uniform() - 2.0);
      for (std::size_t c = 0; c < D; ++c) Q[i * D + c] *= s;
    }
    if (spherical_kmeans(Q, k, inst).assignments != r.assignments) ++scale_fail;
  }

  int refine_fail = 0;
  std::size_t dropped_total = 0;
  const std::size_t n = 16, d = kSoftLayoutDim;
  for (std::uint64_t f = 0; f < 200; ++f) {
    CounterRng rng(f, 5);
    const int k = 1 + static_cast<int>(rng.below(3));
    // Discs of random size; several blobs may share a label to force splits.
    std::vector<int> region(n * n, 0);
    const int blobs = k + static_cast<int>(rng.below(2));
    for (int b = 0; b < blobs; ++b) {
      const double cy = rng.uniform() * n, cx = rng.uniform() * n, r = 2.0 + 3.0 * rng.uniform();
      for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x)
          if (std::hypot(y - cy, x - cx) < r) region[y * n + x] = 1 + b;
    }
    const Tensor dirs = normal_tensor({static_cast<std::size_t>(blobs) + 1, d}, rng);
    LayoutHistory h(3);
    for (int t = 3; t >= 1; --t) h.push(blob_layout(region, n, dirs, rng, t));
    Tensor A({static_cast<std::size_t>(k), n * n});
    for (std::size_t i = 0; i < A.size(); ++i) A[i] = std::abs(rng.normal()) + 1e-3;
    const PromptSpec prompt = PromptSpec::parse("dog:" + std::to_string(k));
    const HardenResult hr = harden(h, CrossAttnMaps{A}, prompt, 1, 50, f);
    dropped_total += hr.dropped.size();
    bool ok = hr.layout.is_valid();
    for (std::size_t i : hr.dropped) ok = ok && hr.layout.labels[i] == 0;

    // Direct refinement of one mixed cluster: a partition, with a bounded number of splits.
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < n * n; ++i)
      if (region[i] != 0) members.push_back(i);
    if (!members.empty()) {
      const Tensor X = stack_window(h);
      const RefineResult rr = refine_cluster(X, members, f);
      std::vector<std::size_t> all = rr.kept;
      all.insert(all.end(), rr.dropped.begin(), rr.dropped.end());
      std::sort(all.begin(), all.end());
      ok = ok && all == members && !rr.kept.empty() && rr.splits <= static_cast<int>(members.size()) - 1;
    }
    if (!ok) ++refine_fail;
  }
  const double secs = seconds_since(t0);
  return {monotone_fail == 0 && scale_fail == 0 && refine_fail == 0,
          "objective increases " + std::to_string(monotone_fail) + ", scaling changes " +
              std::to_string(scale_fail) + "/500, refine failures " + std::to_string(refine_fail) +
              "/200 (dropped " + std::to_string(dropped_total) + " px), " + fmt("%.1fs", secs)};
}

// ---- 5: training ------------------------------------------------------------

// Hardens the last `window` stored timesteps of a record with the trained head.
double late_hardening_iou(const DatasetRecord& r, const HeadParams& params, const SimConfig& sim, int window) {
  std::vector<std::size_t> slots(r.timesteps.size());
  std::iota(slots.begin(), slots.end(), 0);
  std::sort(slots.begin(), slots.end(), [&](std::size_t a, std::size_t b) { return r.timesteps[a] > r.timesteps[b]; });
  slots.erase(slots.begin(), slots.end() - std::min<std::size_t>(window, slots.size()));
  LayoutHistory hist(30);
  int t = static_cast<int>(slots.size());
  FeatureStack last;
  for (std::size_t s : slots) {
    last = r.feature_stack(s);
    SoftLayout sl = predict(last, params);
    sl.t = t--;
    hist.push(std::move(sl));
  }
  const SceneSpec scene = derive_scene(init_latent(r.seed, sim), r.prompt, r.seed, sim);
  Graph g;
  const Var f = g.constant(last.features.reshaped({r.height * r.width, r.channels}));
  const CrossAttnMaps attn{cross_attention_graph(f, scene, nullptr, sim).value()};
  const HardenResult hr = harden(hist, attn, r.prompt, 1, sim.steps, r.seed);
  return layout_iou(hr.layout, r.masks);
}

Outcome training_efficacy(HeadParams& trained, int jobs) {
  const auto t0 = Clock::now();
  const SimConfig sim;
  DatasetConfig dc;
  dc.scenes = 200;
  dc.seed = 0;
  const Dataset data = generate_dataset(dc, sim, jobs);
  TrainConfig tc;
  tc.steps = 2000;
  TrainConfig none = tc;
  none.steps = 0;
  const std::uint64_t seed = 7;
  const double before = evaluate_triplet_loss(data.records, train(data.records, none, seed).params, tc, 99);
  trained = train(data.records, tc, seed).params;
  const double after = evaluate_triplet_loss(data.records, trained, tc, 99);

  DatasetConfig hc = dc;
  hc.scenes = 40;
  hc.seed = 1;
  const Dataset held = generate_dataset(hc, sim, jobs);
  const std::size_t n = std::min<std::size_t>(20, held.records.size());
  std::vector<double> iou(n);
  parallel_for(n, jobs, [&](std::size_t i) { iou[i] = late_hardening_iou(held.records[i], trained, sim, 3); });
  const double mean_iou = std::accumulate(iou.begin(), iou.end(), 0.0) / static_cast<double>(n);
  const double secs = seconds_since(t0);
  return {after < 0.5 * before && n == 20 && mean_iou >= 0.75 && secs < 600.0,
          "loss " + fmt("%.3f", before) + " -> " + fmt("%.3f", after) + " (ratio " + fmt("%.3f", after / before) +
              ", need < 0.5), held-out late IoU " + fmt("%.3f", mean_iou) + " over " + std::to_string(n) +
              " (need >= 0.75), " + fmt("%.0fs", secs)};
}

// ---- 6 and 7: generation ----------------------------------------------------

const std::vector<std::string> kPrompts = {"dog:2", "cat:1,dog:1", "bird:3", "car:1,horse:2"};

struct VariantRuns {
  std::vector<RunMetrics> metrics;
  std::vector<HardLayout> finals;
};

VariantRuns run_seeds(Variant v, const HeadParams& params, const PipelineConfig& cfg, int jobs) {
  VariantRuns out;
  out.metrics.resize(20);
  out.finals.resize(20);
  parallel_for(20, jobs, [&](std::size_t i) {
    RunConfig run;
    run.prompt = PromptSpec::parse(kPrompts[i % kPrompts.size()]);
    run.seed = i;
    run.variant = v;
    const GenerationTrace tr = generate(run, params, cfg);
    out.metrics[i] = evaluate_trace(tr, cfg);
    out.finals[i] = tr.final_layout();
  });
  return out;
}

double mean_of(const std::vector<RunMetrics>& m, double RunMetrics::*field) {
  double s = 0.0;
  for (const auto& x : m) s += x.*field;
  return s / static_cast<double>(m.size());
}

Outcome decisiveness_effect(const HeadParams& params, int jobs, VariantRuns& full) {
  const auto t0 = Clock::now();
  const PipelineConfig cfg = Config{}.pipeline();
  full = run_seeds(Variant::kFull, params, cfg, jobs);
  const VariantRuns plain = run_seeds(Variant::kNoDecisive, params, cfg, jobs);
  const VariantRuns no_dice = run_seeds(Variant::kNoDice, params, cfg, jobs);
  const double tc_full = mean_of(full.metrics, &RunMetrics::temporal_consistency);
  const double tc_plain = mean_of(plain.metrics, &RunMetrics::temporal_consistency);
  const double tc_nd = mean_of(no_dice.metrics, &RunMetrics::temporal_consistency);
  const double iou_full = mean_of(full.metrics, &RunMetrics::final_iou);
  const double iou_plain = mean_of(plain.metrics, &RunMetrics::final_iou);
  const double secs = seconds_since(t0);
  return {tc_full >= tc_plain + 0.05 && iou_full > iou_plain && tc_nd < tc_full && secs < 900.0,
          "TC full " + fmt("%.3f", tc_full) + " vs no_decisive " + fmt("%.3f", tc_plain) + " vs no_dice " +
              fmt("%.3f", tc_nd) + ", IoU full " + fmt("%.3f", iou_full) + " vs no_decisive " +
              fmt("%.3f", iou_plain) + ", " + fmt("%.0fs", secs)};
}

Outcome diversity_behavior(const HeadParams& params, const VariantRuns& full) {
  const PipelineConfig cfg = Config{}.pipeline();
  bool ok = true;
  std::string detail;
  for (std::size_t p = 0; p < kPrompts.size(); ++p) {
    std::vector<HardLayout> group;
    for (std::size_t i = p; i < full.finals.size(); i += kPrompts.size()) group.push_back(full.finals[i]);
    const double d = diversity(group);
    ok = ok && group.size() == 5 && d >= 0.2;
    detail += kPrompts[p] + "=" + fmt("%.3f", d) + " ";
  }
  RunConfig run;
  run.prompt = PromptSpec::parse(kPrompts[0]);
  run.seed = 0;
  const HardLayout again = generate(run, params, cfg).final_layout();
  const double dup = diversity({full.finals[0], again, full.finals[0]});
  ok = ok && dup == 0.0;
  return {ok, detail + "duplicate-seed=" + fmt("%g", dup)};
}

// ---- 8: determinism ---------------------------------------------------------

int run_cli(const std::string& args) {
  const std::string cmd = std::string(DECISIVE_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::map<std::string, std::string> tree_contents(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    out[fs::relative(e.path(), root).string()] = std::string(std::istreambuf_iterator<char>(in), {});
  }
  return out;
}

Outcome determinism() {
  const auto t0 = Clock::now();
  const fs::path base = fs::temp_directory_path() / "decisive_acceptance";
  const std::string small =
      "--set sim.height=24 --set sim.width=24 --set sim.steps=10 --set guidance.guided_steps=4 "
      "--set guidance.iterations=2 --set cluster.window=4 --set data.scenes=6 ";
  std::vector<std::map<std::string, std::string>> trees;
  int failures = 0;
  for (int jobs : {1, 4}) {
    const fs::path d = base / ("jobs" + std::to_string(jobs));
    fs::remove_all(d);
    fs::create_directories(d);
    const std::string j = small + "--jobs " + std::to_string(jobs) + " ";
    const std::string ck = (d / "train" / "checkpoint.json").string();
    const std::vector<std::string> commands = {
        j + "gen-data --seed 3 --out " + (d / "data.jsonl").string(),
        j + "train --steps 30 --data " + (d / "data.jsonl").string() + " --out " + (d / "train").string(),
        j + "generate --ckpt " + ck + " --prompt dog:2 --seed 1 --out " + (d / "traces/a").string(),
        j + "generate --ckpt " + ck + " --prompt cat:1,dog:1 --seed 2 --full-trace --out " +
            (d / "traces/b").string(),
        j + "eval --traces " + (d / "traces").string() + " --out " + (d / "eval").string(),
        j + "render --trace " + (d / "traces/a").string() + " --out " + (d / "render").string(),
        j + "ablate --ckpt " + ck + " --seeds 0..2 --variants full,no_decisive,no_dice --out " +
            (d / "ablate").string(),
    };
    for (const auto& c : commands)
      if (run_cli(c) != 0) ++failures;
    trees.push_back(tree_contents(d));
  }
  const bool same = trees[0] == trees[1];
  const double secs = seconds_since(t0);
  return {failures == 0 && same && !trees[0].empty(),
          std::to_string(trees[0].size()) + " artifacts " + (same ? "byte-identical" : "DIFFER") + ", " +
              std::to_string(failures) + " command failures, " + fmt("%.0fs", secs)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance suite"};
  std::vector<int> only;
  int jobs = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  app.add_option("--only", only, "Criteria to run (default: all)")->check(CLI::Range(1, 8));
  app.add_option("--jobs", jobs, "Worker threads")->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);
  auto wanted = [&](int c) { return only.empty() || std::find(only.begin(), only.end(), c) != only.end(); };

  int failed = 0;
  auto report = [&](int id, const char* name, const Outcome& o) {
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << id << " " << name << ": " << o.detail << std::endl;
    if (!o.pass) ++failed;
  };
  auto guarded = [&](int id, const char* name, const std::function<Outcome()>& fn) {
    if (!wanted(id)) return;
    try {
      report(id, name, fn());
    } catch (const std::exception& e) {
      report(id, name, {false, std::string("error: ") + e.what()});
    }
  };

  guarded(1, "assignment optimality", assignment_optimality);
  guarded(2, "gradient fidelity", gradient_fidelity);
  guarded(3, "hyperparameter snapshot", config_snapshot);
  guarded(4, "clustering invariants", clustering_invariants);

  HeadParams trained;
  bool have_params = false;
  if (wanted(5) || wanted(6) || wanted(7)) {
    Outcome o;
    try {
      o = training_efficacy(trained, jobs);
      have_params = true;
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    if (wanted(5)) report(5, "training efficacy", o);
  }
  VariantRuns full;
  bool have_full = false;
  guarded(6, "decisiveness effect", [&]() -> Outcome {
    if (!have_params) return {false, "no trained head"};
    Outcome o = decisiveness_effect(trained, jobs, full);
    have_full = true;
    return o;
  });
  guarded(7, "diversity behavior", [&]() -> Outcome {
    if (!have_params) return {false, "no trained head"};
    if (!have_full) {
      full = run_seeds(Variant::kFull, trained, Config{}.pipeline(), jobs);
      have_full = true;
    }
    return diversity_behavior(trained, full);
  });
  guarded(8, "determinism", determinism);
  return failed;
}
