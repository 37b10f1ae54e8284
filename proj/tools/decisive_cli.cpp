#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "decisive/codec.hpp"
#include "decisive/config.hpp"
#include "decisive/errors.hpp"
#include "decisive/render.hpp"

namespace fs = std::filesystem;
using namespace decisive;
using Json = nlohmann::ordered_json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInput = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitInfeasible = 4;

const std::vector<std::string> kDefaultPrompts = {"dog:2", "cat:1,dog:1", "bird:3", "car:1,horse:2"};

struct Common {
  std::string config_file;
  std::vector<std::string> overrides;
  int jobs = 1;
};

Config load_effective(const Common& c) {
  Config cfg;
  if (!c.config_file.empty()) cfg = load_config_file(c.config_file);
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw InputError("--set expects key=value, got '" + kv + "'");
    set_key(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  return cfg;
}

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag, std::uint64_t fallback) {
  if (flag) return *flag;
  if (const char* env = std::getenv("DECISIVE_SEED")) {
    std::uint64_t v = 0;
    const std::string_view s(env);
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
      throw InputError("DECISIVE_SEED is not an unsigned integer: '" + std::string(s) + "'");
    }
    return v;
  }
  return fallback;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  out << text;
  if (!out) throw InputError("write failed for " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw InputError("cannot create directory " + dir.string() + ": " + ec.message());
}

void echo_config(const fs::path& dir, const Config& cfg) {
  write_text(dir / "config.json", config_to_json(cfg) + "\n");
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

Json rle_json(const std::vector<int>& labels) {
  Json runs = Json::array();
  for (const auto& [l, n] : rle_encode(labels)) runs.push_back({l, n});
  return runs;
}

std::vector<int> rle_from_json(const nlohmann::json& runs) {
  std::vector<std::pair<int, std::size_t>> r;
  for (const auto& run : runs) r.emplace_back(run.at(0).get<int>(), run.at(1).get<std::size_t>());
  return rle_decode(r);
}

// ---- gen-data ----

int cmd_gen_data(const Common& c, const std::string& out, std::optional<std::size_t> scenes,
                 std::optional<std::uint64_t> seed) {
  Config cfg = load_effective(c);
  if (scenes) cfg.data.scenes = *scenes;
  cfg.data.seed = resolve_seed(seed, cfg.data.seed);
  const fs::path path(out);
  if (path.has_parent_path()) make_dir(path.parent_path());
  const DatasetStats st = write_dataset_file(out, cfg.data, cfg.sim, c.jobs);
  write_text(out + ".config.json", config_to_json(cfg) + "\n");
  std::cout << "wrote " << st.kept << " records to " << out << " (generated " << st.generated
            << ", ambiguous " << st.ambiguous << ", infeasible " << st.infeasible << ")\n";
  return kExitOk;
}

// ---- train ----

int cmd_train(const Common& c, const std::string& data, const std::string& out,
              std::optional<int> steps, std::optional<double> lr, std::optional<std::uint64_t> seed) {
  Config cfg = load_effective(c);
  if (steps) set_key(cfg, "train.steps", std::to_string(*steps));
  if (lr) set_key(cfg, "train.learning_rate", fmt(*lr));
  const std::uint64_t s = resolve_seed(seed, 0);
  const Dataset d = read_dataset(data);
  if (d.records.empty()) throw InputError("dataset " + data + " has no records");
  cfg.sim = d.sim;
  cfg.data = d.config;
  const fs::path dir(out);
  make_dir(dir);
  std::cout << "training on " << d.records.size() << " records for " << cfg.train.steps << " steps\n";
  const TrainResult r = train(d.records, cfg.train, s);
  Checkpoint ck;
  ck.params = r.params;
  ck.train = cfg.train;
  ck.step = r.steps;
  ck.config_hash = d.config_hash;
  ck.loss_curve = r.loss_curve;
  save_checkpoint(ck, (dir / "checkpoint.json").string());
  std::string csv = "step,loss\n";
  for (std::size_t i = 0; i < r.loss_curve.size(); ++i) {
    const int end = std::min<int>(r.steps, static_cast<int>((i + 1) * cfg.train.log_every));
    csv += std::to_string(end) + "," + fmt(r.loss_curve[i]) + "\n";
  }
  write_text(dir / "loss.csv", csv);
  echo_config(dir, cfg);
  if (!r.loss_curve.empty()) std::cout << "final mean loss " << r.loss_curve.back() << "\n";
  return kExitOk;
}

// ---- generate ----

Json trace_json(const GenerationTrace& tr, const PipelineConfig& cfg) {
  Json j;
  j["prompt"] = tr.run.prompt.to_string();
  j["background"] = tr.run.prompt.background_class;
  j["seed"] = tr.run.seed;
  j["variant"] = variant_name(tr.run.variant);
  j["height"] = cfg.sim.height;
  j["width"] = cfg.sim.width;
  j["steps"] = cfg.sim.steps;
  j["failed"] = tr.failed;
  j["error"] = tr.error;
  Json scene = Json::array();
  for (const auto& inst : tr.scene.instances) {
    scene.push_back({{"instance", inst.instance_id},
                     {"class", inst.class_id},
                     {"row", inst.row},
                     {"col", inst.col},
                     {"radius", inst.radius}});
  }
  j["scene"] = scene;
  j["ground_truth"] = {{"runs", rle_json(tr.ground_truth.labels)},
                       {"instance_classes", tr.ground_truth.instance_classes}};
  Json steps = Json::array();
  for (const auto& s : tr.steps) {
    steps.push_back({{"t", s.t},
                     {"k", s.hard.k},
                     {"runs", rle_json(s.hard.labels)},
                     {"instance_tags", s.hard.instance_tags},
                     {"latent_checksum", hex64(s.latent_checksum)}});
  }
  j["layouts"] = steps;
  j["checksum"] = hex64(tr.checksum());
  return j;
}

std::string step_csv(const GenerationTrace& tr) {
  std::string csv =
      "t,guided,aborted,loss_first,loss_last,cross,variance,dice,attention_entropy,unassigned,"
      "consistency,latent_checksum\n";
  for (std::size_t i = 0; i < tr.steps.size(); ++i) {
    const StepRecord& s = tr.steps[i];
    const bool has = !s.losses.empty();
    const LossValues first = has ? s.losses.front() : LossValues{};
    const double last = has ? s.losses.back().total : 0.0;
    const double cons = i == 0 ? 1.0 : pair_consistency(s.hard, tr.steps[i - 1].hard);
    csv += std::to_string(s.t) + "," + (s.guided ? "1" : "0") + "," + (s.guidance_aborted ? "1" : "0") + "," +
           (has ? fmt(first.total) : "") + "," + (has ? fmt(last) : "") + "," + (has ? fmt(first.cross) : "") +
           "," + (has ? fmt(first.variance) : "") + "," + (has ? fmt(first.dice) : "") + "," +
           fmt(s.attention_entropy) + "," + std::to_string(s.unassigned.size()) + "," + fmt(cons) + "," +
           hex64(s.latent_checksum) + "\n";
  }
  return csv;
}

Json metrics_json(const RunMetrics& m) {
  return {{"temporal_consistency", m.temporal_consistency},
          {"final_iou", m.final_iou},
          {"count_f1", m.count_f1},
          {"neglected", m.neglected}};
}

int cmd_generate(const Common& c, const std::string& ckpt, const std::string& prompt,
                 std::optional<std::uint64_t> seed, const std::string& out, const std::string& variant,
                 bool full_trace) {
  const Config cfg = load_effective(c);
  const PipelineConfig pc = cfg.pipeline();
  RunConfig run;
  run.prompt = PromptSpec::parse(prompt);
  run.seed = resolve_seed(seed, 0);
  run.variant = parse_variant(variant);
  run.full_trace = full_trace;
  const Checkpoint ck = load_checkpoint(ckpt);

  const GenerationTrace tr = generate(run, ck.params, pc);
  const fs::path dir(out);
  make_dir(dir / "layouts");
  for (const auto& s : tr.steps) {
    char name[32];
    std::snprintf(name, sizeof name, "t%04d", s.t);
    write_layout_png(s.hard, (dir / "layouts" / (std::string(name) + "_hard.png")).string());
    write_soft_png(s.soft, (dir / "layouts" / (std::string(name) + "_soft.png")).string());
  }
  if (!tr.steps.empty()) write_layout_png(tr.final_layout(), (dir / "final.png").string());
  write_text(dir / "metrics.csv", step_csv(tr));
  write_text(dir / "trace.json", trace_json(tr, pc).dump(1) + "\n");
  if (full_trace) {
    Json lat = Json::array();
    for (const auto& s : tr.steps) lat.push_back({{"t", s.t}, {"z", encode_f64(s.latent->data())}});
    write_text(dir / "latents.json", lat.dump() + "\n");
  }
  Json summary;
  summary["prompt"] = run.prompt.to_string();
  summary["seed"] = run.seed;
  summary["variant"] = variant;
  summary["failed"] = tr.failed;
  summary["error"] = tr.error;
  summary["warnings"] = tr.warnings;
  summary["checksum"] = hex64(tr.checksum());
  if (!tr.failed) summary["metrics"] = metrics_json(evaluate_trace(tr, pc));
  write_text(dir / "summary.json", summary.dump(1) + "\n");
  echo_config(dir, cfg);
  for (const auto& w : tr.warnings) std::cerr << "warning: " << w << "\n";
  if (tr.failed) {
    std::cerr << "error: run failed: " << tr.error << "\n";
    return kExitNumeric;
  }
  std::cout << "wrote " << tr.steps.size() << " layouts to " << dir.string() << "\n";
  return kExitOk;
}

// ---- eval ----

struct LoadedTrace {
  std::string name;
  std::string prompt;
  std::string variant;
  std::uint64_t seed = 0;
  int steps = 0;
  std::vector<HardLayout> layouts;
  GroundTruthMasks gt;
};

LoadedTrace load_trace(const fs::path& file) {
  LoadedTrace t;
  try {
    const auto j = nlohmann::json::parse(read_text(file));
    t.prompt = j.at("prompt").get<std::string>();
    t.variant = j.at("variant").get<std::string>();
    t.seed = j.at("seed").get<std::uint64_t>();
    t.steps = j.at("steps").get<int>();
    const std::size_t H = j.at("height").get<std::size_t>(), W = j.at("width").get<std::size_t>();
    t.gt.height = H;
    t.gt.width = W;
    t.gt.labels = rle_from_json(j.at("ground_truth").at("runs"));
    t.gt.instance_classes = j.at("ground_truth").at("instance_classes").get<std::vector<int>>();
    for (const auto& s : j.at("layouts")) {
      HardLayout m;
      m.height = H;
      m.width = W;
      m.k = s.at("k").get<int>();
      m.labels = rle_from_json(s.at("runs"));
      m.instance_tags = s.at("instance_tags").get<std::vector<int>>();
      if (!m.is_valid() || m.size() != H * W) throw InputError("invalid layout in " + file.string());
      t.layouts.push_back(std::move(m));
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError(file.string() + ": " + e.what());
  }
  t.name = file.parent_path().filename().string();
  return t;
}

int cmd_eval(const Common& c, const std::string& traces, const std::string& out) {
  const Config cfg = load_effective(c);
  if (!fs::is_directory(traces)) throw InputError("trace directory " + traces + " does not exist");
  std::vector<fs::path> files;
  if (fs::exists(fs::path(traces) / "trace.json")) files.push_back(fs::path(traces) / "trace.json");
  for (const auto& e : fs::directory_iterator(traces)) {
    if (e.is_directory() && fs::exists(e.path() / "trace.json")) files.push_back(e.path() / "trace.json");
  }
  if (files.empty()) throw InputError("no traces found under " + traces);
  std::sort(files.begin(), files.end());

  std::vector<LoadedTrace> loaded(files.size());
  parallel_for(files.size(), c.jobs, [&](std::size_t i) { loaded[i] = load_trace(files[i]); });

  std::string csv = "trace,prompt,variant,seed,temporal_consistency,final_iou,count_f1\n";
  Json rows = Json::array();
  std::map<std::string, std::vector<HardLayout>> by_prompt;
  std::vector<double> tc, iou, f1;
  for (const auto& t : loaded) {
    if (t.layouts.size() < 2) throw InputError("trace " + t.name + " has fewer than two layouts");
    const PromptSpec p = PromptSpec::parse(t.prompt);
    const double m_tc = temporal_consistency(t.layouts, t.steps);
    const double m_iou = layout_iou(t.layouts.back(), t.gt);
    const double m_f1 = count_f1(t.layouts.back(), p, cfg.metrics).f1;
    tc.push_back(m_tc);
    iou.push_back(m_iou);
    f1.push_back(m_f1);
    by_prompt[t.prompt + "|" + t.variant].push_back(t.layouts.back());
    csv += t.name + ",\"" + t.prompt + "\"," + t.variant + "," + std::to_string(t.seed) + "," + fmt(m_tc) + "," +
           fmt(m_iou) + "," + fmt(m_f1) + "\n";
    rows.push_back({{"trace", t.name},
                    {"prompt", t.prompt},
                    {"variant", t.variant},
                    {"seed", t.seed},
                    {"temporal_consistency", m_tc},
                    {"final_iou", m_iou},
                    {"count_f1", m_f1}});
  }
  auto summary_json = [](const Summary& s) {
    return Json{{"mean", s.mean}, {"stddev", s.stddev}, {"count", s.count}};
  };
  Json report;
  report["rows"] = rows;
  report["summary"] = {{"temporal_consistency", summary_json(summarize(tc))},
                       {"final_iou", summary_json(summarize(iou))},
                       {"count_f1", summary_json(summarize(f1))}};
  Json div = Json::array();
  for (const auto& [key, layouts] : by_prompt) {
    if (layouts.size() < 2) continue;
    const auto bar = key.find('|');
    div.push_back({{"prompt", key.substr(0, bar)}, {"variant", key.substr(bar + 1)},
                   {"runs", layouts.size()}, {"diversity", diversity(layouts)}});
  }
  report["diversity"] = div;
  const fs::path dir(out);
  make_dir(dir);
  write_text(dir / "eval.csv", csv);
  write_text(dir / "eval.json", report.dump(1) + "\n");
  echo_config(dir, cfg);
  std::cout << "evaluated " << loaded.size() << " traces: mean temporal consistency "
            << summarize(tc).mean << ", mean final IoU " << summarize(iou).mean << "\n";
  return kExitOk;
}

// ---- ablate ----

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> out;
  auto num = [&](std::string_view s) {
    std::uint64_t v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
      throw InputError("bad seed list '" + text + "'");
    }
    return v;
  };
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto dots = item.find("..");
    if (dots == std::string::npos) {
      out.push_back(num(item));
    } else {
      const std::uint64_t lo = num(std::string_view(item).substr(0, dots));
      const std::uint64_t hi = num(std::string_view(item).substr(dots + 2));
      if (hi < lo) throw InputError("bad seed range '" + item + "'");
      for (std::uint64_t s = lo; s <= hi; ++s) out.push_back(s);
    }
  }
  if (out.empty()) throw InputError("empty seed list");
  return out;
}

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, sep))
    if (!item.empty()) out.push_back(item);
  return out;
}

int cmd_ablate(const Common& c, const std::string& ckpt, const std::string& seeds,
               const std::string& variants, const std::string& prompts, const std::string& out) {
  const Config cfg = load_effective(c);
  const std::vector<std::uint64_t> seed_list = parse_seeds(seeds);
  std::vector<Variant> vs;
  for (const auto& v : split(variants, ',')) vs.push_back(parse_variant(v));
  if (vs.empty()) throw InputError("no variants given");
  std::vector<PromptSpec> ps;
  for (const auto& p : prompts.empty() ? kDefaultPrompts : split(prompts, ';')) ps.push_back(PromptSpec::parse(p));
  const Checkpoint ck = load_checkpoint(ckpt);

  const AblationReport rep = ablate(vs, ps, seed_list, ck.params, cfg.pipeline(), c.jobs);
  std::string csv = "variant,prompt,seed,failed,temporal_consistency,final_iou,count_f1,neglected,error\n";
  Json rows = Json::array();
  for (const auto& r : rep.rows) {
    csv += variant_name(r.variant) + ",\"" + r.prompt + "\"," + std::to_string(r.seed) + "," +
           (r.failed ? "1" : "0") + "," + fmt(r.metrics.temporal_consistency) + "," + fmt(r.metrics.final_iou) +
           "," + fmt(r.metrics.count_f1) + "," + std::to_string(r.metrics.neglected) + ",\"" + r.error + "\"\n";
    Json row = {{"variant", variant_name(r.variant)}, {"prompt", r.prompt}, {"seed", r.seed}, {"failed", r.failed}};
    if (r.failed) {
      row["error"] = r.error;
    } else {
      row["metrics"] = metrics_json(r.metrics);
    }
    rows.push_back(row);
  }
  Json summary = Json::array();
  for (const auto& s : rep.summary) {
    auto sj = [](const Summary& x) { return Json{{"mean", x.mean}, {"stddev", x.stddev}}; };
    summary.push_back({{"variant", variant_name(s.variant)},
                       {"runs", s.runs},
                       {"failures", s.failures},
                       {"temporal_consistency", sj(s.temporal_consistency)},
                       {"final_iou", sj(s.final_iou)},
                       {"count_f1", sj(s.count_f1)}});
    std::cout << variant_name(s.variant) << ": temporal consistency " << s.temporal_consistency.mean
              << ", final IoU " << s.final_iou.mean << ", count F1 " << s.count_f1.mean << " (" << s.runs
              << " runs, " << s.failures << " failed)\n";
  }
  const fs::path dir(out);
  make_dir(dir);
  write_text(dir / "ablation.csv", csv);
  write_text(dir / "ablation.json", Json{{"rows", rows}, {"summary", summary}}.dump(1) + "\n");
  echo_config(dir, cfg);
  return kExitOk;
}

// ---- render ----

int cmd_render(const Common& c, const std::string& trace, const std::string& out) {
  const Config cfg = load_effective(c);
  fs::path file(trace);
  if (fs::is_directory(file)) file /= "trace.json";
  const LoadedTrace t = load_trace(file);
  const fs::path dir(out);
  make_dir(dir);
  for (std::size_t i = 0; i < t.layouts.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "t%04d_hard.png", t.steps - static_cast<int>(i));
    write_layout_png(t.layouts[i], (dir / name).string());
  }
  HardLayout gt = layout_from_masks(t.gt);
  write_layout_png(gt, (dir / "ground_truth.png").string());
  echo_config(dir, cfg);
  std::cout << "rendered " << t.layouts.size() << " layouts to " << dir.string() << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Noise-induced layout generation on a synthetic denoiser"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  Common common;
  app.add_option("--config", common.config_file, "Flat key = value config file");
  app.add_option("--set", common.overrides, "Override one config key (key=value), repeatable");
  app.add_option("--jobs", common.jobs, "Worker threads across independent runs")->check(CLI::PositiveNumber);

  std::string out, data, ckpt, prompt, variant = "full", traces, seeds = "0..4",
              variants = "full,no_decisive", prompts, trace;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> scenes;
  std::optional<int> steps;
  std::optional<double> lr;
  bool full_trace = false;
  const char* seed_help = "Seed (falls back to DECISIVE_SEED, then the config)";

  auto* gen_data = app.add_subcommand("gen-data", "Simulate a training corpus");
  gen_data->add_option("--out", out, "Dataset file")->required();
  gen_data->add_option("--scenes", scenes, "Scenes to simulate (default data.scenes = 1500)");
  gen_data->add_option("--seed", seed, seed_help);

  auto* train_cmd = app.add_subcommand("train", "Train the soft-layout head");
  train_cmd->add_option("--data", data, "Dataset file")->required();
  train_cmd->add_option("--out", out, "Output directory")->required();
  train_cmd->add_option("--steps", steps, "Training steps (default train.steps = 5000)");
  train_cmd->add_option("--lr", lr, "Learning rate (default train.learning_rate = 1e-4)");
  train_cmd->add_option("--seed", seed, seed_help);

  auto* gen = app.add_subcommand("generate", "Run the guided generation loop once");
  gen->add_option("--ckpt", ckpt, "Checkpoint file")->required();
  gen->add_option("--prompt", prompt, "Subjects, e.g. \"dog:2,cat:1\"")->required();
  gen->add_option("--seed", seed, seed_help);
  gen->add_option("--out", out, "Trace directory")->required();
  gen->add_option("--variant", variant, "full, no_decisive, no_cross, no_var, no_dice, same_timestep");
  gen->add_flag("--full-trace", full_trace, "Also store every latent");

  auto* eval_cmd = app.add_subcommand("eval", "Score trace directories");
  eval_cmd->add_option("--traces", traces, "Directory of traces")->required();
  eval_cmd->add_option("--out", out, "Report directory")->required();

  auto* abl = app.add_subcommand("ablate", "Compare variants over prompts and seeds");
  abl->add_option("--ckpt", ckpt, "Checkpoint file")->required();
  abl->add_option("--seeds", seeds, "Seed list, e.g. 0..19 or 1,4,9");
  abl->add_option("--variants", variants, "Comma-separated variants");
  abl->add_option("--prompts", prompts, "Semicolon-separated prompts (default: four built-in prompts)");
  abl->add_option("--out", out, "Report directory")->required();

  auto* render = app.add_subcommand("render", "Render the hard layouts of a trace");
  render->add_option("--trace", trace, "Trace directory or trace.json")->required();
  render->add_option("--out", out, "Image directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitInput;
  }

  try {
    if (*gen_data) return cmd_gen_data(common, out, scenes, seed);
    if (*train_cmd) return cmd_train(common, data, out, steps, lr, seed);
    if (*gen) return cmd_generate(common, ckpt, prompt, seed, out, variant, full_trace);
    if (*eval_cmd) return cmd_eval(common, traces, out);
    if (*abl) return cmd_ablate(common, ckpt, seeds, variants, prompts, out);
    if (*render) return cmd_render(common, trace, out);
  } catch (const SceneInfeasibleError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInfeasible;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  }
  return kExitInput;
}
