#include "decisive/dataset.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <optional>

#include "json.hpp"

#include "decisive/codec.hpp"
#include "decisive/config.hpp"
#include "decisive/errors.hpp"
#include "decisive/pipeline.hpp"

namespace decisive {
namespace {

constexpr const char* kFormat = "decisive-dataset";
constexpr int kVersion = 1;
constexpr std::uint64_t kPromptStream = 3;

std::string encode_floats(const std::vector<float>& v) {
  std::vector<std::uint8_t> bytes(v.size() * 4);
  std::memcpy(bytes.data(), v.data(), bytes.size());
  return base64_encode(bytes);
}

std::vector<float> decode_floats(std::string_view text) {
  const auto bytes = base64_decode(text);
  if (bytes.size() % 4 != 0) throw InputError("dataset: feature payload length not a multiple of 4");
  std::vector<float> v(bytes.size() / 4);
  std::memcpy(v.data(), bytes.data(), bytes.size());
  return v;
}

nlohmann::ordered_json header_json(const DatasetConfig& cfg, const SimConfig& sim) {
  Config c;
  c.sim = sim;
  c.data = cfg;
  nlohmann::ordered_json kv = nlohmann::ordered_json::object();
  for (const auto& [k, v] : to_key_values(c, "sim.")) kv[k] = v;
  for (const auto& [k, v] : to_key_values(c, "data.")) kv[k] = v;
  nlohmann::ordered_json h;
  h["format"] = kFormat;
  h["version"] = kVersion;
  h["config_hash"] = dataset_config_hash(cfg, sim);
  h["config"] = kv;
  return h;
}

nlohmann::ordered_json record_json(const DatasetRecord& r) {
  nlohmann::ordered_json j;
  j["index"] = r.index;
  j["seed"] = r.seed;
  j["prompt"] = r.prompt.to_string();
  j["background"] = r.prompt.background_class;
  j["height"] = r.height;
  j["width"] = r.width;
  j["channels"] = r.channels;
  j["steps"] = r.steps;
  j["timesteps"] = r.timesteps;
  nlohmann::ordered_json feats = nlohmann::ordered_json::array();
  for (const auto& f : r.features) feats.push_back(encode_floats(f));
  j["features"] = feats;
  nlohmann::ordered_json runs = nlohmann::ordered_json::array();
  for (const auto& [label, n] : rle_encode(r.masks.labels)) runs.push_back({label, n});
  j["masks"] = {{"runs", runs}, {"instance_classes", r.masks.instance_classes}};
  return j;
}

DatasetRecord parse_record(const nlohmann::json& j) {
  DatasetRecord r;
  r.index = j.at("index").get<std::size_t>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.prompt = PromptSpec::parse(j.at("prompt").get<std::string>());
  r.prompt.background_class = j.at("background").get<int>();
  r.height = j.at("height").get<std::size_t>();
  r.width = j.at("width").get<std::size_t>();
  r.channels = j.at("channels").get<std::size_t>();
  r.steps = j.at("steps").get<int>();
  r.timesteps = j.at("timesteps").get<std::vector<int>>();
  const std::size_t block = r.height * r.width * r.channels;
  for (const auto& f : j.at("features")) {
    r.features.push_back(decode_floats(f.get<std::string>()));
    if (r.features.back().size() != block) throw InputError("dataset: feature block size mismatch");
  }
  if (r.features.size() != r.timesteps.size()) {
    throw InputError("dataset: feature blocks do not match timesteps");
  }
  std::vector<std::pair<int, std::size_t>> runs;
  for (const auto& run : j.at("masks").at("runs")) {
    runs.emplace_back(run.at(0).get<int>(), run.at(1).get<std::size_t>());
  }
  r.masks.height = r.height;
  r.masks.width = r.width;
  r.masks.labels = rle_decode(runs);
  r.masks.instance_classes = j.at("masks").at("instance_classes").get<std::vector<int>>();
  if (r.masks.labels.size() != r.height * r.width) throw InputError("dataset: mask size mismatch");
  const int k = static_cast<int>(r.masks.instance_classes.size());
  for (int l : r.masks.labels) {
    if (l < 0 || l > k) throw InputError("dataset: mask label out of range");
  }
  return r;
}

}  // namespace

FeatureStack DatasetRecord::feature_stack(std::size_t slot) const {
  FeatureStack fs;
  const auto& f = features.at(slot);
  std::vector<double> data(f.begin(), f.end());
  fs.features = Tensor({height, width, channels}, std::move(data));
  fs.t = timesteps.at(slot);
  fs.time_embedding = time_embedding(fs.t, steps);
  return fs;
}

std::vector<int> stored_timesteps(int steps, int count) {
  std::vector<int> out;
  for (int i = 0; i < count; ++i) out.push_back(i * steps / count);
  return out;
}

PromptSpec random_prompt(CounterRng& rng, const DatasetConfig& cfg, const SimConfig& sim) {
  const int max_classes = std::min(cfg.max_classes, sim.class_pool);
  const int classes = static_cast<int>(rng.range(std::min(cfg.min_classes, max_classes), max_classes));
  std::vector<int> pool(sim.class_pool);
  for (int i = 0; i < sim.class_pool; ++i) pool[i] = i;
  PromptSpec p;
  for (int c = 0; c < classes; ++c) {
    const std::size_t j = c + rng.below(pool.size() - c);
    std::swap(pool[c], pool[j]);
    SubjectSpec s;
    s.class_id = pool[c];
    s.count = rng.uniform() < cfg.quantity_prob ? static_cast<int>(rng.range(1, cfg.max_quantity)) : 1;
    p.subjects.push_back(s);
  }
  // Prompts name at most 10 instances; trim the largest count first.
  while (p.k() > 10) {
    auto it = std::max_element(p.subjects.begin(), p.subjects.end(),
                               [](const SubjectSpec& a, const SubjectSpec& b) { return a.count < b.count; });
    --it->count;
  }
  p.background_class = static_cast<int>(rng.below(sim.background_pool));
  return p;
}

std::uint64_t record_seed(std::uint64_t dataset_seed, std::size_t index) {
  return mix64(dataset_seed ^ mix64(0xD5A7A5E7ULL + index));
}

std::string dataset_config_hash(const DatasetConfig& cfg, const SimConfig& sim) {
  Config c;
  c.sim = sim;
  c.data = cfg;
  std::string text;
  for (const auto& [k, v] : to_key_values(c, "sim.")) text += k + "=" + v + "\n";
  for (const auto& [k, v] : to_key_values(c, "data.")) text += k + "=" + v + "\n";
  return hex64(fnv1a64(text));
}

RecordOutcome simulate_record(std::size_t index, const DatasetConfig& cfg, const SimConfig& sim,
                              DatasetRecord& out) {
  const std::uint64_t seed = record_seed(cfg.seed, index);
  CounterRng rng(seed, kPromptStream);
  const PromptSpec prompt = random_prompt(rng, cfg, sim);
  Latent z = init_latent(seed, sim);
  SceneSpec scene;
  try {
    scene = derive_scene(z, prompt, seed, sim);
  } catch (const SceneInfeasibleError&) {
    return RecordOutcome::kInfeasible;
  }
  for (std::size_t a = 0; a < scene.instances.size(); ++a) {
    for (std::size_t b = a + 1; b < scene.instances.size(); ++b) {
      if (footprint_iou(scene.instances[a], scene.instances[b], sim) > cfg.ambiguity_iou) {
        return RecordOutcome::kAmbiguous;
      }
    }
  }
  GroundTruthMasks gt = ground_truth_masks(scene, sim);
  std::vector<std::size_t> area(scene.instances.size() + 1, 0);
  for (int l : gt.labels) ++area[l];
  for (std::size_t i = 1; i < area.size(); ++i) {
    if (area[i] == 0) return RecordOutcome::kAmbiguous;
  }

  out = DatasetRecord{};
  out.index = index;
  out.seed = seed;
  out.prompt = prompt;
  out.height = sim.height;
  out.width = sim.width;
  out.channels = sim.latent_channels;
  out.steps = sim.steps;
  out.timesteps = stored_timesteps(sim.steps, cfg.stored_timesteps);
  out.features.resize(out.timesteps.size());
  auto store = [&](const Latent& l) {
    for (std::size_t s = 0; s < out.timesteps.size(); ++s) {
      if (out.timesteps[s] != l.t) continue;
      const FeatureStack fs = extract_features(l);
      out.features[s].assign(fs.features.data().begin(), fs.features.data().end());
    }
  };
  store(z);
  while (z.t > 0) {
    z = denoise_step(z, scene, nullptr, seed, sim);
    store(z);
  }
  out.masks = std::move(gt);
  return RecordOutcome::kKept;
}

DatasetStats generate_records(const DatasetConfig& cfg, const SimConfig& sim, int jobs,
                              const std::function<void(DatasetRecord&&)>& sink) {
  DatasetStats stats;
  const std::size_t chunk = static_cast<std::size_t>(std::max(1, jobs)) * 4;
  for (std::size_t begin = 0; begin < cfg.scenes; begin += chunk) {
    const std::size_t n = std::min(chunk, cfg.scenes - begin);
    std::vector<DatasetRecord> records(n);
    std::vector<RecordOutcome> outcomes(n);
    parallel_for(n, jobs, [&](std::size_t i) {
      outcomes[i] = simulate_record(begin + i, cfg, sim, records[i]);
    });
    for (std::size_t i = 0; i < n; ++i) {
      ++stats.generated;
      switch (outcomes[i]) {
        case RecordOutcome::kKept:
          ++stats.kept;
          sink(std::move(records[i]));
          break;
        case RecordOutcome::kAmbiguous:
          ++stats.ambiguous;
          break;
        case RecordOutcome::kInfeasible:
          ++stats.infeasible;
          break;
      }
    }
  }
  return stats;
}

Dataset generate_dataset(const DatasetConfig& cfg, const SimConfig& sim, int jobs) {
  Dataset d;
  d.sim = sim;
  d.config = cfg;
  d.config_hash = dataset_config_hash(cfg, sim);
  d.stats = generate_records(cfg, sim, jobs,
                             [&](DatasetRecord&& r) { d.records.push_back(std::move(r)); });
  return d;
}

DatasetStats write_dataset_file(const std::string& path, const DatasetConfig& cfg,
                                const SimConfig& sim, int jobs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write dataset file " + path);
  out << header_json(cfg, sim).dump() << '\n';
  DatasetStats stats = generate_records(cfg, sim, jobs, [&](DatasetRecord&& r) {
    out << record_json(r).dump() << '\n';
  });
  if (!out) throw InputError("write failed for dataset file " + path);
  return stats;
}

void write_dataset(const Dataset& dataset, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write dataset file " + path);
  out << header_json(dataset.config, dataset.sim).dump() << '\n';
  for (const auto& r : dataset.records) out << record_json(r).dump() << '\n';
  if (!out) throw InputError("write failed for dataset file " + path);
}

Dataset read_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read dataset file " + path);
  std::string line;
  if (!std::getline(in, line)) throw InputError("dataset file " + path + " is empty");
  Dataset d;
  try {
    const auto h = nlohmann::json::parse(line);
    if (h.at("format") != kFormat) throw InputError("not a dataset file: " + path);
    if (h.at("version").get<int>() != kVersion) throw InputError("unsupported dataset version");
    Config c;
    for (const auto& [k, v] : h.at("config").items()) set_key(c, k, v.get<std::string>());
    d.sim = c.sim;
    d.config = c.data;
    d.config_hash = h.at("config_hash").get<std::string>();
    if (d.config_hash != dataset_config_hash(d.config, d.sim)) {
      throw InputError("dataset header hash does not match its config");
    }
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      try {
        d.records.push_back(parse_record(nlohmann::json::parse(line)));
      } catch (const nlohmann::json::exception& e) {
        throw InputError(path + ":" + std::to_string(line_no) + ": " + e.what());
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError(path + ": malformed header: " + e.what());
  }
  d.stats.kept = d.records.size();
  return d;
}

}  // namespace decisive
