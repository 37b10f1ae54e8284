#include "decisive/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "json.hpp"

#include "decisive/errors.hpp"

namespace decisive {
namespace {

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  (void)ec;
  return std::string(buf, ptr);
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

template <class T>
T parse_number(std::string_view key, std::string_view text) {
  T v{};
  text = trim(text);
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size() || text.empty()) {
    throw InputError("config: bad value '" + std::string(text) + "' for " + std::string(key));
  }
  return v;
}

template <class T>
std::string to_text(const T& v) {
  if constexpr (std::is_floating_point_v<T>) {
    return format_double(v);
  } else {
    return std::to_string(v);
  }
}

struct Entry {
  std::string key;
  std::function<std::string(const Config&)> get;
  std::function<void(Config&, std::string_view)> set;
};

template <class Section, class Field>
Entry field(std::string key, Section Config::*section, Field Section::*member,
            std::function<bool(Field)> valid = nullptr, const char* rule = "") {
  Entry e;
  e.key = key;
  e.get = [section, member](const Config& c) { return to_text(c.*section.*member); };
  e.set = [key, section, member, valid, rule](Config& c, std::string_view text) {
    const Field v = parse_number<Field>(key, text);
    if (valid && !valid(v)) {
      throw InputError("config: " + key + " = " + std::string(trim(text)) + " violates " + rule);
    }
    c.*section.*member = v;
  };
  return e;
}

template <class T>
std::function<bool(T)> positive() {
  return [](T v) { return v > 0; };
}
template <class T>
std::function<bool(T)> non_negative() {
  return [](T v) { return v >= 0; };
}
std::function<bool(double)> probability() {
  return [](double v) { return v >= 0.0 && v <= 1.0; };
}

const std::vector<Entry>& entries() {
  static const std::vector<Entry> table = [] {
    std::vector<Entry> t;
    auto pos_z = positive<std::size_t>();
    auto pos_i = positive<int>();
    auto pos_d = positive<double>();
    auto nn_i = non_negative<int>();
    auto nn_d = non_negative<double>();

    t.push_back(field("sim.height", &Config::sim, &SimConfig::height, pos_z, "> 0"));
    t.push_back(field("sim.width", &Config::sim, &SimConfig::width, pos_z, "> 0"));
    t.push_back(field("sim.latent_channels", &Config::sim, &SimConfig::latent_channels, pos_z, "> 0"));
    t.push_back(field("sim.steps", &Config::sim, &SimConfig::steps, pos_i, "> 0"));
    t.push_back(field("sim.sigma_max", &Config::sim, &SimConfig::sigma_max, nn_d, ">= 0"));
    t.push_back(field("sim.attention_temperature", &Config::sim, &SimConfig::attention_temperature, pos_d, "> 0"));
    t.push_back(field("sim.scene_smoothing", &Config::sim, &SimConfig::scene_smoothing,
                      std::function<bool(std::size_t)>([](std::size_t v) { return v % 2 == 1; }), "odd"));
    t.push_back(field("sim.nms_radius", &Config::sim, &SimConfig::nms_radius, pos_d, "> 0"));
    t.push_back(field("sim.nms_radius_min", &Config::sim, &SimConfig::nms_radius_min, pos_d, "> 0"));
    t.push_back(field("sim.nms_relax_step", &Config::sim, &SimConfig::nms_relax_step, pos_d, "> 0"));
    t.push_back(field("sim.radius_min", &Config::sim, &SimConfig::radius_min, pos_d, "> 0"));
    t.push_back(field("sim.radius_max", &Config::sim, &SimConfig::radius_max, pos_d, "> 0"));
    t.push_back(field("sim.radius_spacing", &Config::sim, &SimConfig::radius_spacing, pos_d, "> 0"));
    t.push_back(field("sim.instance_spread", &Config::sim, &SimConfig::instance_spread, nn_d, ">= 0"));
    t.push_back(field("sim.mask_threshold", &Config::sim, &SimConfig::mask_threshold, probability(), "[0, 1]"));
    t.push_back(field("sim.signal_scale", &Config::sim, &SimConfig::signal_scale, pos_d, "> 0"));
    t.push_back(field("sim.class_pool", &Config::sim, &SimConfig::class_pool, pos_i, "> 0"));
    t.push_back(field("sim.background_pool", &Config::sim, &SimConfig::background_pool, pos_i, "> 0"));

    t.push_back(field("data.scenes", &Config::data, &DatasetConfig::scenes));
    t.push_back(field("data.seed", &Config::data, &DatasetConfig::seed));
    t.push_back(field("data.min_classes", &Config::data, &DatasetConfig::min_classes, pos_i, "> 0"));
    t.push_back(field("data.max_classes", &Config::data, &DatasetConfig::max_classes, pos_i, "> 0"));
    t.push_back(field("data.max_quantity", &Config::data, &DatasetConfig::max_quantity, pos_i, "> 0"));
    t.push_back(field("data.quantity_prob", &Config::data, &DatasetConfig::quantity_prob, probability(), "[0, 1]"));
    t.push_back(field("data.stored_timesteps", &Config::data, &DatasetConfig::stored_timesteps, pos_i, "> 0"));
    t.push_back(field("data.ambiguity_iou", &Config::data, &DatasetConfig::ambiguity_iou, probability(), "[0, 1]"));

    t.push_back(field("train.steps", &Config::train, &TrainConfig::steps, nn_i, ">= 0"));
    t.push_back(field("train.learning_rate", &Config::train, &TrainConfig::learning_rate, nn_d, ">= 0"));
    t.push_back(field("train.triplets_per_image", &Config::train, &TrainConfig::triplets_per_image, pos_i, "> 0"));
    t.push_back(field("train.subject_pick_prob", &Config::train, &TrainConfig::subject_pick_prob, probability(), "[0, 1]"));
    t.push_back(field("train.margin", &Config::train, &TrainConfig::margin,
                      std::function<bool(double)>([](double v) { return v > 0.0 && v < 2.0; }), "(0, 2)"));
    t.push_back(field("train.batch", &Config::train, &TrainConfig::batch, pos_i, "> 0"));
    t.push_back(field("train.momentum", &Config::train, &TrainConfig::momentum,
                      std::function<bool(double)>([](double v) { return v >= 0.0 && v < 1.0; }), "[0, 1)"));
    t.push_back(field("train.log_every", &Config::train, &TrainConfig::log_every, pos_i, "> 0"));
    t.push_back(field("train.init_stddev", &Config::train, &TrainConfig::init_stddev, nn_d, ">= 0"));

    t.push_back(field("cluster.window", &Config::cluster, &ClusterConfig::window, nn_i, ">= 0"));
    t.push_back(field("cluster.variance_threshold", &Config::cluster, &ClusterConfig::variance_threshold, pos_d, "> 0"));
    t.push_back(field("cluster.max_iters", &Config::cluster, &ClusterConfig::max_iters, pos_i, "> 0"));
    t.push_back(field("cluster.restarts", &Config::cluster, &ClusterConfig::restarts, pos_i, "> 0"));
    t.push_back(Entry{
        "cluster.metric",
        [](const Config& c) {
          return std::string(c.cluster.metric == ClusterMetric::kCosine ? "cosine" : "euclidean");
        },
        [](Config& c, std::string_view v) {
          v = trim(v);
          if (v == "cosine") c.cluster.metric = ClusterMetric::kCosine;
          else if (v == "euclidean") c.cluster.metric = ClusterMetric::kEuclidean;
          else throw InputError("config: cluster.metric must be cosine or euclidean");
        }});

    t.push_back(field("guidance.alpha_cross", &Config::guidance, &GuidanceConfig::alpha_cross, nn_d, ">= 0"));
    t.push_back(field("guidance.alpha_var", &Config::guidance, &GuidanceConfig::alpha_var, nn_d, ">= 0"));
    t.push_back(field("guidance.alpha_dice", &Config::guidance, &GuidanceConfig::alpha_dice, nn_d, ">= 0"));
    t.push_back(field("guidance.tau", &Config::guidance, &GuidanceConfig::tau, pos_d, "> 0"));
    t.push_back(field("guidance.step_size", &Config::guidance, &GuidanceConfig::step_size, pos_d, "> 0"));
    t.push_back(field("guidance.iterations", &Config::guidance, &GuidanceConfig::iterations, nn_i, ">= 0"));
    t.push_back(field("guidance.guided_steps", &Config::guidance, &GuidanceConfig::guided_steps, nn_i, ">= 0"));
    t.push_back(Entry{
        "guidance.variance_mode",
        [](const Config& c) {
          return std::string(c.guidance.variance_mode == VarianceMode::kDistance ? "distance"
                                                                                 : "verbatim");
        },
        [](Config& c, std::string_view v) {
          v = trim(v);
          if (v == "distance") c.guidance.variance_mode = VarianceMode::kDistance;
          else if (v == "verbatim") c.guidance.variance_mode = VarianceMode::kVerbatim;
          else throw InputError("config: guidance.variance_mode must be distance or verbatim");
        }});
    t.push_back(field("guidance.dice_eps", &Config::guidance, &GuidanceConfig::dice_eps, pos_d, "> 0"));

    t.push_back(Entry{"head.soft_layout_dim",
                      [](const Config&) { return std::to_string(kSoftLayoutDim); },
                      [](Config&, std::string_view v) {
                        if (parse_number<std::size_t>("head.soft_layout_dim", v) != kSoftLayoutDim) {
                          throw InputError("config: head.soft_layout_dim is fixed at " +
                                           std::to_string(kSoftLayoutDim));
                        }
                      }});
    t.push_back(field("metrics.min_area", &Config::metrics, &MetricsConfig::min_area));
    return t;
  }();
  return table;
}

}  // namespace

KeyValues to_key_values(const Config& cfg) { return to_key_values(cfg, ""); }

KeyValues to_key_values(const Config& cfg, std::string_view prefix) {
  KeyValues out;
  for (const Entry& e : entries()) {
    if (e.key.starts_with(prefix)) out.emplace_back(e.key, e.get(cfg));
  }
  return out;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const Entry& e : entries()) keys.push_back(e.key);
  return keys;
}

void set_key(Config& cfg, std::string_view key, std::string_view value) {
  key = trim(key);
  for (const Entry& e : entries()) {
    if (e.key == key) {
      e.set(cfg, value);
      return;
    }
  }
  throw InputError("config: unknown key '" + std::string(key) + "'");
}

void apply_config_text(Config& cfg, std::string_view text, std::string_view origin) {
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw InputError(std::string(origin) + ":" + std::to_string(line_no) +
                       ": expected 'key = value'");
    }
    try {
      set_key(cfg, line.substr(0, eq), line.substr(eq + 1));
    } catch (const InputError& e) {
      throw InputError(std::string(origin) + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

Config load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  Config cfg;
  apply_config_text(cfg, ss.str(), path);
  return cfg;
}

std::string config_to_text(const Config& cfg) {
  std::string out;
  std::string section;
  for (const auto& [k, v] : to_key_values(cfg)) {
    const std::string s = k.substr(0, k.find('.'));
    if (s != section) {
      if (!section.empty()) out += '\n';
      out += "# " + s + "\n";
      section = s;
    }
    out += k + " = " + v + "\n";
  }
  return out;
}

std::string config_to_json(const Config& cfg) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& [k, v] : to_key_values(cfg)) j[k] = v;
  return j.dump(2) + "\n";
}

}  // namespace decisive
