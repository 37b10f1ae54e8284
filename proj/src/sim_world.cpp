#include "decisive/sim_world.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <set>

#include "decisive/errors.hpp"
#include "decisive/rng.hpp"

namespace decisive {
namespace {

constexpr std::uint64_t kClassSignatureSeed = 0x5157A7u;
constexpr std::uint64_t kBackgroundSignatureSeed = 0xB6B6u;
constexpr std::uint64_t kLatentStream = 1;
constexpr std::uint64_t kRadiusStream = 7;
constexpr std::uint64_t kInstanceStream = 11;
constexpr std::uint64_t kNoiseStreamBase = 1000;

std::vector<double> random_unit(CounterRng rng, std::size_t dim) {
  std::vector<double> v(dim);
  double n2 = 0.0;
  for (std::size_t i = 0; i < dim; ++i) {
    v[i] = rng.normal_at(i);
    n2 += v[i] * v[i];
  }
  const double inv = 1.0 / std::sqrt(n2);
  for (double& x : v) x *= inv;
  return v;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

/// Normalized box filter with odd window `size`, per channel.
Tensor box_smooth(const Tensor& in, std::size_t size) {
  const std::size_t H = in.dim(0), W = in.dim(1), C = in.dim(2);
  const long r = static_cast<long>(size / 2);
  // Separable: rows then columns, each normalized by its in-bounds count.
  Tensor tmp(in.shape());
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const long lo = std::max(0L, static_cast<long>(x) - r);
      const long hi = std::min(static_cast<long>(W) - 1, static_cast<long>(x) + r);
      double* o = &tmp.data()[(y * W + x) * C];
      for (long xx = lo; xx <= hi; ++xx) {
        const double* ip = &in.data()[(y * W + xx) * C];
        for (std::size_t c = 0; c < C; ++c) o[c] += ip[c];
      }
      const double inv = 1.0 / static_cast<double>(hi - lo + 1);
      for (std::size_t c = 0; c < C; ++c) o[c] *= inv;
    }
  }
  Tensor out(in.shape());
  for (std::size_t y = 0; y < H; ++y) {
    const long lo = std::max(0L, static_cast<long>(y) - r);
    const long hi = std::min(static_cast<long>(H) - 1, static_cast<long>(y) + r);
    const double inv = 1.0 / static_cast<double>(hi - lo + 1);
    for (std::size_t x = 0; x < W; ++x) {
      double* o = &out.data()[(y * W + x) * C];
      for (long yy = lo; yy <= hi; ++yy) {
        const double* ip = &tmp.data()[(yy * W + x) * C];
        for (std::size_t c = 0; c < C; ++c) o[c] += ip[c];
      }
      for (std::size_t c = 0; c < C; ++c) o[c] *= inv;
    }
  }
  return out;
}

double gaussian_weight(const SceneInstance& inst, double row, double col) {
  const double dr = row - inst.row, dc = col - inst.col;
  return std::exp(-(dr * dr + dc * dc) / (2.0 * inst.radius * inst.radius));
}

}  // namespace

const std::vector<std::string>& class_names() {
  static const std::vector<std::string> names = {
      "cat",   "dog",     "bird",   "horse",  "sheep",      "cow",      "elephant",
      "bear",  "zebra",   "giraffe", "car",   "bicycle",    "motorcycle", "airplane",
      "bus",   "train",   "truck",  "boat",   "apple",      "orange"};
  return names;
}

int class_id_from_name(std::string_view name) {
  name = trim(name);
  const auto& names = class_names();
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == name) return static_cast<int>(i);
  }
  int id = -1;
  auto [ptr, ec] = std::from_chars(name.data(), name.data() + name.size(), id);
  if (ec != std::errc() || ptr != name.data() + name.size() || name.empty()) {
    throw InputError("unknown class '" + std::string(name) + "'");
  }
  return id;
}

int PromptSpec::k() const {
  int k = 0;
  for (const auto& s : subjects) k += s.count;
  return k;
}

int PromptSpec::instance_class(int instance) const {
  for (const auto& s : subjects) {
    if (instance < s.count) return s.class_id;
    instance -= s.count;
  }
  throw InputError("instance index out of range");
}

void PromptSpec::validate(const SimConfig& cfg) const {
  if (subjects.empty()) throw InputError("prompt has no subjects");
  std::set<int> seen;
  for (const auto& s : subjects) {
    if (s.count < 1) throw InputError("subject count must be >= 1");
    if (s.class_id < 0 || s.class_id >= cfg.class_pool) {
      throw InputError("class id " + std::to_string(s.class_id) + " outside pool");
    }
    if (!seen.insert(s.class_id).second) {
      throw InputError("class id " + std::to_string(s.class_id) + " repeated in prompt");
    }
  }
  if (k() < 1 || k() > 10) throw InputError("prompt must name between 1 and 10 instances");
  if (background_class < 0 || background_class >= cfg.background_pool) {
    throw InputError("background class outside pool");
  }
}

PromptSpec PromptSpec::parse(std::string_view text) {
  PromptSpec p;
  text = trim(text);
  if (text.empty()) throw InputError("malformed prompt: empty string");
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t comma = text.find(',', pos);
    const std::string_view item =
        trim(text.substr(pos, comma == std::string_view::npos ? std::string_view::npos : comma - pos));
    if (item.empty()) throw InputError("malformed prompt: empty subject in '" + std::string(text) + "'");
    SubjectSpec s;
    const std::size_t colon = item.find(':');
    try {
      s.class_id = class_id_from_name(item.substr(0, colon));
    } catch (const InputError& e) {
      throw InputError(std::string("malformed prompt: ") + e.what());
    }
    if (colon != std::string_view::npos) {
      const std::string_view num = trim(item.substr(colon + 1));
      auto [ptr, ec] = std::from_chars(num.data(), num.data() + num.size(), s.count);
      if (ec != std::errc() || ptr != num.data() + num.size() || num.empty()) {
        throw InputError("malformed prompt: bad count in '" + std::string(item) + "'");
      }
    }
    p.subjects.push_back(s);
    if (comma == std::string_view::npos) break;
    pos = comma + 1;
  }
  p.validate();
  return p;
}

std::string PromptSpec::to_string() const {
  std::string out;
  const auto& names = class_names();
  for (std::size_t i = 0; i < subjects.size(); ++i) {
    if (i) out += ',';
    const int id = subjects[i].class_id;
    out += (id >= 0 && id < static_cast<int>(names.size())) ? names[id] : std::to_string(id);
    out += ':' + std::to_string(subjects[i].count);
  }
  return out;
}

std::vector<double> class_signature(int class_id, const SimConfig& cfg) {
  return random_unit(CounterRng(kClassSignatureSeed, static_cast<std::uint64_t>(class_id)),
                     cfg.latent_channels);
}

std::vector<double> background_signature(int background_class, const SimConfig& cfg) {
  return random_unit(
      CounterRng(kBackgroundSignatureSeed, static_cast<std::uint64_t>(background_class)),
      cfg.latent_channels);
}

Latent init_latent(std::uint64_t seed, const SimConfig& cfg) {
  Latent l;
  l.z = Tensor({cfg.height, cfg.width, cfg.latent_channels});
  const CounterRng rng(seed, kLatentStream);
  for (std::size_t i = 0; i < l.z.size(); ++i) l.z[i] = rng.normal_at(i);
  l.t = cfg.steps;
  l.steps = cfg.steps;
  return l;
}

SceneSpec derive_scene(const Latent& initial, const PromptSpec& prompt, std::uint64_t seed,
                       const SimConfig& cfg) {
  prompt.validate(cfg);
  if (initial.t != initial.steps) throw InputError("derive_scene expects the initial latent");
  const std::size_t H = initial.z.dim(0), W = initial.z.dim(1), C = initial.z.dim(2);
  const Tensor smooth = box_smooth(initial.z, cfg.scene_smoothing);

  SceneSpec scene;
  scene.background_signature = background_signature(prompt.background_class, cfg);
  std::vector<std::pair<double, double>> centers;
  int instance = 0;
  for (const SubjectSpec& subject : prompt.subjects) {
    const std::vector<double> sig = class_signature(subject.class_id, cfg);
    std::vector<double> proj(H * W);
    for (std::size_t p = 0; p < H * W; ++p) {
      double s = 0.0;
      for (std::size_t c = 0; c < C; ++c) s += smooth[p * C + c] * sig[c];
      proj[p] = s;
    }
    std::vector<std::size_t> order(H * W);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return proj[a] > proj[b]; });

    // Greedy non-max suppression against every center placed so far.
    std::vector<std::pair<double, double>> picked;
    for (double radius = cfg.nms_radius; radius >= cfg.nms_radius_min - 1e-9;
         radius -= cfg.nms_relax_step) {
      picked.clear();
      for (std::size_t p : order) {
        const double r = static_cast<double>(p / W), c = static_cast<double>(p % W);
        auto far = [&](const std::pair<double, double>& q) {
          return std::hypot(q.first - r, q.second - c) >= radius;
        };
        if (std::all_of(centers.begin(), centers.end(), far) &&
            std::all_of(picked.begin(), picked.end(), far)) {
          picked.emplace_back(r, c);
          if (static_cast<int>(picked.size()) == subject.count) break;
        }
      }
      if (static_cast<int>(picked.size()) == subject.count) break;
    }
    if (static_cast<int>(picked.size()) < subject.count) {
      throw SceneInfeasibleError("scene infeasible: cannot place " +
                                 std::to_string(subject.count) + " instances of class " +
                                 std::to_string(subject.class_id));
    }
    for (const auto& [r, c] : picked) {
      SceneInstance inst;
      inst.instance_id = instance;
      inst.class_id = subject.class_id;
      inst.row = r;
      inst.col = c;
      const std::vector<double> xi =
          random_unit(CounterRng(seed, kInstanceStream * 1000 + instance), C);
      inst.signature.resize(C);
      double n2 = 0.0;
      for (std::size_t ch = 0; ch < C; ++ch) {
        inst.signature[ch] = sig[ch] + cfg.instance_spread * xi[ch];
        n2 += inst.signature[ch] * inst.signature[ch];
      }
      for (double& v : inst.signature) v /= std::sqrt(n2);
      scene.instances.push_back(std::move(inst));
      centers.emplace_back(r, c);
      ++instance;
    }
  }

  const CounterRng radius_rng(seed, kRadiusStream);
  for (std::size_t i = 0; i < scene.instances.size(); ++i) {
    SceneInstance& inst = scene.instances[i];
    double nearest = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < scene.instances.size(); ++j) {
      if (j == i) continue;
      nearest = std::min(nearest, std::hypot(inst.row - scene.instances[j].row,
                                             inst.col - scene.instances[j].col));
    }
    const double drawn =
        cfg.radius_min + (cfg.radius_max - cfg.radius_min) * radius_rng.uniform_at(i);
    inst.radius = std::min(drawn, std::max(cfg.radius_min, cfg.radius_spacing * nearest));
  }
  return scene;
}

Tensor clean_field_masked(const SceneSpec& scene, const HardLayout* mask, const SimConfig& cfg) {
  const std::size_t H = cfg.height, W = cfg.width, C = cfg.latent_channels;
  if (mask && (mask->height != H || mask->width != W)) {
    throw InputError("clean_field: mask grid does not match simulator grid");
  }
  // Instance allowed inside each subject label.
  std::vector<int> label_instance;
  if (mask) {
    label_instance.assign(mask->k + 1, -1);
    for (int l = 1; l <= mask->k; ++l) label_instance[l] = mask->instance_tags[l];
  }
  const double gain = field_gain(cfg);
  Tensor out({H, W, C});
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      double* o = &out.data()[(y * W + x) * C];
      for (std::size_t c = 0; c < C; ++c) o[c] = scene.background_signature[c];
      const int label = mask ? mask->labels[y * W + x] : 0;
      for (const SceneInstance& inst : scene.instances) {
        if (label > 0 && label_instance[label] != inst.instance_id) continue;
        const double w = gaussian_weight(inst, static_cast<double>(y), static_cast<double>(x));
        for (std::size_t c = 0; c < C; ++c) o[c] += inst.signature[c] * w;
      }
      for (std::size_t c = 0; c < C; ++c) o[c] *= gain;
    }
  }
  return out;
}

double field_gain(const SimConfig& cfg) {
  return cfg.signal_scale * std::sqrt(static_cast<double>(cfg.latent_channels));
}

Tensor clean_field(const SceneSpec& scene, const SimConfig& cfg) {
  return clean_field_masked(scene, nullptr, cfg);
}

double denoise_rate(int t) { return 1.0 / static_cast<double>(t); }

double noise_scale(int t, const SimConfig& cfg) {
  return cfg.sigma_max * static_cast<double>(t - 1) / static_cast<double>(cfg.steps);
}

Latent denoise_step(const Latent& latent, const SceneSpec& scene, const HardLayout* mask,
                    std::uint64_t noise_seed, const SimConfig& cfg) {
  if (latent.t <= 0) throw InputError("denoise_step called at t = 0");
  const Tensor target = clean_field_masked(scene, mask, cfg);
  if (!target.same_shape(latent.z)) throw InputError("denoise_step: latent shape mismatch");
  const double eta = denoise_rate(latent.t);
  const double sigma = noise_scale(latent.t, cfg);
  const CounterRng rng(noise_seed, kNoiseStreamBase + static_cast<std::uint64_t>(latent.t));
  Latent next;
  next.t = latent.t - 1;
  next.steps = latent.steps;
  next.z = Tensor(latent.z.shape());
  for (std::size_t i = 0; i < next.z.size(); ++i) {
    double v = (1.0 - eta) * latent.z[i] + eta * target[i];
    if (sigma != 0.0) v += sigma * rng.normal_at(i);
    next.z[i] = v;
  }
  return next;
}

std::array<double, 8> time_embedding(int t, int steps) {
  std::array<double, 8> e{};
  const double phase = std::numbers::pi * static_cast<double>(t) / static_cast<double>(steps);
  for (int f = 0; f < 4; ++f) {
    const double a = std::ldexp(phase, f);
    e[2 * f] = std::sin(a);
    e[2 * f + 1] = std::cos(a);
  }
  return e;
}

Var feature_field(Var z) { return ops::box_filter3(z); }

FeatureStack extract_features(const Latent& latent) {
  Graph g;
  FeatureStack fs;
  fs.features = feature_field(g.constant(latent.z)).value();
  fs.time_embedding = time_embedding(latent.t, latent.steps);
  fs.t = latent.t;
  return fs;
}

Var cross_attention_graph(Var features_flat, const SceneSpec& scene, const HardLayout* mask,
                          const SimConfig& cfg) {
  Graph& g = *features_flat.graph;
  const std::size_t n = features_flat.value().dim(0);
  const std::size_t C = features_flat.value().dim(1);
  const std::size_t k = scene.instances.size();
  Tensor sigs({C, k});
  for (std::size_t j = 0; j < k; ++j)
    for (std::size_t c = 0; c < C; ++c) sigs[c * k + j] = scene.instances[j].signature[c];
  Var logits = ops::transpose(ops::matmul(features_flat, g.constant(std::move(sigs))));
  if (!mask) return ops::softmax(logits, cfg.attention_temperature);
  if (mask->size() != n) throw InputError("cross_attention: mask size mismatch");

  Tensor allowed({k, n});
  Tensor row_scale({k, n}, 1.0);
  bool degenerate = false;
  for (std::size_t j = 0; j < k; ++j) {
    const int own = mask->label_of_instance(static_cast<int>(j));
    std::size_t count = 0;
    for (std::size_t p = 0; p < n; ++p) {
      const int l = mask->labels[p];
      if (l == 0 || (own > 0 && l == own)) {
        allowed[j * n + p] = 1.0;
        ++count;
      }
    }
    if (count == 0) {
      // Nothing to attend to: fall back to a uniform map over the grid.
      degenerate = true;
      for (std::size_t p = 0; p < n; ++p) {
        allowed[j * n + p] = 1.0;
        row_scale[j * n + p] = 0.0;
      }
    }
  }
  if (degenerate) logits = ops::mul(logits, g.constant(std::move(row_scale)));
  return ops::softmax(logits, cfg.attention_temperature, &allowed);
}

CrossAttnMaps cross_attention(const Latent& latent, const SceneSpec& scene, const HardLayout* mask,
                              const SimConfig& cfg) {
  Graph g;
  const std::size_t H = latent.z.dim(0), W = latent.z.dim(1), C = latent.z.dim(2);
  Var feats = ops::reshape(feature_field(g.constant(latent.z)), {H * W, C});
  return CrossAttnMaps{cross_attention_graph(feats, scene, mask, cfg).value()};
}

Tensor apply_attention_mask(const Tensor& scores, const HardLayout& mask) {
  const std::size_t n = mask.size();
  if (scores.rank() != 2 || scores.dim(0) != n || scores.dim(1) != n) {
    throw InputError("apply_attention_mask: scores must be [n, n] with n = H*W");
  }
  Tensor out = scores;
  for (std::size_t q = 0; q < n; ++q) {
    const int lq = mask.labels[q];
    if (lq == 0) continue;
    for (std::size_t p = 0; p < n; ++p) {
      if (!attention_allowed(lq, mask.labels[p])) {
        out[q * n + p] = -std::numeric_limits<double>::infinity();
      }
    }
  }
  return out;
}

GroundTruthMasks ground_truth_masks(const SceneSpec& scene, const SimConfig& cfg) {
  GroundTruthMasks gt;
  gt.height = cfg.height;
  gt.width = cfg.width;
  gt.labels.assign(cfg.height * cfg.width, 0);
  for (const auto& inst : scene.instances) gt.instance_classes.push_back(inst.class_id);
  for (std::size_t y = 0; y < cfg.height; ++y) {
    for (std::size_t x = 0; x < cfg.width; ++x) {
      double best = -1.0;
      int owner = -1;
      for (std::size_t i = 0; i < scene.instances.size(); ++i) {
        const double w = gaussian_weight(scene.instances[i], static_cast<double>(y),
                                         static_cast<double>(x));
        if (w > best) {
          best = w;
          owner = static_cast<int>(i);
        }
      }
      if (owner >= 0 && best >= cfg.mask_threshold) gt.labels[y * cfg.width + x] = owner + 1;
    }
  }
  return gt;
}

double footprint_iou(const SceneInstance& a, const SceneInstance& b, const SimConfig& cfg) {
  std::size_t inter = 0, uni = 0;
  for (std::size_t y = 0; y < cfg.height; ++y) {
    for (std::size_t x = 0; x < cfg.width; ++x) {
      const bool in_a = gaussian_weight(a, y, x) >= cfg.mask_threshold;
      const bool in_b = gaussian_weight(b, y, x) >= cfg.mask_threshold;
      inter += in_a && in_b;
      uni += in_a || in_b;
    }
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace decisive
