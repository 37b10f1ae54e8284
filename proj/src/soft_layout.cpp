#include "decisive/soft_layout.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"

#include "decisive/codec.hpp"
#include "decisive/config.hpp"
#include "decisive/errors.hpp"

namespace decisive {
namespace {

constexpr const char* kCheckpointFormat = "decisive-checkpoint";
constexpr int kCheckpointVersion = 1;
constexpr std::uint64_t kTrainStream = 21;
constexpr std::uint64_t kEvalStream = 31;
constexpr std::uint64_t kInitSalt = 0x1A17ULL;

Tensor normal_tensor(Shape shape, std::uint64_t seed, std::uint64_t stream, double stddev) {
  Tensor t(std::move(shape));
  const CounterRng rng(seed, stream);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = stddev * rng.normal_at(i);
  return t;
}

Var time_vector(Graph& g, const std::array<double, 8>& e, const HeadVars& p) {
  Var te = g.constant(Tensor({1, kTimeEmbeddingDim}, std::vector<double>(e.begin(), e.end())));
  return ops::add(ops::reshape(ops::matmul(te, p.time_proj), {kHiddenChannels}), p.time_bias);
}

/// Mean per-image triplet loss of one minibatch; one graph, shared params.
Var batch_loss(Graph& g, const HeadVars& vars, const std::vector<const DatasetRecord*>& recs,
               const std::vector<std::size_t>& slots,
               const std::vector<std::vector<Triplet>>& triplets, double margin) {
  Var total;
  for (std::size_t b = 0; b < recs.size(); ++b) {
    const DatasetRecord& r = *recs[b];
    std::vector<std::size_t> pixels;
    std::vector<Triplet> local;
    for (const Triplet& tr : triplets[b]) {
      const std::size_t base = pixels.size();
      pixels.push_back(tr.anchor);
      pixels.push_back(tr.positive);
      pixels.push_back(tr.negative);
      local.push_back({base, base + 1, base + 2});
    }
    const auto temb = time_embedding(r.timesteps[slots[b]], r.steps);
    Var rows = predict_at(g, r.features[slots[b]], r.height, r.width, r.channels, temb, pixels, vars);
    Var loss = triplet_loss(rows, local, margin);
    total = total.valid() ? ops::add(total, loss) : loss;
  }
  return ops::scale(total, 1.0 / static_cast<double>(recs.size()));
}

std::vector<const DatasetRecord*> usable(const std::vector<DatasetRecord>& records) {
  std::vector<const DatasetRecord*> out;
  for (const auto& r : records) {
    bool has_bg = false, has_subject = false;
    for (int l : r.masks.labels) (l == 0 ? has_bg : has_subject) = true;
    if (has_bg && has_subject && !r.features.empty()) out.push_back(&r);
  }
  return out;
}

}  // namespace

HeadParams HeadParams::init(std::uint64_t seed, std::size_t C, double stddev) {
  HeadParams p = zeros(C);
  std::uint64_t stream = 1;
  for (auto& [name, t] : p.named()) *t = normal_tensor(t->shape(), seed, stream++, stddev);
  return p;
}

HeadParams HeadParams::zeros(std::size_t C) {
  HeadParams p;
  p.conv1 = Tensor({3, 3, C, kHiddenChannels});
  p.conv1_bias = Tensor({kHiddenChannels});
  p.conv2 = Tensor({3, 3, kHiddenChannels, kHiddenChannels});
  p.conv2_bias = Tensor({kHiddenChannels});
  p.time_proj = Tensor({kTimeEmbeddingDim, kHiddenChannels});
  p.time_bias = Tensor({kHiddenChannels});
  p.out = Tensor({kHiddenChannels, kSoftLayoutDim});
  p.out_bias = Tensor({kSoftLayoutDim});
  return p;
}

std::vector<std::pair<std::string, Tensor*>> HeadParams::named() {
  return {{"conv1", &conv1},         {"conv1_bias", &conv1_bias}, {"conv2", &conv2},
          {"conv2_bias", &conv2_bias}, {"time_proj", &time_proj},   {"time_bias", &time_bias},
          {"out", &out},             {"out_bias", &out_bias}};
}

std::vector<std::pair<std::string, const Tensor*>> HeadParams::named() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (auto& [n, t] : const_cast<HeadParams*>(this)->named()) out.emplace_back(n, t);
  return out;
}

bool HeadParams::all_finite() const {
  for (const auto& [n, t] : named())
    if (!t->all_finite()) return false;
  return true;
}

HeadVars bind_params(Graph& g, const HeadParams& p, bool trainable) {
  auto bind = [&](const Tensor& t) { return trainable ? g.leaf(t) : g.constant(t); };
  return {bind(p.conv1),     bind(p.conv1_bias), bind(p.conv2), bind(p.conv2_bias),
          bind(p.time_proj), bind(p.time_bias),  bind(p.out),   bind(p.out_bias)};
}

std::vector<Var> param_list(const HeadVars& v) {
  return {v.conv1, v.conv1_bias, v.conv2, v.conv2_bias, v.time_proj, v.time_bias, v.out, v.out_bias};
}

Var predict_graph(Graph& g, Var features, const std::array<double, 8>& temb, const HeadVars& p) {
  const Tensor& f = features.value();
  if (f.rank() != 3) throw InputError("predict: features must be [H, W, C]");
  const std::size_t H = f.dim(0), W = f.dim(1), C = f.dim(2);
  if (p.conv1.value().dim(2) != C) {
    throw InputError("predict: head expects " + std::to_string(p.conv1.value().dim(2)) +
                     " feature channels, got " + std::to_string(C));
  }
  Var h = ops::conv2d(ops::reshape(features, {1, H, W, C}), p.conv1);
  h = ops::add_row(ops::reshape(h, {H * W, kHiddenChannels}), p.conv1_bias);
  h = ops::relu(ops::add_row(h, time_vector(g, temb, p)));
  h = ops::conv2d(ops::reshape(h, {1, H, W, kHiddenChannels}), p.conv2);
  h = ops::relu(ops::add_row(ops::reshape(h, {H * W, kHiddenChannels}), p.conv2_bias));
  return ops::add_row(ops::matmul(h, p.out), p.out_bias);
}

SoftLayout predict(const FeatureStack& features, const HeadParams& params) {
  Graph g;
  const HeadVars v = bind_params(g, params, false);
  const Tensor& f = features.features;
  Var rows = predict_graph(g, g.constant(f), features.time_embedding, v);
  return SoftLayout{rows.value().reshaped({f.dim(0), f.dim(1), kSoftLayoutDim}), features.t};
}

Var predict_at(Graph& g, std::span<const float> features, std::size_t H, std::size_t W,
               std::size_t C, const std::array<double, 8>& temb,
               const std::vector<std::size_t>& pixels, const HeadVars& p) {
  if (features.size() != H * W * C) throw InputError("predict_at: feature size mismatch");
  const std::size_t P = pixels.size();
  // 5x5 receptive field per pixel, zero outside the grid.
  Tensor patches({P, 5, 5, C});
  Tensor valid({P * 9, kHiddenChannels});
  for (std::size_t i = 0; i < P; ++i) {
    if (pixels[i] >= H * W) throw InputError("predict_at: pixel out of range");
    const long py = static_cast<long>(pixels[i] / W), px = static_cast<long>(pixels[i] % W);
    for (long dy = -2; dy <= 2; ++dy) {
      for (long dx = -2; dx <= 2; ++dx) {
        const long y = py + dy, x = px + dx;
        if (y < 0 || x < 0 || y >= static_cast<long>(H) || x >= static_cast<long>(W)) continue;
        const float* src = &features[(y * W + x) * C];
        double* dst = &patches.data()[((i * 5 + (dy + 2)) * 5 + (dx + 2)) * C];
        for (std::size_t c = 0; c < C; ++c) dst[c] = src[c];
      }
    }
    for (long dy = -1; dy <= 1; ++dy) {
      for (long dx = -1; dx <= 1; ++dx) {
        const long y = py + dy, x = px + dx;
        if (y < 0 || x < 0 || y >= static_cast<long>(H) || x >= static_cast<long>(W)) continue;
        const std::size_t row = i * 9 + (dy + 1) * 3 + (dx + 1);
        for (std::size_t c = 0; c < kHiddenChannels; ++c) valid[row * kHiddenChannels + c] = 1.0;
      }
    }
  }
  Var h = ops::conv2d(g.constant(std::move(patches)), p.conv1, ops::Padding::kValid);
  h = ops::add_row(ops::reshape(h, {P * 9, kHiddenChannels}), p.conv1_bias);
  h = ops::relu(ops::add_row(h, time_vector(g, temb, p)));
  h = ops::mul(h, g.constant(std::move(valid)));
  h = ops::conv2d(ops::reshape(h, {P, 3, 3, kHiddenChannels}), p.conv2, ops::Padding::kValid);
  h = ops::relu(ops::add_row(ops::reshape(h, {P, kHiddenChannels}), p.conv2_bias));
  return ops::add_row(ops::matmul(h, p.out), p.out_bias);
}

std::vector<Triplet> sample_triplets(const GroundTruthMasks& masks, CounterRng& rng,
                                     const TrainConfig& cfg) {
  const int k = static_cast<int>(masks.instance_classes.size());
  std::vector<std::vector<std::size_t>> segments(k + 1);
  for (std::size_t i = 0; i < masks.labels.size(); ++i) {
    const int l = masks.labels[i];
    if (l < 0 || l > k) throw InputError("sample_triplets: label out of range");
    segments[l].push_back(i);
  }
  std::vector<int> subjects;
  for (int l = 1; l <= k; ++l)
    if (!segments[l].empty()) subjects.push_back(l);
  const bool has_background = !segments[0].empty();
  if (subjects.size() + (has_background ? 1 : 0) < 2) throw InputError("degenerate mask");

  std::vector<Triplet> out;
  out.reserve(cfg.triplets_per_image);
  const std::size_t n = masks.labels.size();
  for (int i = 0; i < cfg.triplets_per_image; ++i) {
    int seg;
    const bool pick_subject = rng.uniform() < cfg.subject_pick_prob;
    if (subjects.empty() || (!pick_subject && has_background)) {
      seg = 0;
    } else {
      seg = subjects[rng.below(subjects.size())];
    }
    const auto& own = segments[seg];
    Triplet t;
    t.anchor = own[rng.below(own.size())];
    t.positive = own[rng.below(own.size())];
    // Negative: uniform over the pixels outside the anchor's segment.
    std::size_t r = rng.below(n - own.size());
    for (int l = 0; l <= k; ++l) {
      if (l == seg) continue;
      if (r < segments[l].size()) {
        t.negative = segments[l][r];
        break;
      }
      r -= segments[l].size();
    }
    out.push_back(t);
  }
  return out;
}

Var triplet_loss(Var rows, const std::vector<Triplet>& triplets, double margin) {
  std::vector<std::size_t> a, p, n;
  for (const Triplet& t : triplets) {
    a.push_back(t.anchor);
    p.push_back(t.positive);
    n.push_back(t.negative);
  }
  Var va = ops::gather_rows(rows, a);
  Var sim_ap = ops::cosine_sim(va, ops::gather_rows(rows, p));
  Var sim_an = ops::cosine_sim(va, ops::gather_rows(rows, n));
  return ops::sum(ops::hinge(ops::add_scalar(ops::sub(sim_an, sim_ap), margin)));
}

TrainResult train(const std::vector<DatasetRecord>& records, const TrainConfig& cfg,
                  std::uint64_t seed) {
  const auto pool = usable(records);
  if (pool.empty()) throw InputError("train: dataset has no usable records");
  TrainResult result;
  result.params = HeadParams::init(seed ^ kInitSalt, pool.front()->channels, cfg.init_stddev);
  HeadParams velocity = HeadParams::zeros(pool.front()->channels);
  CounterRng rng(seed, kTrainStream);

  double block_sum = 0.0;
  int block_n = 0;
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<const DatasetRecord*> recs;
    std::vector<std::size_t> slots;
    std::vector<std::vector<Triplet>> triplets;
    for (int b = 0; b < cfg.batch; ++b) {
      const DatasetRecord* r = pool[rng.below(pool.size())];
      recs.push_back(r);
      slots.push_back(rng.below(r->timesteps.size()));
      triplets.push_back(sample_triplets(r->masks, rng, cfg));
    }
    Graph g;
    const HeadVars vars = bind_params(g, result.params, true);
    Var loss = batch_loss(g, vars, recs, slots, triplets, cfg.margin);
    const double value = loss.value().item();
    if (!std::isfinite(value)) throw NumericError("train: non-finite loss at step " + std::to_string(step));
    g.backward(loss);
    const auto params = param_list(vars);
    auto named_p = result.params.named();
    auto named_v = velocity.named();
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Tensor& grad = g.grad(params[i]);
      Tensor& v = *named_v[i].second;
      Tensor& w = *named_p[i].second;
      for (std::size_t j = 0; j < w.size(); ++j) {
        v[j] = cfg.momentum * v[j] + grad[j];
        w[j] -= cfg.learning_rate * v[j];
      }
    }
    if (!result.params.all_finite()) {
      throw NumericError("train: parameters became non-finite at step " + std::to_string(step));
    }
    block_sum += value;
    ++block_n;
    if (block_n == cfg.log_every || step + 1 == cfg.steps) {
      result.loss_curve.push_back(block_sum / block_n);
      block_sum = 0.0;
      block_n = 0;
    }
  }
  result.steps = cfg.steps;
  return result;
}

double evaluate_triplet_loss(const std::vector<DatasetRecord>& records, const HeadParams& params,
                             const TrainConfig& cfg, std::uint64_t seed) {
  const auto pool = usable(records);
  if (pool.empty()) throw InputError("evaluate: dataset has no usable records");
  double sum = 0.0;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    CounterRng rng(seed, kEvalStream + 1000 * pool[i]->index);
    const std::size_t slot = rng.below(pool[i]->timesteps.size());
    const auto triplets = sample_triplets(pool[i]->masks, rng, cfg);
    Graph g;
    const HeadVars vars = bind_params(g, params, false);
    sum += batch_loss(g, vars, {pool[i]}, {slot}, {triplets}, cfg.margin).value().item();
  }
  return sum / static_cast<double>(pool.size());
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  Config c;
  c.train = ckpt.train;
  nlohmann::ordered_json j;
  j["format"] = kCheckpointFormat;
  j["version"] = kCheckpointVersion;
  j["config_hash"] = ckpt.config_hash;
  j["step"] = ckpt.step;
  nlohmann::ordered_json train = nlohmann::ordered_json::object();
  for (const auto& [k, v] : to_key_values(c, "train.")) train[k] = v;
  j["train"] = train;
  nlohmann::ordered_json shapes = nlohmann::ordered_json::object();
  nlohmann::ordered_json data = nlohmann::ordered_json::object();
  for (const auto& [name, t] : ckpt.params.named()) {
    shapes[name] = t->shape();
    data[name] = encode_f64(t->data());
  }
  j["shapes"] = shapes;
  j["params"] = data;
  j["loss_curve"] = ckpt.loss_curve;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write checkpoint " + path);
  out << j.dump(2) << '\n';
  if (!out) throw InputError("write failed for checkpoint " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read checkpoint " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  Checkpoint ckpt;
  try {
    const auto j = nlohmann::json::parse(ss.str());
    if (j.at("format") != kCheckpointFormat) throw InputError("not a checkpoint: " + path);
    if (j.at("version").get<int>() != kCheckpointVersion) throw InputError("unsupported checkpoint version");
    ckpt.config_hash = j.at("config_hash").get<std::string>();
    ckpt.step = j.at("step").get<int>();
    Config c;
    for (const auto& [k, v] : j.at("train").items()) set_key(c, k, v.get<std::string>());
    ckpt.train = c.train;
    const auto& shapes = j.at("shapes");
    const std::size_t C = shapes.at("conv1").at(2).get<std::size_t>();
    ckpt.params = HeadParams::zeros(C);
    for (auto& [name, t] : ckpt.params.named()) {
      const Shape shape = shapes.at(name).get<Shape>();
      if (shape != t->shape()) throw InputError("checkpoint: bad shape for " + name);
      std::vector<double> values = decode_f64(j.at("params").at(name).get<std::string>());
      if (values.size() != t->size()) throw InputError("checkpoint: bad payload for " + name);
      *t = Tensor(shape, std::move(values));
    }
    ckpt.loss_curve = j.at("loss_curve").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw InputError(path + ": malformed checkpoint: " + e.what());
  }
  if (!ckpt.params.all_finite()) throw NumericError("checkpoint " + path + " holds non-finite values");
  return ckpt;
}

}  // namespace decisive
