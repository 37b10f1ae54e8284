#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "decisive/autodiff.hpp"
#include "decisive/dataset.hpp"
#include "decisive/rng.hpp"
#include "decisive/sim_world.hpp"

namespace decisive {

inline constexpr std::size_t kSoftLayoutDim = 10;
inline constexpr std::size_t kHiddenChannels = 16;
inline constexpr std::size_t kTimeEmbeddingDim = 8;

/// Per-pixel descriptor grid; pixels of one subject have similar descriptors.
struct SoftLayout {
  Tensor S;  // [H, W, d]
  int t = 0;
};

/// Weights of the single convolutional soft-layout head:
/// out_conv(relu(conv2(relu(conv1(f) + time_proj(e))))).
struct HeadParams {
  Tensor conv1;       // [3, 3, C, 16]
  Tensor conv1_bias;  // [16]
  Tensor conv2;       // [3, 3, 16, 16]
  Tensor conv2_bias;  // [16]
  Tensor time_proj;   // [8, 16]
  Tensor time_bias;   // [16]
  Tensor out;         // [16, 10]
  Tensor out_bias;    // [10]

  /// Every entry drawn from normal(0, stddev) with a seeded counter stream.
  static HeadParams init(std::uint64_t seed, std::size_t feature_channels, double stddev = 0.05);
  static HeadParams zeros(std::size_t feature_channels);

  std::vector<std::pair<std::string, Tensor*>> named();
  std::vector<std::pair<std::string, const Tensor*>> named() const;
  bool all_finite() const;
  friend bool operator==(const HeadParams&, const HeadParams&) = default;
};

/// HeadParams bound into a graph.
struct HeadVars {
  Var conv1, conv1_bias, conv2, conv2_bias, time_proj, time_bias, out, out_bias;
};
HeadVars bind_params(Graph& g, const HeadParams& p, bool trainable);
std::vector<Var> param_list(const HeadVars& v);

struct TrainConfig {
  int steps = 5000;
  double learning_rate = 1e-4;
  int triplets_per_image = 50;
  double subject_pick_prob = 0.75;
  double margin = 0.5;
  int batch = 4;
  double momentum = 0.9;
  int log_every = 100;
  double init_stddev = 0.05;
};

/// Full-grid soft layout, [H*W, d], differentiable in features and params.
Var predict_graph(Graph& g, Var features, const std::array<double, 8>& time_embedding,
                  const HeadVars& params);
SoftLayout predict(const FeatureStack& features, const HeadParams& params);

/// Soft-layout rows at selected pixels only, [P, d]. Agrees with the
/// full-grid prediction at those pixels; used where only sampled pixels
/// contribute to the loss.
Var predict_at(Graph& g, std::span<const float> features, std::size_t height, std::size_t width,
               std::size_t channels, const std::array<double, 8>& time_embedding,
               const std::vector<std::size_t>& pixels, const HeadVars& params);

/// Pixel-index triplet; label(anchor) == label(positive) != label(negative).
struct Triplet {
  std::size_t anchor = 0;
  std::size_t positive = 0;
  std::size_t negative = 0;
};

/// Throws InputError("degenerate mask") when fewer than two labels appear.
std::vector<Triplet> sample_triplets(const GroundTruthMasks& masks, CounterRng& rng,
                                     const TrainConfig& cfg);

/// Sum over triplets of [sim(a, n) - sim(a, p) + margin]_+ with cosine sim.
/// Triplet indices address rows of `rows`.
Var triplet_loss(Var rows, const std::vector<Triplet>& triplets, double margin);

struct TrainResult {
  HeadParams params;
  /// Mean per-image loss over each block of log_every steps.
  std::vector<double> loss_curve;
  int steps = 0;
};

/// Minibatch momentum descent on the triplet loss. Throws NumericError on a
/// non-finite loss and InputError on an empty dataset.
TrainResult train(const std::vector<DatasetRecord>& records, const TrainConfig& cfg,
                  std::uint64_t seed);
/// Mean per-image triplet loss of `params` on fixed seeded triplets; used to
/// compare before/after training on equal footing.
double evaluate_triplet_loss(const std::vector<DatasetRecord>& records, const HeadParams& params,
                             const TrainConfig& cfg, std::uint64_t seed);

struct Checkpoint {
  HeadParams params;
  TrainConfig train;
  int step = 0;
  std::string config_hash;
  std::vector<double> loss_curve;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace decisive
