#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "decisive/autodiff.hpp"
#include "decisive/layout.hpp"
#include "decisive/tensor.hpp"

// Synthetic stand-in for a diffusion backbone. A scene of Gaussian blobs is
// read off the initial noise; denoising pulls the latent toward that scene,
// and subject masks confine which blob signatures may appear where.

namespace decisive {

struct SimConfig {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t latent_channels = 12;
  int steps = 50;
  double sigma_max = 0.4;
  /// Softmax temperature of simulated cross-attention logits.
  double attention_temperature = 0.2;
  std::size_t scene_smoothing = 9;
  double nms_radius = 10.0;
  double nms_radius_min = 4.0;
  double nms_relax_step = 2.0;
  double radius_min = 6.0;
  double radius_max = 16.0;
  /// Blob radius is capped at this fraction of the nearest-center distance
  /// (never below radius_min) so neighbouring blobs stay separable.
  double radius_spacing = 0.6;
  /// Weight of the per-instance perturbation mixed into the class signature.
  double instance_spread = 1.0;
  /// Gaussian weight above which a pixel belongs to a blob's ground truth.
  double mask_threshold = 0.5;
  /// Per-channel RMS of the background term of the clean field.
  double signal_scale = 1.0;
  int class_pool = 20;
  int background_pool = 4;
};

const std::vector<std::string>& class_names();
/// Accepts a pool name ("dog") or a numeric id ("7").
int class_id_from_name(std::string_view name);

struct SubjectSpec {
  int class_id = 0;
  int count = 1;
  friend bool operator==(const SubjectSpec&, const SubjectSpec&) = default;
};

struct PromptSpec {
  std::vector<SubjectSpec> subjects;
  int background_class = 0;

  int k() const;
  /// Class id of instance index i (instances enumerate subjects in order).
  int instance_class(int instance) const;
  /// Throws InputError unless 1 <= k <= 10, counts >= 1, class ids distinct.
  void validate(const SimConfig& cfg = {}) const;
  /// Parses "dog:2,cat:1". Throws InputError with a parse message.
  static PromptSpec parse(std::string_view text);
  std::string to_string() const;

  friend bool operator==(const PromptSpec&, const PromptSpec&) = default;
};

struct Latent {
  Tensor z;  // [H, W, C]
  int t = 0;
  int steps = 0;
};

struct SceneInstance {
  int instance_id = 0;
  int class_id = 0;
  double row = 0.0;
  double col = 0.0;
  double radius = 0.0;
  std::vector<double> signature;

  friend bool operator==(const SceneInstance&, const SceneInstance&) = default;
};

struct SceneSpec {
  std::vector<SceneInstance> instances;
  std::vector<double> background_signature;

  friend bool operator==(const SceneSpec&, const SceneSpec&) = default;
};

struct FeatureStack {
  Tensor features;  // [H, W, C]
  std::array<double, 8> time_embedding{};
  int t = 0;
};

struct CrossAttnMaps {
  Tensor maps;  // [k, H*W]; each row a distribution over pixels
  std::size_t count() const { return maps.empty() ? 0 : maps.dim(0); }
};

struct GroundTruthMasks {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<int> labels;  // 0 background, 1..k instance i-1
  std::vector<int> instance_classes;

  friend bool operator==(const GroundTruthMasks&, const GroundTruthMasks&) = default;
};

/// Fixed unit signature of a subject class / background class.
std::vector<double> class_signature(int class_id, const SimConfig& cfg);
std::vector<double> background_signature(int background_class, const SimConfig& cfg);

Latent init_latent(std::uint64_t seed, const SimConfig& cfg = {});

/// Reads instance centers off the smoothed initial noise. Throws
/// SceneInfeasibleError if a class cannot place its instances.
SceneSpec derive_scene(const Latent& initial, const PromptSpec& prompt, std::uint64_t seed,
                       const SimConfig& cfg = {});

/// Factor applied to the unit-signature field: signal_scale * sqrt(channels).
double field_gain(const SimConfig& cfg = {});
/// Denoiser attractor: background + Gaussian-weighted instance signatures,
/// times field_gain.
Tensor clean_field(const SceneSpec& scene, const SimConfig& cfg = {});
/// clean_field where, inside subject cluster j, only the instance tagged j
/// contributes. Background pixels keep every contribution.
Tensor clean_field_masked(const SceneSpec& scene, const HardLayout* mask,
                          const SimConfig& cfg = {});

/// eta(t) = 1/t, sigma(t) = sigma_max (t-1)/T.
double denoise_rate(int t);
double noise_scale(int t, const SimConfig& cfg);

/// One reverse step t -> t-1; throws InputError at t = 0.
Latent denoise_step(const Latent& latent, const SceneSpec& scene, const HardLayout* mask,
                    std::uint64_t noise_seed, const SimConfig& cfg = {});

std::array<double, 8> time_embedding(int t, int steps);
FeatureStack extract_features(const Latent& latent);
/// Differentiable feature field (3x3 box filter of z), [H, W, C].
Var feature_field(Var z);

/// Simulated cross-attention of every instance over the pixels, restricted to
/// the instance's own cluster plus background when a mask is given.
CrossAttnMaps cross_attention(const Latent& latent, const SceneSpec& scene,
                              const HardLayout* mask, const SimConfig& cfg = {});
/// Differentiable form over flattened features [H*W, C]; returns [k, H*W].
Var cross_attention_graph(Var features_flat, const SceneSpec& scene, const HardLayout* mask,
                          const SimConfig& cfg = {});

/// Whether query pixel label may attend to key pixel label.
inline bool attention_allowed(int query_label, int key_label) {
  return query_label == 0 || key_label == 0 || query_label == key_label;
}
/// Sets scores[q, p] to -inf where attention_allowed is false. The result is
/// the only tensor in the project that carries infinities by contract.
Tensor apply_attention_mask(const Tensor& scores, const HardLayout& mask);

/// Blob ownership: argmax Gaussian weight when it clears cfg.mask_threshold.
GroundTruthMasks ground_truth_masks(const SceneSpec& scene, const SimConfig& cfg = {});
/// IoU between the thresholded (un-partitioned) footprints of two instances.
double footprint_iou(const SceneInstance& a, const SceneInstance& b, const SimConfig& cfg = {});

}  // namespace decisive
