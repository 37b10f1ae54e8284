#pragma once

#include <cstdint>
#include <vector>

#include "decisive/autodiff.hpp"
#include "decisive/layout.hpp"
#include "decisive/sim_world.hpp"
#include "decisive/soft_layout.hpp"

namespace decisive {

enum class VarianceMode {
  /// (1 - sim)^2: decreasing in intra-cluster similarity.
  kDistance,
  /// sim^2 exactly as printed in the loss definition.
  kVerbatim,
};

struct GuidanceConfig {
  double alpha_cross = 0.3;
  double alpha_var = 0.21;
  double alpha_dice = 0.49;
  double tau = 15.0;
  double step_size = 200.0;
  int iterations = 5;
  int guided_steps = 15;
  VarianceMode variance_mode = VarianceMode::kDistance;
  double dice_eps = 1e-6;
};

struct ClusterMeans {
  Tensor means;               // [k+1, d]
  std::vector<bool> present;  // nonempty clusters
};

ClusterMeans cluster_means(const Tensor& soft, const HardLayout& m);
/// Differentiable means, [k+1, d]; empty clusters give zero rows.
Var cluster_means_graph(Var soft_rows, const HardLayout& m);

/// Mean over nonempty clusters of the mean per-pixel (1 - sim)^2 (distance
/// mode) or sim^2 (verbatim mode) against the cluster mean.
Var variance_loss(Var soft_rows, const HardLayout& m, VarianceMode mode);
/// Row-stochastic [n, k+1] soft assignment, softmax(sim / tau); empty
/// clusters get zero probability. Throws NumericError if all are empty.
Var prob_layout(Var soft_rows, Var means, const std::vector<bool>& present, double tau);
/// 1 - mean over nonempty clusters of (2 sum PG + eps) / (sum P^2 + sum G^2 + eps).
Var dice_loss(Var prob, const HardLayout& m, double eps = 1e-6);

struct CrossLossInfo {
  std::vector<int> excluded_instances;
};
/// Mean over tagged instances of 1 - (attention mass inside the instance's
/// cluster). attn: [k, n].
Var cross_loss(Var attn, const HardLayout& m, CrossLossInfo* info = nullptr);

struct LossTerms {
  Var total, cross, variance, dice;
};
struct LossValues {
  double total = 0.0, cross = 0.0, variance = 0.0, dice = 0.0;
};

LossTerms decisive_loss(Var soft_rows, const HardLayout& m, Var attn, const GuidanceConfig& cfg);
LossValues loss_values(const LossTerms& terms);

struct GuidanceResult {
  Latent latent;
  std::vector<LossValues> trajectory;  // loss before each update
  bool aborted = false;                // non-finite gradient met
  std::vector<int> excluded_instances;
};

/// Gradient steps on z aligning the predicted soft layout with `m`.
GuidanceResult guidance_step(const Latent& latent, const HardLayout& m, const SceneSpec& scene,
                             const HeadParams& params, const GuidanceConfig& cfg,
                             const SimConfig& sim = {});

/// Loss of the whole latent-to-loss chain; the function guidance descends.
LossTerms guidance_objective(Graph& g, Var z, int t, int steps, const HardLayout& m,
                             const SceneSpec& scene, const HeadVars& params,
                             const GuidanceConfig& cfg, const SimConfig& sim);

}  // namespace decisive
