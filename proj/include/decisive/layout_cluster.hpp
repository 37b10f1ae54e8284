#pragma once

#include <cstdint>
#include <deque>
#include <optional>
#include <vector>

#include "decisive/layout.hpp"
#include "decisive/sim_world.hpp"
#include "decisive/soft_layout.hpp"
#include "decisive/tensor.hpp"

namespace decisive {

enum class ClusterMetric { kCosine, kEuclidean };

struct ClusterConfig {
  int window = 30;
  double variance_threshold = 0.025;
  int max_iters = 100;
  int restarts = 4;
  ClusterMetric metric = ClusterMetric::kCosine;
};

/// The w+1 most recent soft layouts (newest first) and the last hard layout.
class LayoutHistory {
 public:
  explicit LayoutHistory(int window = 30) : capacity_(static_cast<std::size_t>(window) + 1) {}

  /// Timesteps must arrive strictly decreasing by one; throws InputError.
  void push(SoftLayout layout);
  const std::deque<SoftLayout>& entries() const { return entries_; }
  bool empty() const { return entries_.empty(); }
  std::size_t capacity() const { return capacity_; }
  int newest_t() const { return entries_.front().t; }

  const std::optional<HardLayout>& previous() const { return previous_; }
  void set_previous(HardLayout m) { previous_ = std::move(m); }

 private:
  std::size_t capacity_;
  std::deque<SoftLayout> entries_;
  std::optional<HardLayout> previous_;
};

/// Per-pixel concatenation of the L2-normalized soft layouts, newest first:
/// [H*W, d*m].
Tensor stack_window(const LayoutHistory& history);

struct KMeansResult {
  std::vector<int> assignments;
  Tensor centroids;  // [k, D]
  double objective = 0.0;
  int restart = 0;
  int iterations = 0;
  /// Objective after each centroid update, per restart.
  std::vector<std::vector<double>> objective_history;
};

/// Cosine-distance K-means (best of cfg.restarts, earliest on a near-tie,
/// k-means++ seeding, empty clusters reseeded with the farthest point).
/// Throws InputError if n < k.
KMeansResult spherical_kmeans(const Tensor& points, int k, std::uint64_t seed,
                              const ClusterConfig& cfg = {});

/// Cluster with the most pixels on the one-pixel border ring; ties to the
/// lowest index.
int select_background(std::span<const int> labels, std::size_t height, std::size_t width,
                      int num_clusters);

struct RefineResult {
  std::vector<std::size_t> kept;
  std::vector<std::size_t> dropped;
  int splits = 0;
};

/// Mean over points of (1 - cos(point, normalized mean))^2.
double cluster_variance(const Tensor& points, std::span<const std::size_t> members);
/// Repeatedly 2-splits `members` (row indices of points, sorted ascending),
/// keeping the larger part, until the variance drops below the threshold.
RefineResult refine_cluster(const Tensor& points, std::vector<std::size_t> members,
                            std::uint64_t seed, const ClusterConfig& cfg = {});

struct Assignment {
  std::vector<int> permutation;  // row -> column
  double total = 0.0;
};

/// Optimal square assignment; among optimal permutations the lexicographically
/// smallest is returned. Throws InputError on NaN or a non-square matrix.
Assignment hungarian(const std::vector<std::vector<double>>& score, bool maximize);
/// Pads a rectangular matrix with zero rows/columns to square.
std::vector<std::vector<double>> pad_square(const std::vector<std::vector<double>>& score);

struct TaggingResult {
  HardLayout layout;
  /// Instances whose assigned cluster is empty.
  std::vector<int> unassigned;
};

/// Tags the raw clusters of `raw` (labels 0..k, untagged) with prompt
/// instances, maximizing attention mass; label j+1 becomes instance j.
TaggingResult assign_initial_labels(const HardLayout& raw, const CrossAttnMaps& attn,
                                    const PromptSpec& prompt);

/// Relabels subject clusters of `raw` to maximize IoU with `previous`;
/// background stays 0 and instance tags are carried forward.
HardLayout relabel_temporal(const HardLayout& raw, const HardLayout& previous);

struct HardenResult {
  HardLayout layout;
  std::vector<int> unassigned;
  double kmeans_objective = 0.0;
  /// Pixels removed from subject clusters by refinement, ascending.
  std::vector<std::size_t> dropped;
};

/// Soft-to-hard conversion of the newest soft layout in `history`.
HardenResult harden(const LayoutHistory& history, const CrossAttnMaps& attn,
                    const PromptSpec& prompt, int t, int steps, std::uint64_t seed,
                    const ClusterConfig& cfg = {});

double mask_iou(std::span<const int> a, int label_a, std::span<const int> b, int label_b);

}  // namespace decisive
