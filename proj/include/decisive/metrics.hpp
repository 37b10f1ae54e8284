#pragma once

#include <vector>

#include "decisive/layout.hpp"
#include "decisive/sim_world.hpp"

namespace decisive {

struct MetricsConfig {
  /// Minimum pixel area for a cluster to count as a generated subject.
  std::size_t min_area = 16;
};

/// Subject clusters of A and B matched by maximum IoU; unmatched slots count
/// 0. Mean over max(kA, kB) nonempty clusters; 1 when both have none.
double layout_iou(const HardLayout& a, const HardLayout& b);
/// Same, with the ground-truth instances as the second partition.
double layout_iou(const HardLayout& a, const GroundTruthMasks& gt);
HardLayout layout_from_masks(const GroundTruthMasks& gt);

/// Mean over unordered pairs of 1 - layout_iou. Throws InputError below 2.
double diversity(const std::vector<HardLayout>& layouts);

struct CountScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  int true_positive = 0;
  int predicted = 0;
  int expected = 0;
};
/// Micro-averaged over classes: predicted count of a class is the number of
/// tagged clusters of that class with area >= min_area.
CountScore count_f1(const HardLayout& layout, const PromptSpec& prompt,
                    const MetricsConfig& cfg = {});

/// Identity-label IoU of consecutive layouts, averaged over labels present in
/// either. layouts[i] is M^t with t = steps - i.
double pair_consistency(const HardLayout& newer, const HardLayout& older);
/// Mean pair_consistency over consecutive pairs whose timesteps both lie in
/// the last half of the schedule (t <= steps / 2).
double temporal_consistency(const std::vector<HardLayout>& layouts, int steps);

struct Summary {
  double mean = 0.0;
  double stddev = 0.0;
  std::size_t count = 0;
};
Summary summarize(const std::vector<double>& values);

}  // namespace decisive
