#pragma once

#include <cstddef>
#include <vector>

namespace decisive {

/// Pixel partition into background (label 0) and subject clusters 1..k.
///
/// instance_tags has k+1 entries; instance_tags[label] is the prompt instance
/// the cluster stands for, or -1 when untagged. instance_tags[0] is always -1.
struct HardLayout {
  std::size_t height = 0;
  std::size_t width = 0;
  int k = 0;
  std::vector<int> labels;
  std::vector<int> instance_tags;

  std::size_t size() const { return labels.size(); }
  int label_at(std::size_t row, std::size_t col) const { return labels[row * width + col]; }
  /// Label whose tag is `instance`, or -1.
  int label_of_instance(int instance) const;
  std::vector<std::size_t> label_counts() const;
  /// Labels within [0, k], instance_tags sized k+1.
  bool is_valid() const;

  friend bool operator==(const HardLayout&, const HardLayout&) = default;
};

/// A layout with every pixel in the background and k untagged clusters.
HardLayout background_layout(std::size_t height, std::size_t width, int k);

}  // namespace decisive
