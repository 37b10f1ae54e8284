#include "decisive/layout.hpp"

namespace decisive {

int HardLayout::label_of_instance(int instance) const {
  for (int l = 1; l < static_cast<int>(instance_tags.size()); ++l) {
    if (instance_tags[l] == instance) return l;
  }
  return -1;
}

std::vector<std::size_t> HardLayout::label_counts() const {
  std::vector<std::size_t> counts(static_cast<std::size_t>(k) + 1, 0);
  for (int l : labels) ++counts[l];
  return counts;
}

bool HardLayout::is_valid() const {
  if (labels.size() != height * width) return false;
  if (instance_tags.size() != static_cast<std::size_t>(k) + 1) return false;
  if (!instance_tags.empty() && instance_tags[0] != -1) return false;
  for (int l : labels) {
    if (l < 0 || l > k) return false;
  }
  return true;
}

HardLayout background_layout(std::size_t height, std::size_t width, int k) {
  HardLayout m;
  m.height = height;
  m.width = width;
  m.k = k;
  m.labels.assign(height * width, 0);
  m.instance_tags.assign(static_cast<std::size_t>(k) + 1, -1);
  return m;
}

}  // namespace decisive
