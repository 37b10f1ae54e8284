#include "decisive/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "decisive/errors.hpp"
#include "decisive/layout_cluster.hpp"

namespace decisive {

HardLayout layout_from_masks(const GroundTruthMasks& gt) {
  HardLayout m;
  m.height = gt.height;
  m.width = gt.width;
  m.k = static_cast<int>(gt.instance_classes.size());
  m.labels = gt.labels;
  m.instance_tags.assign(m.k + 1, -1);
  for (int j = 0; j < m.k; ++j) m.instance_tags[j + 1] = j;
  return m;
}

double layout_iou(const HardLayout& a, const HardLayout& b) {
  if (a.size() != b.size()) throw InputError("layout_iou: grids differ");
  const auto ca = a.label_counts(), cb = b.label_counts();
  std::vector<int> la, lb;
  for (int l = 1; l <= a.k; ++l)
    if (ca[l] > 0) la.push_back(l);
  for (int l = 1; l <= b.k; ++l)
    if (cb[l] > 0) lb.push_back(l);
  const std::size_t slots = std::max(la.size(), lb.size());
  if (slots == 0) return 1.0;
  std::vector<std::vector<std::size_t>> inter(a.k + 1, std::vector<std::size_t>(b.k + 1, 0));
  for (std::size_t x = 0; x < a.size(); ++x) ++inter[a.labels[x]][b.labels[x]];
  std::vector<std::vector<double>> score(la.size(), std::vector<double>(lb.size(), 0.0));
  for (std::size_t i = 0; i < la.size(); ++i) {
    for (std::size_t j = 0; j < lb.size(); ++j) {
      const std::size_t in = inter[la[i]][lb[j]];
      score[i][j] = static_cast<double>(in) / static_cast<double>(ca[la[i]] + cb[lb[j]] - in);
    }
  }
  const Assignment asg = hungarian(pad_square(score), true);
  return asg.total / static_cast<double>(slots);
}

double layout_iou(const HardLayout& a, const GroundTruthMasks& gt) {
  return layout_iou(a, layout_from_masks(gt));
}

double diversity(const std::vector<HardLayout>& layouts) {
  if (layouts.size() < 2) throw InputError("diversity needs at least two layouts");
  double s = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < layouts.size(); ++i) {
    for (std::size_t j = i + 1; j < layouts.size(); ++j) {
      s += 1.0 - layout_iou(layouts[i], layouts[j]);
      ++pairs;
    }
  }
  return s / static_cast<double>(pairs);
}

CountScore count_f1(const HardLayout& layout, const PromptSpec& prompt, const MetricsConfig& cfg) {
  const auto counts = layout.label_counts();
  std::map<int, int> predicted, expected;
  for (const auto& s : prompt.subjects) expected[s.class_id] += s.count;
  for (int l = 1; l <= layout.k; ++l) {
    const int inst = layout.instance_tags[l];
    if (inst < 0 || counts[l] < cfg.min_area) continue;
    ++predicted[prompt.instance_class(inst)];
  }
  CountScore r;
  for (const auto& [cls, n] : expected) {
    const auto it = predicted.find(cls);
    r.true_positive += std::min(n, it == predicted.end() ? 0 : it->second);
    r.expected += n;
  }
  for (const auto& [cls, n] : predicted) r.predicted += n;
  r.precision = r.predicted == 0 ? 0.0 : static_cast<double>(r.true_positive) / r.predicted;
  r.recall = r.expected == 0 ? 0.0 : static_cast<double>(r.true_positive) / r.expected;
  r.f1 = r.precision + r.recall == 0.0 ? 0.0 : 2.0 * r.precision * r.recall / (r.precision + r.recall);
  return r;
}

double pair_consistency(const HardLayout& newer, const HardLayout& older) {
  if (newer.size() != older.size()) throw InputError("temporal consistency: grids differ");
  const int k = std::max(newer.k, older.k);
  std::vector<std::size_t> inter(k + 1, 0), an(k + 1, 0), ao(k + 1, 0);
  for (std::size_t x = 0; x < newer.size(); ++x) {
    ++an[newer.labels[x]];
    ++ao[older.labels[x]];
    if (newer.labels[x] == older.labels[x]) ++inter[newer.labels[x]];
  }
  double s = 0.0;
  int used = 0;
  for (int l = 1; l <= k; ++l) {
    const std::size_t uni = an[l] + ao[l] - inter[l];
    if (uni == 0) continue;
    s += static_cast<double>(inter[l]) / static_cast<double>(uni);
    ++used;
  }
  return used == 0 ? 1.0 : s / used;
}

double temporal_consistency(const std::vector<HardLayout>& layouts, int steps) {
  if (layouts.size() < 2) throw InputError("temporal consistency needs at least two layouts");
  double s = 0.0;
  int pairs = 0;
  for (std::size_t i = 0; i + 1 < layouts.size(); ++i) {
    // layouts[i + 1] is the newer of the pair (smaller t).
    const int t_newer = steps - static_cast<int>(i + 1);
    const int t_older = t_newer + 1;
    if (t_older > steps / 2) continue;
    s += pair_consistency(layouts[i + 1], layouts[i]);
    ++pairs;
  }
  if (pairs == 0) {
    for (std::size_t i = 0; i + 1 < layouts.size(); ++i) {
      s += pair_consistency(layouts[i + 1], layouts[i]);
      ++pairs;
    }
  }
  return s / pairs;
}

Summary summarize(const std::vector<double>& values) {
  Summary s;
  s.count = values.size();
  if (values.empty()) return s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - s.mean) * (v - s.mean);
  s.stddev = values.size() > 1 ? std::sqrt(var / static_cast<double>(values.size() - 1)) : 0.0;
  return s;
}

}  // namespace decisive
