#include "decisive/layout_cluster.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <Eigen/Dense>

#include "decisive/errors.hpp"
#include "decisive/rng.hpp"

namespace decisive {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

constexpr std::uint64_t kKMeansStream = 100;
constexpr std::uint64_t kSplitSalt = 0x5B117ULL;
constexpr std::uint64_t kHardenSalt = 0x4A2DULL;

RowMat to_matrix(const Tensor& t) {
  return Eigen::Map<const RowMat>(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                                  static_cast<Eigen::Index>(t.cols()));
}

void normalize_rows(RowMat& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double n = m.row(i).norm();
    if (n >= ops::kNormFloor) m.row(i) /= n;
    else m.row(i).setZero();
  }
}

struct Lloyd {
  std::vector<int> assign;
  RowMat centroids;
  double objective = 0.0;
  int iterations = 0;
  std::vector<double> history;
};

double point_distance(const RowMat& x, Eigen::Index i, const RowMat& c, Eigen::Index j,
                      ClusterMetric metric) {
  if (metric == ClusterMetric::kCosine) return 1.0 - x.row(i).dot(c.row(j));
  return (x.row(i) - c.row(j)).squaredNorm();
}

/// Cluster sums and sizes for an assignment.
void accumulate(const RowMat& x, const std::vector<int>& assign, RowMat& sums,
                std::vector<std::size_t>& sizes) {
  sums.setZero();
  std::fill(sizes.begin(), sizes.end(), 0);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    sums.row(assign[i]) += x.row(i);
    ++sizes[assign[i]];
  }
}

/// Centroids from sums, and the objective they reach on the current assignment.
double centroids_from_sums(const RowMat& sums, const std::vector<std::size_t>& sizes,
                           const Eigen::VectorXd& sq, RowMat& c, ClusterMetric metric) {
  const double n = static_cast<double>(sq.size());
  double fit = 0.0;
  for (Eigen::Index j = 0; j < sums.rows(); ++j) {
    c.row(j).setZero();
    if (sizes[j] == 0) continue;
    if (metric == ClusterMetric::kCosine) {
      const double nrm = sums.row(j).norm();
      if (nrm < ops::kNormFloor) continue;
      c.row(j) = sums.row(j) / nrm;
      fit += nrm;
    } else {
      c.row(j) = sums.row(j) / static_cast<double>(sizes[j]);
      fit += sums.row(j).squaredNorm() / static_cast<double>(sizes[j]);
    }
  }
  if (metric == ClusterMetric::kCosine) return (n - fit) / n;
  return (sq.sum() - fit) / n;
}

Lloyd run_lloyd(const RowMat& x, const Eigen::VectorXd& sq, int k, CounterRng rng,
                const ClusterConfig& cfg) {
  const Eigen::Index n = x.rows();
  Lloyd r;
  r.centroids = RowMat::Zero(k, x.cols());

  // k-means++ seeding.
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  Eigen::Index pick = static_cast<Eigen::Index>(rng.below(n));
  for (int j = 0; j < k; ++j) {
    if (j > 0) {
      double total = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) total += nearest[i];
      const double u = rng.uniform();
      if (total <= 0.0) {
        pick = static_cast<Eigen::Index>(rng.below(n));
      } else {
        const double target = u * total;
        double acc = 0.0;
        pick = n - 1;
        for (Eigen::Index i = 0; i < n; ++i) {
          acc += nearest[i];
          if (acc > target && nearest[i] > 0.0) {
            pick = i;
            break;
          }
        }
      }
    }
    r.centroids.row(j) = x.row(pick);
    for (Eigen::Index i = 0; i < n; ++i) {
      nearest[i] = std::min(nearest[i], std::max(0.0, point_distance(x, i, r.centroids, j, cfg.metric)));
    }
  }

  r.assign.assign(n, -1);
  RowMat sums(k, x.cols());
  std::vector<std::size_t> sizes(k, 0);
  Eigen::VectorXd csq(k);
  for (int it = 0; it < std::max(1, cfg.max_iters); ++it) {
    if (cfg.metric == ClusterMetric::kEuclidean) csq = r.centroids.rowwise().squaredNorm();
    bool changed = false;
    sums.setZero();
    std::fill(sizes.begin(), sizes.end(), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      int best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (int j = 0; j < k; ++j) {
        const double dot = x.row(i).dot(r.centroids.row(j));
        const double d = cfg.metric == ClusterMetric::kCosine ? 1.0 - dot : sq(i) - 2.0 * dot + csq(j);
        if (d < best_d) {
          best_d = d;
          best = j;
        }
      }
      changed = changed || r.assign[i] != best;
      r.assign[i] = best;
      sums.row(best) += x.row(i);
      ++sizes[best];
    }
    if (it > 0 && !changed) break;
    ++r.iterations;

    double obj = centroids_from_sums(sums, sizes, sq, r.centroids, cfg.metric);
    for (int j = 0; j < k; ++j) {
      if (sizes[j] != 0) continue;
      // Reseed with the point farthest from its own centroid.
      Eigen::Index far = -1;
      double far_d = -1.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (sizes[r.assign[i]] <= 1) continue;
        const double di = point_distance(x, i, r.centroids, r.assign[i], cfg.metric);
        if (di > far_d) {
          far_d = di;
          far = i;
        }
      }
      if (far < 0) break;
      --sizes[r.assign[far]];
      r.assign[far] = j;
      sizes[j] = 1;
      accumulate(x, r.assign, sums, sizes);
      obj = centroids_from_sums(sums, sizes, sq, r.centroids, cfg.metric);
    }
    r.history.push_back(obj);
  }
  r.objective = r.history.back();
  return r;
}

KMeansResult kmeans_matrix(RowMat x, int k, std::uint64_t seed, const ClusterConfig& cfg) {
  if (k < 1) throw InputError("kmeans: need at least one cluster");
  if (x.rows() < k) {
    throw InputError("kmeans: " + std::to_string(x.rows()) + " points for " + std::to_string(k) +
                     " clusters");
  }
  if (cfg.metric == ClusterMetric::kCosine) normalize_rows(x);
  const Eigen::VectorXd sq = x.rowwise().squaredNorm();
  KMeansResult best;
  best.objective = std::numeric_limits<double>::infinity();
  for (int r = 0; r < std::max(1, cfg.restarts); ++r) {
    Lloyd l = run_lloyd(x, sq, k, CounterRng(seed, kKMeansStream + r), cfg);
    best.objective_history.push_back(l.history);
    // Restarts within rounding of the best count as ties; the earliest wins.
    if (l.objective < best.objective - 1e-9 * std::abs(l.objective)) {
      best.objective = l.objective;
      best.assignments = std::move(l.assign);
      best.restart = r;
      best.iterations = l.iterations;
      best.centroids = Tensor({static_cast<std::size_t>(k), static_cast<std::size_t>(x.cols())},
                              std::vector<double>(l.centroids.data(), l.centroids.data() + l.centroids.size()));
    }
  }
  return best;
}

}  // namespace

void LayoutHistory::push(SoftLayout layout) {
  if (!entries_.empty()) {
    if (layout.t != entries_.front().t - 1) {
      throw InputError("layout history: expected t = " + std::to_string(entries_.front().t - 1) +
                       ", got " + std::to_string(layout.t));
    }
    if (layout.S.shape() != entries_.front().S.shape()) {
      throw InputError("layout history: soft-layout shape changed");
    }
  }
  entries_.push_front(std::move(layout));
  while (entries_.size() > capacity_) entries_.pop_back();
}

Tensor stack_window(const LayoutHistory& history) {
  if (history.empty()) throw InputError("stack_window: empty history");
  const auto& e = history.entries();
  const Tensor& first = e.front().S;
  const std::size_t n = first.rows(), d = first.cols(), m = e.size();
  Tensor out({n, d * m});
  for (std::size_t s = 0; s < m; ++s) {
    const Tensor& S = e[s].S;
    for (std::size_t i = 0; i < n; ++i) {
      double nrm = 0.0;
      for (std::size_t c = 0; c < d; ++c) nrm += S[i * d + c] * S[i * d + c];
      nrm = std::sqrt(nrm);
      const double inv = nrm >= ops::kNormFloor ? 1.0 / nrm : 0.0;
      double* o = &out.data()[i * d * m + s * d];
      for (std::size_t c = 0; c < d; ++c) o[c] = S[i * d + c] * inv;
    }
  }
  return out;
}

KMeansResult spherical_kmeans(const Tensor& points, int k, std::uint64_t seed,
                              const ClusterConfig& cfg) {
  require_finite(points, "spherical_kmeans");
  return kmeans_matrix(to_matrix(points), k, seed, cfg);
}

int select_background(std::span<const int> labels, std::size_t H, std::size_t W, int num_clusters) {
  if (labels.size() != H * W) throw InputError("select_background: label map size mismatch");
  std::vector<std::size_t> border(num_clusters, 0);
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      if (y != 0 && x != 0 && y + 1 != H && x + 1 != W) continue;
      const int l = labels[y * W + x];
      if (l < 0 || l >= num_clusters) throw InputError("select_background: label out of range");
      ++border[l];
    }
  }
  int best = 0;
  for (int j = 1; j < num_clusters; ++j)
    if (border[j] > border[best]) best = j;
  return best;
}

double cluster_variance(const Tensor& points, std::span<const std::size_t> members) {
  if (members.empty()) return 0.0;
  const std::size_t D = points.cols();
  std::vector<double> mean(D, 0.0);
  std::vector<double> unit(D);
  auto load_unit = [&](std::size_t i) {
    double n = 0.0;
    for (std::size_t c = 0; c < D; ++c) n += points.at(i, c) * points.at(i, c);
    n = std::sqrt(n);
    const double inv = n >= ops::kNormFloor ? 1.0 / n : 0.0;
    for (std::size_t c = 0; c < D; ++c) unit[c] = points.at(i, c) * inv;
  };
  for (std::size_t i : members) {
    load_unit(i);
    for (std::size_t c = 0; c < D; ++c) mean[c] += unit[c];
  }
  double mn = 0.0;
  for (double v : mean) mn += v * v;
  mn = std::sqrt(mn);
  const double inv = mn >= ops::kNormFloor ? 1.0 / mn : 0.0;
  double s = 0.0;
  for (std::size_t i : members) {
    load_unit(i);
    double cos = 0.0;
    for (std::size_t c = 0; c < D; ++c) cos += unit[c] * mean[c] * inv;
    s += (1.0 - cos) * (1.0 - cos);
  }
  return s / static_cast<double>(members.size());
}

RefineResult refine_cluster(const Tensor& points, std::vector<std::size_t> members,
                            std::uint64_t seed, const ClusterConfig& cfg) {
  RefineResult r;
  std::sort(members.begin(), members.end());
  ClusterConfig split_cfg = cfg;
  while (members.size() > 1 && cluster_variance(points, members) >= cfg.variance_threshold) {
    RowMat sub(static_cast<Eigen::Index>(members.size()), static_cast<Eigen::Index>(points.cols()));
    for (std::size_t i = 0; i < members.size(); ++i)
      for (std::size_t c = 0; c < points.cols(); ++c) sub(i, c) = points.at(members[i], c);
    const KMeansResult km = kmeans_matrix(std::move(sub), 2, mix64(seed ^ (kSplitSalt + r.splits)), split_cfg);
    std::vector<std::size_t> part[2];
    for (std::size_t i = 0; i < members.size(); ++i) part[km.assignments[i]].push_back(members[i]);
    if (part[0].empty() || part[1].empty()) break;
    // Larger part stays; on a tie, the part holding the smallest pixel.
    int keep;
    if (part[0].size() != part[1].size()) keep = part[0].size() > part[1].size() ? 0 : 1;
    else keep = part[0].front() < part[1].front() ? 0 : 1;
    r.dropped.insert(r.dropped.end(), part[1 - keep].begin(), part[1 - keep].end());
    members = std::move(part[keep]);
    ++r.splits;
  }
  r.kept = std::move(members);
  std::sort(r.dropped.begin(), r.dropped.end());
  return r;
}

std::vector<std::vector<double>> pad_square(const std::vector<std::vector<double>>& score) {
  std::size_t rows = score.size(), cols = 0;
  for (const auto& row : score) cols = std::max(cols, row.size());
  const std::size_t n = std::max(rows, cols);
  std::vector<std::vector<double>> out(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < score[i].size(); ++j) out[i][j] = score[i][j];
  return out;
}

namespace {

/// Minimum-cost assignment value of the rows/cols not yet fixed
/// (shortest augmenting path with potentials).
double min_cost(const std::vector<std::vector<double>>& c, const std::vector<int>& rows,
                const std::vector<int>& cols, std::vector<int>* row_to_col = nullptr) {
  const int n = static_cast<int>(rows.size());
  if (n == 0) return 0.0;
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = c[rows[i0 - 1]][cols[j - 1]] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> assign(n);
  for (int j = 1; j <= n; ++j) assign[p[j] - 1] = j - 1;
  double total = 0.0;
  for (int i = 0; i < n; ++i) total += c[rows[i]][cols[assign[i]]];
  if (row_to_col) *row_to_col = assign;
  return total;
}

}  // namespace

Assignment hungarian(const std::vector<std::vector<double>>& score, bool maximize) {
  const std::size_t n = score.size();
  for (const auto& row : score) {
    if (row.size() != n) throw InputError("hungarian: matrix must be square");
    for (double v : row)
      if (!std::isfinite(v)) throw InputError("hungarian: matrix holds NaN or infinite entries");
  }
  Assignment a;
  if (n == 0) return a;
  std::vector<std::vector<double>> cost = score;
  if (maximize)
    for (auto& row : cost)
      for (double& v : row) v = -v;

  std::vector<int> rows(n), cols(n);
  std::iota(rows.begin(), rows.end(), 0);
  std::iota(cols.begin(), cols.end(), 0);
  const double optimum = min_cost(cost, rows, cols);
  double scale = 0.0;
  for (const auto& row : cost)
    for (double v : row) scale = std::max(scale, std::abs(v));
  const double tol = 1e-9 * (1.0 + scale * static_cast<double>(n));

  // Fix rows in order to the smallest column that still admits an optimum.
  a.permutation.assign(n, -1);
  double fixed = 0.0;
  std::vector<int> free_rows = rows, free_cols = cols;
  for (std::size_t i = 0; i < n; ++i) {
    free_rows.erase(free_rows.begin());
    for (std::size_t ci = 0; ci < free_cols.size(); ++ci) {
      const int c = free_cols[ci];
      std::vector<int> rest = free_cols;
      rest.erase(rest.begin() + static_cast<long>(ci));
      const double value = fixed + cost[i][c] + min_cost(cost, free_rows, rest);
      if (value <= optimum + tol || ci + 1 == free_cols.size()) {
        a.permutation[i] = c;
        fixed += cost[i][c];
        free_cols = std::move(rest);
        break;
      }
    }
  }
  for (std::size_t i = 0; i < n; ++i) a.total += score[i][a.permutation[i]];
  return a;
}

double mask_iou(std::span<const int> a, int la, std::span<const int> b, int lb) {
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool in_a = a[i] == la, in_b = b[i] == lb;
    inter += in_a && in_b;
    uni += in_a || in_b;
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

TaggingResult assign_initial_labels(const HardLayout& raw, const CrossAttnMaps& attn,
                                    const PromptSpec& prompt) {
  const int k = prompt.k();
  const int K = raw.k;
  if (static_cast<int>(attn.count()) != k) throw InputError("assign_initial_labels: need one map per instance");
  const Tensor& A = attn.maps;
  const std::size_t n = raw.size();
  if (A.cols() != n) throw InputError("assign_initial_labels: attention size mismatch");
  bool any = false;
  for (double v : A.data()) any = any || v != 0.0;
  if (!any) throw InputError("assign_initial_labels: zero attention everywhere");

  std::vector<std::vector<double>> score(k, std::vector<double>(K, 0.0));
  std::vector<std::size_t> area(K + 1, 0);
  for (std::size_t x = 0; x < n; ++x) {
    const int l = raw.labels[x];
    ++area[l];
    if (l == 0) continue;
    for (int j = 0; j < k; ++j) score[j][l - 1] += A[j * n + x];
  }
  const Assignment asg = hungarian(pad_square(score), true);

  TaggingResult r;
  HardLayout& m = r.layout;
  m.height = raw.height;
  m.width = raw.width;
  m.k = k;
  m.instance_tags.assign(k + 1, -1);
  std::vector<int> cluster_to_label(K + 1, 0);
  for (int j = 0; j < k; ++j) {
    const int c = asg.permutation[j];
    m.instance_tags[j + 1] = j;
    if (c < K) cluster_to_label[c + 1] = j + 1;
    if (c >= K || area[c + 1] == 0) r.unassigned.push_back(j);
  }
  m.labels.resize(n);
  for (std::size_t x = 0; x < n; ++x) m.labels[x] = cluster_to_label[raw.labels[x]];
  return r;
}

HardLayout relabel_temporal(const HardLayout& raw, const HardLayout& previous) {
  if (raw.size() != previous.size()) throw InputError("relabel_temporal: grid mismatch");
  const int k = std::max(raw.k, previous.k);
  std::vector<std::vector<double>> score(k, std::vector<double>(k, 0.0));
  // Intersections and areas in one pass.
  std::vector<std::vector<std::size_t>> inter(k + 1, std::vector<std::size_t>(k + 1, 0));
  std::vector<std::size_t> area_new(k + 1, 0), area_old(k + 1, 0);
  for (std::size_t x = 0; x < raw.size(); ++x) {
    ++inter[raw.labels[x]][previous.labels[x]];
    ++area_new[raw.labels[x]];
    ++area_old[previous.labels[x]];
  }
  for (int c = 1; c <= k; ++c) {
    for (int p = 1; p <= k; ++p) {
      const std::size_t uni = area_new[c] + area_old[p] - inter[c][p];
      score[c - 1][p - 1] = uni == 0 ? 0.0 : static_cast<double>(inter[c][p]) / static_cast<double>(uni);
    }
  }
  const Assignment asg = hungarian(score, true);
  HardLayout m;
  m.height = raw.height;
  m.width = raw.width;
  m.k = k;
  m.instance_tags = previous.instance_tags;
  m.instance_tags.resize(k + 1, -1);
  std::vector<int> map(k + 1, 0);
  for (int c = 1; c <= k; ++c) map[c] = asg.permutation[c - 1] + 1;
  m.labels.resize(raw.size());
  for (std::size_t x = 0; x < raw.size(); ++x) m.labels[x] = map[raw.labels[x]];
  return m;
}

HardenResult harden(const LayoutHistory& history, const CrossAttnMaps& attn,
                    const PromptSpec& prompt, int t, int steps, std::uint64_t seed,
                    const ClusterConfig& cfg) {
  if (history.empty() || history.newest_t() != t) {
    throw InputError("harden: history does not end at t = " + std::to_string(t));
  }
  const int k = prompt.k();
  const Tensor& S = history.entries().front().S;
  const std::size_t H = S.dim(0), W = S.dim(1);
  const Tensor X = stack_window(history);
  const std::uint64_t step_seed = mix64(seed ^ (kHardenSalt + static_cast<std::uint64_t>(t)));
  const KMeansResult km = spherical_kmeans(X, k + 1, step_seed, cfg);
  const int bg = select_background(km.assignments, H, W, k + 1);

  HardLayout raw;
  raw.height = H;
  raw.width = W;
  raw.k = k;
  raw.instance_tags.assign(k + 1, -1);
  std::vector<int> to_label(k + 1, 0);
  for (int c = 0, next = 1; c <= k; ++c)
    if (c != bg) to_label[c] = next++;
  raw.labels.resize(H * W);
  std::vector<std::vector<std::size_t>> members(k + 1);
  for (std::size_t i = 0; i < H * W; ++i) {
    raw.labels[i] = to_label[km.assignments[i]];
    members[raw.labels[i]].push_back(i);
  }

  HardenResult r;
  r.kmeans_objective = km.objective;
  for (int l = 1; l <= k; ++l) {
    if (members[l].empty()) continue;
    const RefineResult ref = refine_cluster(X, members[l], mix64(step_seed + l), cfg);
    for (std::size_t i : ref.dropped) raw.labels[i] = 0;
    r.dropped.insert(r.dropped.end(), ref.dropped.begin(), ref.dropped.end());
  }
  std::sort(r.dropped.begin(), r.dropped.end());

  if (t == steps || !history.previous()) {
    TaggingResult tag = assign_initial_labels(raw, attn, prompt);
    r.layout = std::move(tag.layout);
    r.unassigned = std::move(tag.unassigned);
  } else {
    r.layout = relabel_temporal(raw, *history.previous());
    const auto counts = r.layout.label_counts();
    for (int j = 0; j < k; ++j) {
      const int l = r.layout.label_of_instance(j);
      if (l < 0 || counts[l] == 0) r.unassigned.push_back(j);
    }
  }
  return r;
}

}  // namespace decisive
