#include "decisive/guidance.hpp"

#include <cmath>

#include "decisive/errors.hpp"

namespace decisive {
namespace {

std::vector<std::size_t> counts_of(const HardLayout& m) {
  if (!m.is_valid()) throw InputError("guidance: hard layout is not a valid partition");
  return m.label_counts();
}

}  // namespace

ClusterMeans cluster_means(const Tensor& soft, const HardLayout& m) {
  const std::size_t n = soft.rows(), d = soft.cols();
  if (n != m.size()) throw InputError("cluster_means: layout size mismatch");
  const auto counts = counts_of(m);
  ClusterMeans out;
  out.means = Tensor({static_cast<std::size_t>(m.k) + 1, d});
  out.present.assign(m.k + 1, false);
  for (std::size_t x = 0; x < n; ++x) {
    const int l = m.labels[x];
    for (std::size_t c = 0; c < d; ++c) out.means[l * d + c] += soft[x * d + c];
  }
  for (int j = 0; j <= m.k; ++j) {
    if (counts[j] == 0) continue;
    out.present[j] = true;
    for (std::size_t c = 0; c < d; ++c) out.means[j * d + c] /= static_cast<double>(counts[j]);
  }
  return out;
}

Var cluster_means_graph(Var soft_rows, const HardLayout& m) {
  Graph& g = *soft_rows.graph;
  const std::size_t n = soft_rows.value().rows();
  if (n != m.size()) throw InputError("cluster_means: layout size mismatch");
  const auto counts = counts_of(m);
  Tensor avg({static_cast<std::size_t>(m.k) + 1, n});
  for (std::size_t x = 0; x < n; ++x) {
    const int l = m.labels[x];
    avg[l * n + x] = 1.0 / static_cast<double>(counts[l]);
  }
  return ops::matmul(g.constant(std::move(avg)), soft_rows);
}

Var variance_loss(Var soft_rows, const HardLayout& m, VarianceMode mode) {
  Graph& g = *soft_rows.graph;
  const std::size_t n = soft_rows.value().rows();
  const auto counts = counts_of(m);
  std::size_t present = 0;
  for (auto c : counts) present += c > 0;
  Var means = cluster_means_graph(soft_rows, m);
  std::vector<std::size_t> own(m.labels.begin(), m.labels.end());
  Var sim = ops::cosine_sim(soft_rows, ops::gather_rows(means, std::move(own)));
  Var term = mode == VarianceMode::kDistance ? ops::square(ops::add_scalar(ops::scale(sim, -1.0), 1.0))
                                             : ops::square(sim);
  Tensor w({n});
  for (std::size_t x = 0; x < n; ++x) {
    w[x] = 1.0 / (static_cast<double>(counts[m.labels[x]]) * static_cast<double>(present));
  }
  return ops::sum(ops::mul(term, g.constant(std::move(w))));
}

Var prob_layout(Var soft_rows, Var means, const std::vector<bool>& present, double tau) {
  const std::size_t K = means.value().rows();
  if (present.size() != K) throw InputError("prob_layout: presence flags do not match means");
  Tensor mask({K});
  bool any = false;
  for (std::size_t j = 0; j < K; ++j) {
    mask[j] = present[j] ? 1.0 : 0.0;
    any = any || present[j];
  }
  if (!any) throw NumericError("prob_layout: every cluster is empty");
  return ops::softmax(ops::cosine_sim_matrix(soft_rows, means), tau, &mask);
}

Var dice_loss(Var prob, const HardLayout& m, double eps) {
  Graph& g = *prob.graph;
  const std::size_t n = prob.value().rows(), K = prob.value().cols();
  if (n != m.size() || K != static_cast<std::size_t>(m.k) + 1) {
    throw InputError("dice_loss: P is " + shape_string(prob.value().shape()) + ", layout has " +
                     std::to_string(m.size()) + " pixels and k = " + std::to_string(m.k));
  }
  const auto counts = counts_of(m);
  Tensor onehot({n, K});
  for (std::size_t x = 0; x < n; ++x) onehot[x * K + m.labels[x]] = 1.0;
  Tensor gsq({K}), present({K});
  for (std::size_t j = 0; j < K; ++j) {
    gsq[j] = static_cast<double>(counts[j]) + eps;
    present[j] = counts[j] > 0 ? 1.0 : 0.0;
  }
  Var inter = ops::sum_first(ops::mul(prob, g.constant(std::move(onehot))));
  Var num = ops::add_scalar(ops::scale(inter, 2.0), eps);
  Var den = ops::add(ops::sum_first(ops::square(prob)), g.constant(std::move(gsq)));
  Var dice = ops::masked_mean(ops::div(num, den), present);
  return ops::add_scalar(ops::scale(dice, -1.0), 1.0);
}

Var cross_loss(Var attn, const HardLayout& m, CrossLossInfo* info) {
  Graph& g = *attn.graph;
  const std::size_t k = attn.value().rows(), n = attn.value().cols();
  if (n != m.size()) throw InputError("cross_loss: attention size mismatch");
  const auto counts = counts_of(m);
  Tensor inside({k, n});
  Tensor included({k});
  std::size_t used = 0;
  for (std::size_t j = 0; j < k; ++j) {
    const int l = m.label_of_instance(static_cast<int>(j));
    if (l <= 0 || counts[l] == 0) {
      if (info) info->excluded_instances.push_back(static_cast<int>(j));
      continue;
    }
    included[j] = 1.0;
    ++used;
    for (std::size_t x = 0; x < n; ++x)
      if (m.labels[x] == l) inside[j * n + x] = 1.0;
  }
  if (used == 0) return g.constant(Tensor::scalar(0.0));
  Var mass = ops::sum_last(ops::mul(attn, g.constant(std::move(inside))));
  return ops::add_scalar(ops::scale(ops::masked_mean(mass, included), -1.0), 1.0);
}

LossTerms decisive_loss(Var soft_rows, const HardLayout& m, Var attn, const GuidanceConfig& cfg) {
  LossTerms t;
  t.cross = cross_loss(attn, m);
  t.variance = variance_loss(soft_rows, m, cfg.variance_mode);
  Var means = cluster_means_graph(soft_rows, m);
  std::vector<bool> present(m.k + 1);
  const auto counts = m.label_counts();
  for (int j = 0; j <= m.k; ++j) present[j] = counts[j] > 0;
  t.dice = dice_loss(prob_layout(soft_rows, means, present, cfg.tau), m, cfg.dice_eps);
  t.total = ops::add(ops::add(ops::scale(t.cross, cfg.alpha_cross), ops::scale(t.variance, cfg.alpha_var)),
                     ops::scale(t.dice, cfg.alpha_dice));
  return t;
}

LossValues loss_values(const LossTerms& terms) {
  return {terms.total.value().item(), terms.cross.value().item(), terms.variance.value().item(),
          terms.dice.value().item()};
}

LossTerms guidance_objective(Graph& g, Var z, int t, int steps, const HardLayout& m,
                             const SceneSpec& scene, const HeadVars& params,
                             const GuidanceConfig& cfg, const SimConfig& sim) {
  const Tensor& zv = z.value();
  const std::size_t H = zv.dim(0), W = zv.dim(1), C = zv.dim(2);
  Var feats = feature_field(z);
  Var soft = predict_graph(g, feats, time_embedding(t, steps), params);
  Var attn = cross_attention_graph(ops::reshape(feats, {H * W, C}), scene, &m, sim);
  return decisive_loss(soft, m, attn, cfg);
}

GuidanceResult guidance_step(const Latent& latent, const HardLayout& m, const SceneSpec& scene,
                             const HeadParams& params, const GuidanceConfig& cfg,
                             const SimConfig& sim) {
  GuidanceResult r;
  r.latent = latent;
  for (int it = 0; it < cfg.iterations; ++it) {
    Graph g;
    Var z = g.leaf(r.latent.z);
    const HeadVars vars = bind_params(g, params, false);
    LossTerms terms;
    try {
      terms = guidance_objective(g, z, latent.t, latent.steps, m, scene, vars, cfg, sim);
    } catch (const NumericError&) {
      r.aborted = true;
      break;
    }
    r.trajectory.push_back(loss_values(terms));
    g.backward(terms.total);
    const Tensor& grad = g.grad(z);
    if (!grad.all_finite()) {
      r.aborted = true;
      break;
    }
    for (std::size_t i = 0; i < grad.size(); ++i) r.latent.z[i] -= cfg.step_size * grad[i];
  }
  const auto counts = m.label_counts();
  for (int j = 0; j < m.k; ++j) {
    const int l = m.label_of_instance(j);
    if (l <= 0 || counts[l] == 0) r.excluded_instances.push_back(j);
  }
  return r;
}

}  // namespace decisive
