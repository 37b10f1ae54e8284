#include "decisive/pipeline.hpp"

#include <atomic>
#include <cmath>
#include <cstring>
#include <exception>
#include <thread>

#include "decisive/codec.hpp"
#include "decisive/errors.hpp"

namespace decisive {
namespace {

double mean_entropy(const CrossAttnMaps& attn) {
  const Tensor& A = attn.maps;
  if (A.empty()) return 0.0;
  const std::size_t k = A.rows(), n = A.cols();
  double s = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    for (std::size_t x = 0; x < n; ++x) {
      const double p = A[j * n + x];
      if (p > 0.0) s -= p * std::log(p);
    }
  }
  return s / static_cast<double>(k);
}

}  // namespace

const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> v = {Variant::kFull,  Variant::kNoDecisive, Variant::kNoCross,
                                         Variant::kNoVar, Variant::kNoDice,     Variant::kSameTimestep};
  return v;
}

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::kFull: return "full";
    case Variant::kNoDecisive: return "no_decisive";
    case Variant::kNoCross: return "no_cross";
    case Variant::kNoVar: return "no_var";
    case Variant::kNoDice: return "no_dice";
    case Variant::kSameTimestep: return "same_timestep";
  }
  return "full";
}

Variant parse_variant(std::string_view name) {
  for (Variant v : all_variants())
    if (variant_name(v) == name) return v;
  throw InputError("unknown variant '" + std::string(name) +
                   "' (expected full, no_decisive, no_cross, no_var, no_dice, same_timestep)");
}

GuidanceConfig variant_guidance(Variant v, const GuidanceConfig& base) {
  GuidanceConfig g = base;
  switch (v) {
    case Variant::kNoCross: g.alpha_cross = 0.0; break;
    case Variant::kNoVar: g.alpha_var = 0.0; break;
    case Variant::kNoDice: g.alpha_dice = 0.0; break;
    case Variant::kNoDecisive: g.guided_steps = 0; break;
    default: break;
  }
  return g;
}

std::uint64_t latent_checksum(const Tensor& z) { return fnv1a64(z.data()); }

std::vector<HardLayout> GenerationTrace::hard_layouts() const {
  std::vector<HardLayout> out;
  for (const auto& s : steps) out.push_back(s.hard);
  return out;
}

std::uint64_t GenerationTrace::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& s : steps) {
    std::vector<std::uint8_t> bytes(s.hard.labels.size() * sizeof(int) + 8);
    std::memcpy(bytes.data(), s.hard.labels.data(), s.hard.labels.size() * sizeof(int));
    std::memcpy(bytes.data() + s.hard.labels.size() * sizeof(int), &s.latent_checksum, 8);
    h = fnv1a64(bytes, h);
  }
  return h;
}

GenerationTrace generate(const RunConfig& run, const HeadParams& params, const PipelineConfig& cfg) {
  const SimConfig& sim = cfg.sim;
  const GuidanceConfig guide = variant_guidance(run.variant, cfg.guidance);
  const bool guidance_on = run.variant != Variant::kNoDecisive;
  run.prompt.validate(sim);

  GenerationTrace trace;
  trace.run = run;
  Latent z = init_latent(run.seed, sim);
  trace.scene = derive_scene(z, run.prompt, run.seed, sim);
  trace.ground_truth = ground_truth_masks(trace.scene, sim);

  LayoutHistory history(cfg.cluster.window);
  const HardLayout* mask = nullptr;
  try {
    for (int t = sim.steps; t >= 1; --t) {
      StepRecord rec;
      rec.t = t;
      // Soft layout and attention from the features of z_t.
      const FeatureStack feats = extract_features(z);
      SoftLayout soft = predict(feats, params);
      soft.t = t;
      const CrossAttnMaps attn = cross_attention(z, trace.scene, mask, sim);
      rec.attention_entropy = mean_entropy(attn);

      z = denoise_step(z, trace.scene, mask, run.seed, sim);

      history.push(soft);
      HardenResult hr = harden(history, attn, run.prompt, t, sim.steps, run.seed, cfg.cluster);
      rec.unassigned = hr.unassigned;
      history.set_previous(hr.layout);

      const bool in_window = sim.steps - t < guide.guided_steps;
      if (guidance_on && in_window && t > 1) {
        HardLayout target = hr.layout;
        if (run.variant == Variant::kSameTimestep) {
          // Extra pass on z_{t-1} to harden M^{t-1} and guide toward it.
          LayoutHistory probe = history;
          SoftLayout next = predict(extract_features(z), params);
          next.t = t - 1;
          probe.push(next);
          const CrossAttnMaps next_attn = cross_attention(z, trace.scene, &history.previous().value(), sim);
          target = harden(probe, next_attn, run.prompt, t - 1, sim.steps, run.seed, cfg.cluster).layout;
        }
        GuidanceResult gr = guidance_step(z, target, trace.scene, params, guide, sim);
        z = std::move(gr.latent);
        rec.guided = true;
        rec.guidance_aborted = gr.aborted;
        rec.losses = std::move(gr.trajectory);
        if (gr.aborted) {
          trace.warnings.push_back("guidance stopped early at t = " + std::to_string(t) +
                                   ": non-finite gradient");
        }
      }
      rec.latent_checksum = latent_checksum(z.z);
      if (run.full_trace) rec.latent = z.z;
      rec.soft = std::move(soft);
      rec.hard = hr.layout;
      if (!rec.unassigned.empty()) {
        trace.warnings.push_back("t = " + std::to_string(t) + ": " +
                                 std::to_string(rec.unassigned.size()) + " instance(s) without a cluster");
      }
      trace.steps.push_back(std::move(rec));
      mask = &history.previous().value();
    }
  } catch (const SceneInfeasibleError&) {
    throw;
  } catch (const std::exception& e) {
    trace.failed = true;
    trace.error = e.what();
  }
  trace.final_latent = z.z;
  return trace;
}

RunMetrics evaluate_trace(const GenerationTrace& trace, const PipelineConfig& cfg) {
  RunMetrics m;
  if (trace.steps.size() < 2) throw InputError("evaluate: trace has fewer than two steps");
  m.temporal_consistency = temporal_consistency(trace.hard_layouts(), cfg.sim.steps);
  m.final_iou = layout_iou(trace.final_layout(), trace.ground_truth);
  m.count_f1 = count_f1(trace.final_layout(), trace.run.prompt, cfg.metrics).f1;
  m.neglected = static_cast<int>(trace.steps.back().unassigned.size());
  return m;
}

void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, jobs)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

std::vector<VariantSummary> summarize_rows(const std::vector<AblationRow>& rows,
                                           const std::vector<Variant>& variants) {
  std::vector<VariantSummary> out;
  for (Variant v : variants) {
    VariantSummary s;
    s.variant = v;
    std::vector<double> tc, iou, f1;
    for (const auto& r : rows) {
      if (r.variant != v) continue;
      ++s.runs;
      if (r.failed) {
        ++s.failures;
        continue;
      }
      tc.push_back(r.metrics.temporal_consistency);
      iou.push_back(r.metrics.final_iou);
      f1.push_back(r.metrics.count_f1);
    }
    s.temporal_consistency = summarize(tc);
    s.final_iou = summarize(iou);
    s.count_f1 = summarize(f1);
    out.push_back(s);
  }
  return out;
}

AblationReport ablate(const std::vector<Variant>& variants, const std::vector<PromptSpec>& prompts,
                      const std::vector<std::uint64_t>& seeds, const HeadParams& params,
                      const PipelineConfig& cfg, int jobs) {
  AblationReport report;
  for (Variant v : variants) {
    for (const auto& p : prompts) {
      for (std::uint64_t s : seeds) {
        AblationRow row;
        row.variant = v;
        row.prompt = p.to_string();
        row.seed = s;
        report.rows.push_back(row);
      }
    }
  }
  const std::size_t per_variant = prompts.size() * seeds.size();
  parallel_for(report.rows.size(), jobs, [&](std::size_t i) {
    AblationRow& row = report.rows[i];
    RunConfig run;
    run.prompt = prompts[(i % per_variant) / seeds.size()];
    run.seed = row.seed;
    run.variant = row.variant;
    try {
      const GenerationTrace trace = generate(run, params, cfg);
      if (trace.failed) {
        row.failed = true;
        row.error = trace.error;
      } else {
        row.metrics = evaluate_trace(trace, cfg);
      }
    } catch (const std::exception& e) {
      row.failed = true;
      row.error = e.what();
    }
  });
  report.summary = summarize_rows(report.rows, variants);
  return report;
}

}  // namespace decisive
