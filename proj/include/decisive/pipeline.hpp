#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "decisive/guidance.hpp"
#include "decisive/layout_cluster.hpp"
#include "decisive/metrics.hpp"
#include "decisive/sim_world.hpp"
#include "decisive/soft_layout.hpp"

namespace decisive {

enum class Variant { kFull, kNoDecisive, kNoCross, kNoVar, kNoDice, kSameTimestep };

const std::vector<Variant>& all_variants();
std::string variant_name(Variant v);
/// Throws InputError on an unknown name.
Variant parse_variant(std::string_view name);
/// Loss weights of a variant: the named term zeroed, others unchanged.
GuidanceConfig variant_guidance(Variant v, const GuidanceConfig& base);

struct PipelineConfig {
  SimConfig sim;
  ClusterConfig cluster;
  GuidanceConfig guidance;
  MetricsConfig metrics;
};

struct RunConfig {
  PromptSpec prompt;
  std::uint64_t seed = 0;
  Variant variant = Variant::kFull;
  /// Keep every latent in the trace.
  bool full_trace = false;
};

struct StepRecord {
  int t = 0;  // timestep of the hard layout M^t
  std::uint64_t latent_checksum = 0;
  SoftLayout soft;
  HardLayout hard;
  bool guided = false;
  bool guidance_aborted = false;
  std::vector<LossValues> losses;
  /// Mean Shannon entropy (nats) of the instance attention maps.
  double attention_entropy = 0.0;
  std::vector<int> unassigned;
  std::optional<Tensor> latent;
};

struct GenerationTrace {
  RunConfig run;
  SceneSpec scene;
  GroundTruthMasks ground_truth;
  std::vector<StepRecord> steps;  // t = T..1
  Tensor final_latent;
  bool failed = false;
  std::string error;
  std::vector<std::string> warnings;

  const HardLayout& final_layout() const { return steps.back().hard; }
  std::vector<HardLayout> hard_layouts() const;
  /// FNV over the hard-layout labels and latent checksums of every step.
  std::uint64_t checksum() const;
};

std::uint64_t latent_checksum(const Tensor& z);

/// Runs the denoise / predict / harden / guide loop. Scene infeasibility
/// throws SceneInfeasibleError; later component errors mark the trace failed.
GenerationTrace generate(const RunConfig& run, const HeadParams& params,
                         const PipelineConfig& cfg = {});

struct RunMetrics {
  double temporal_consistency = 0.0;
  double final_iou = 0.0;
  double count_f1 = 0.0;
  int neglected = 0;
};
RunMetrics evaluate_trace(const GenerationTrace& trace, const PipelineConfig& cfg = {});

struct AblationRow {
  Variant variant = Variant::kFull;
  std::string prompt;
  std::uint64_t seed = 0;
  bool failed = false;
  std::string error;
  RunMetrics metrics;
};

struct VariantSummary {
  Variant variant = Variant::kFull;
  std::size_t runs = 0;
  std::size_t failures = 0;
  Summary temporal_consistency;
  Summary final_iou;
  Summary count_f1;
};

struct AblationReport {
  std::vector<AblationRow> rows;
  std::vector<VariantSummary> summary;
};

/// One generate per (variant, prompt, seed) in that nesting order, spread
/// over `jobs` threads; results do not depend on `jobs`.
AblationReport ablate(const std::vector<Variant>& variants, const std::vector<PromptSpec>& prompts,
                      const std::vector<std::uint64_t>& seeds, const HeadParams& params,
                      const PipelineConfig& cfg = {}, int jobs = 1);
std::vector<VariantSummary> summarize_rows(const std::vector<AblationRow>& rows,
                                           const std::vector<Variant>& variants);

/// Runs fn(i) for i in [0, n) on up to `jobs` threads. Exceptions are
/// rethrown for the lowest failing index.
void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn);

}  // namespace decisive
