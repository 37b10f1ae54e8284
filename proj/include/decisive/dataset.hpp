#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "decisive/rng.hpp"
#include "decisive/sim_world.hpp"

namespace decisive {

struct DatasetConfig {
  std::size_t scenes = 1500;
  std::uint64_t seed = 0;
  int min_classes = 1;
  int max_classes = 3;
  int max_quantity = 10;
  /// Probability that a class draws its quantity from 1..max_quantity; else 1.
  double quantity_prob = 0.9;
  int stored_timesteps = 8;
  /// Scenes where two instance footprints overlap above this IoU are dropped.
  double ambiguity_iou = 0.3;
};

/// One training scene. Features are kept in float32, the precision they are
/// stored at on disk, so in-memory and file-backed training see equal inputs.
struct DatasetRecord {
  std::size_t index = 0;
  std::uint64_t seed = 0;
  PromptSpec prompt;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  int steps = 0;
  std::vector<int> timesteps;
  std::vector<std::vector<float>> features;  // one [H*W*C] block per timestep
  GroundTruthMasks masks;

  FeatureStack feature_stack(std::size_t slot) const;
};

struct DatasetStats {
  std::size_t generated = 0;
  std::size_t kept = 0;
  std::size_t ambiguous = 0;
  std::size_t infeasible = 0;
};

struct Dataset {
  SimConfig sim;
  DatasetConfig config;
  std::string config_hash;
  std::vector<DatasetRecord> records;
  DatasetStats stats;
};

/// floor(i * T / count) for i = 0..count-1.
std::vector<int> stored_timesteps(int steps, int count);
PromptSpec random_prompt(CounterRng& rng, const DatasetConfig& cfg, const SimConfig& sim);
std::uint64_t record_seed(std::uint64_t dataset_seed, std::size_t index);
std::string dataset_config_hash(const DatasetConfig& cfg, const SimConfig& sim);

enum class RecordOutcome { kKept, kAmbiguous, kInfeasible };

/// Simulates scene `index`: unmasked denoising from the seeded initial latent,
/// features at the stored timesteps, ground truth from the converged scene.
RecordOutcome simulate_record(std::size_t index, const DatasetConfig& cfg, const SimConfig& sim,
                              DatasetRecord& out);

/// Generates every scene, calling `sink` in index order for each kept record.
/// Results do not depend on `jobs`.
DatasetStats generate_records(const DatasetConfig& cfg, const SimConfig& sim, int jobs,
                              const std::function<void(DatasetRecord&&)>& sink);
Dataset generate_dataset(const DatasetConfig& cfg, const SimConfig& sim = {}, int jobs = 1);

/// Streams a dataset straight to a JSON-lines file.
DatasetStats write_dataset_file(const std::string& path, const DatasetConfig& cfg,
                                const SimConfig& sim, int jobs = 1);
void write_dataset(const Dataset& dataset, const std::string& path);
Dataset read_dataset(const std::string& path);

}  // namespace decisive
