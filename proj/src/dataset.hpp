#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "env.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace lbsac {

struct DatasetMeta {
  std::string env_id;
  std::string behavior;
  int obs_dim = 0;
  int act_dim = 0;
  std::int64_t rows = 0;
  std::uint64_t seed = 0;
  std::string rng_algorithm = "splitmix64-counter-v1";
};

// Columnar transition store.
struct OfflineDataset {
  DatasetMeta meta;
  Tensor observations;       // rows x obs_dim
  Tensor actions;            // rows x act_dim
  Tensor rewards;            // rows x 1
  Tensor next_observations;  // rows x obs_dim
  std::vector<std::uint8_t> dones;  // rows, {0, 1}

  std::int64_t rows() const { return meta.rows; }
  void validate() const;  // shape/range invariants
};

// Behavior tiers: "random" (uniform actions), "expert" (proportional
// controller), "medium" (expert plus N(0, 0.3^2) action noise, clipped),
// "medium-replay" (alternating random and medium episodes). Episodes are
// generated in rollout order and truncated to `size` transitions. The toy
// horizons are time-limit truncations, so every stored done flag is 0 and
// training bootstraps through episode ends.
OfflineDataset generate_dataset(const ToyEnv& env, const std::string& behavior,
                                std::int64_t size, std::uint64_t seed);

// LBD1 file format, little-endian:
//   bytes 0-3   magic "LBD1"
//   bytes 4-7   u32 version (1)
//   u32 metadata length, then UTF-8 JSON metadata
//   float32 blobs: observations, actions, rewards, next_observations
//   uint8 blob: dones
void save_dataset(const OfflineDataset& data, const std::string& path);
OfflineDataset load_dataset(const std::string& path);

// Mean return per completed episode, for dataset-quality checks.
std::vector<double> episode_returns(const OfflineDataset& data, int horizon);

// Uniform-with-replacement minibatch.
struct Batch {
  Tensor observations, actions, rewards, next_observations;
  Tensor dones;  // batch x 1, float 0/1
};
Batch sample_batch(const OfflineDataset& data, int batch_size, RngStream& rng);
Batch gather_batch(const OfflineDataset& data, const std::vector<std::int64_t>& idx);

}  // namespace lbsac
