#pragma once

#include <array>
#include <string>

#include "rng.hpp"
#include "tensor.hpp"

namespace lbsac {

// Deterministic point-mass tasks standing in for the usual locomotion
// suites. Per axis: v' = 0.9 v + 0.1 clip(a), p' = clip(p + 0.05 v', -1, 1),
// reward -p^2 - 0.01 a^2 on the pre-step position. Episodes run a fixed
// 200-step horizon; the end of an episode is a time-limit truncation, not a
// terminal state.
struct ToyEnv {
  std::string id;
  int axes = 1;  // obs = (p, v) per axis, action is 1 value per axis
  int obs_dim = 2;
  int act_dim = 1;
  int horizon = 200;
};

ToyEnv make_env(const std::string& id);  // "pointmass-1d" | "pointmass-2d"

struct EnvState {
  std::array<float, 4> pv{};  // p0, v0, p1, v1
  int t = 0;
};

struct StepResult {
  EnvState next;
  float reward = 0.0f;
  bool done = false;  // horizon reached
};

// Initial state: p = -0.8 + 1.6 u per axis, v = 0. u values in [0, 1).
EnvState env_reset(const ToyEnv& env, double u0, double u1 = 0.5);
StepResult env_step(const ToyEnv& env, const EnvState& state, const float* action);

void state_to_obs(const ToyEnv& env, const EnvState& s, float* obs);

// The expert anchor: a = clip(-2 p - v) per axis.
void expert_action(const ToyEnv& env, const EnvState& s, float* action);

// Stratified initial-state grid for episode i of n. Axis 0 walks the strata
// in order; axis 1 walks them with a coprime stride so the pairs cover the
// square. jitter draws come from rng (pass nullptr for midpoints).
void episode_init_u(int episode, int n_episodes, RngStream* jitter, double* u0,
                    double* u1);

struct ScoreReference {
  double random_return = 0.0;
  double expert_return = 0.0;
  int episodes = 0;
  std::uint64_t seed = 0;
};

// Mean undiscounted return over `episodes` seeded rollouts of the random and
// expert policies. This is the oracle that anchors normalized scores.
ScoreReference compute_score_reference(const ToyEnv& env, int episodes,
                                       std::uint64_t seed);

double normalized_score(double raw_return, const ScoreReference& ref);

// Registry of frozen references, one entry per env id (JSON file).
ScoreReference load_score_reference(const std::string& registry_path,
                                    const std::string& env_id);
void save_score_registry(const std::string& registry_path,
                         const std::vector<std::pair<std::string, ScoreReference>>& refs);

// Path resolution for the committed registry: $LBSAC_DATA_DIR or ./data.
std::string default_registry_path();

}  // namespace lbsac
