#include "env.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

namespace lbsac {

ToyEnv make_env(const std::string& id) {
  if (id == "pointmass-1d") return ToyEnv{id, 1, 2, 1, 200};
  if (id == "pointmass-2d") return ToyEnv{id, 2, 4, 2, 200};
  throw std::invalid_argument("unknown env id: " + id);
}

EnvState env_reset(const ToyEnv& env, double u0, double u1) {
  EnvState s;
  s.pv[0] = static_cast<float>(-0.8 + 1.6 * u0);
  s.pv[1] = 0.0f;
  if (env.axes == 2) {
    s.pv[2] = static_cast<float>(-0.8 + 1.6 * u1);
    s.pv[3] = 0.0f;
  }
  s.t = 0;
  return s;
}

StepResult env_step(const ToyEnv& env, const EnvState& state, const float* action) {
  StepResult out;
  out.next = state;
  double reward = 0.0;
  for (int axis = 0; axis < env.axes; axis++) {
    const double p = state.pv[axis * 2];
    const double v = state.pv[axis * 2 + 1];
    const double a = std::min(std::max(static_cast<double>(action[axis]), -1.0), 1.0);
    const double v2 = 0.9 * v + 0.1 * a;
    const double p2 = std::min(std::max(p + 0.05 * v2, -1.0), 1.0);
    out.next.pv[axis * 2] = static_cast<float>(p2);
    out.next.pv[axis * 2 + 1] = static_cast<float>(v2);
    reward += -p * p - 0.01 * a * a;
  }
  out.reward = static_cast<float>(reward);
  out.next.t = state.t + 1;
  out.done = out.next.t >= env.horizon;
  return out;
}

void state_to_obs(const ToyEnv& env, const EnvState& s, float* obs) {
  for (int i = 0; i < env.obs_dim; i++) obs[i] = s.pv[i];
}

void expert_action(const ToyEnv& env, const EnvState& s, float* action) {
  for (int axis = 0; axis < env.axes; axis++) {
    const float p = s.pv[axis * 2];
    const float v = s.pv[axis * 2 + 1];
    action[axis] = std::min(std::max(-2.0f * p - v, -1.0f), 1.0f);
  }
}

void episode_init_u(int episode, int n_episodes, RngStream* jitter, double* u0,
                    double* u1) {
  // coprime stride near the golden ratio decorrelates the two axes' strata
  int stride = std::max(1, static_cast<int>(0.618 * n_episodes));
  while (n_episodes > 1 && std::gcd(stride, n_episodes) != 1) stride++;
  const int q = n_episodes > 0 ? (episode * (stride % n_episodes)) % n_episodes : 0;
  const double j0 = jitter ? jitter->next_unit() : 0.5;
  const double j1 = jitter ? jitter->next_unit() : 0.5;
  *u0 = (episode + j0) / n_episodes;
  *u1 = (q + j1) / n_episodes;
}

namespace {

template <typename ActFn>
double mean_return(const ToyEnv& env, int episodes, ActFn act) {
  double total = 0.0;
  for (int ep = 0; ep < episodes; ep++) {
    double u0, u1;
    episode_init_u(ep, episodes, nullptr, &u0, &u1);
    EnvState s = env_reset(env, u0, u1);
    double ret = 0.0;
    for (int t = 0; t < env.horizon; t++) {
      float a[2] = {0.0f, 0.0f};
      act(s, a);
      StepResult r = env_step(env, s, a);
      ret += r.reward;
      s = r.next;
    }
    total += ret;
  }
  return total / episodes;
}

}  // namespace

ScoreReference compute_score_reference(const ToyEnv& env, int episodes,
                                       std::uint64_t seed) {
  ScoreReference ref;
  ref.episodes = episodes;
  ref.seed = seed;
  RngStream random_actions(seed, 1000);
  ref.random_return = mean_return(env, episodes, [&](const EnvState&, float* a) {
    for (int i = 0; i < env.act_dim; i++) {
      a[i] = static_cast<float>(random_actions.next_uniform(-1.0, 1.0));
    }
  });
  ref.expert_return = mean_return(
      env, episodes, [&](const EnvState& s, float* a) { expert_action(env, s, a); });
  return ref;
}

double normalized_score(double raw_return, const ScoreReference& ref) {
  if (ref.expert_return == ref.random_return) {
    throw std::invalid_argument("normalized_score: reference anchors coincide");
  }
  return 100.0 * (raw_return - ref.random_return) /
         (ref.expert_return - ref.random_return);
}

ScoreReference load_score_reference(const std::string& registry_path,
                                    const std::string& env_id) {
  std::ifstream in(registry_path);
  if (!in) throw std::runtime_error("cannot open score registry: " + registry_path);
  nlohmann::json j;
  in >> j;
  if (!j.contains(env_id)) {
    throw std::runtime_error("score registry has no entry for env: " + env_id);
  }
  const auto& e = j.at(env_id);
  ScoreReference ref;
  ref.random_return = e.at("random_return").get<double>();
  ref.expert_return = e.at("expert_return").get<double>();
  ref.episodes = e.at("episodes").get<int>();
  ref.seed = e.at("seed").get<std::uint64_t>();
  if (!(ref.expert_return > ref.random_return)) {
    throw std::runtime_error("score registry entry invalid for env: " + env_id);
  }
  return ref;
}

void save_score_registry(
    const std::string& registry_path,
    const std::vector<std::pair<std::string, ScoreReference>>& refs) {
  nlohmann::json j;
  for (const auto& [id, ref] : refs) {
    j[id] = {{"random_return", ref.random_return},
             {"expert_return", ref.expert_return},
             {"episodes", ref.episodes},
             {"seed", ref.seed}};
  }
  std::ofstream out(registry_path);
  if (!out) throw std::runtime_error("cannot write score registry: " + registry_path);
  out << j.dump(2) << "\n";
}

std::string default_registry_path() {
  if (const char* dir = std::getenv("LBSAC_DATA_DIR")) {
    return std::string(dir) + "/score_references.json";
  }
  return "data/score_references.json";
}

}  // namespace lbsac
