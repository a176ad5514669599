#include "dataset.hpp"

#include <cmath>
#include <stdexcept>

#include <json.hpp>

#include "bin_io.hpp"

namespace lbsac {

void OfflineDataset::validate() const {
  const auto rows = meta.rows;
  if (rows < 1) throw std::runtime_error("dataset: empty");
  const auto expect = [&](const Tensor& t, int cols, const char* name) {
    if (t.rows != rows || t.cols != cols) {
      throw std::runtime_error(std::string("dataset: ") + name + " has shape " +
                               t.shape_str() + ", expected " + std::to_string(rows) +
                               "x" + std::to_string(cols));
    }
  };
  expect(observations, meta.obs_dim, "observations");
  expect(actions, meta.act_dim, "actions");
  expect(rewards, 1, "rewards");
  expect(next_observations, meta.obs_dim, "next_observations");
  if (static_cast<std::int64_t>(dones.size()) != rows) {
    throw std::runtime_error("dataset: dones row count mismatch");
  }
  for (auto d : dones) {
    if (d > 1) throw std::runtime_error("dataset: dones must be 0 or 1");
  }
  for (float a : actions.data) {
    if (!(a >= -1.0f && a <= 1.0f)) {
      throw std::runtime_error("dataset: action outside [-1, 1]");
    }
  }
}

OfflineDataset generate_dataset(const ToyEnv& env, const std::string& behavior,
                                std::int64_t size, std::uint64_t seed) {
  if (size < 1) throw std::invalid_argument("generate_dataset: size must be >= 1");
  const bool random_b = behavior == "random";
  const bool expert_b = behavior == "expert";
  const bool medium_b = behavior == "medium";
  const bool replay_b = behavior == "medium-replay";
  if (!random_b && !expert_b && !medium_b && !replay_b) {
    throw std::invalid_argument("generate_dataset: unknown behavior: " + behavior);
  }

  OfflineDataset d;
  d.meta.env_id = env.id;
  d.meta.behavior = behavior;
  d.meta.obs_dim = env.obs_dim;
  d.meta.act_dim = env.act_dim;
  d.meta.rows = size;
  d.meta.seed = seed;
  d.observations = Tensor(static_cast<int>(size), env.obs_dim);
  d.actions = Tensor(static_cast<int>(size), env.act_dim);
  d.rewards = Tensor(static_cast<int>(size), 1);
  d.next_observations = Tensor(static_cast<int>(size), env.obs_dim);
  d.dones.assign(static_cast<size_t>(size), 0);

  RngStream init_rng(seed, 0);
  RngStream act_rng(seed, 1);
  const int n_episodes =
      static_cast<int>((size + env.horizon - 1) / env.horizon);

  std::int64_t row = 0;
  for (int ep = 0; ep < n_episodes && row < size; ep++) {
    double u0, u1;
    episode_init_u(ep, n_episodes, &init_rng, &u0, &u1);
    EnvState s = env_reset(env, u0, u1);
    // medium-replay alternates: even episodes random, odd episodes medium
    const bool ep_random = random_b || (replay_b && ep % 2 == 0);
    const bool ep_noisy = medium_b || (replay_b && ep % 2 == 1);
    for (int t = 0; t < env.horizon && row < size; t++) {
      float a[2] = {0.0f, 0.0f};
      if (ep_random) {
        for (int i = 0; i < env.act_dim; i++) {
          a[i] = static_cast<float>(act_rng.next_uniform(-1.0, 1.0));
        }
      } else {
        expert_action(env, s, a);
        if (ep_noisy) {
          for (int i = 0; i < env.act_dim; i++) {
            const double noisy = a[i] + 0.3 * act_rng.next_normal();
            a[i] = static_cast<float>(std::min(std::max(noisy, -1.0), 1.0));
          }
        }
      }
      const StepResult r = env_step(env, s, a);
      state_to_obs(env, s, &d.observations.at(static_cast<int>(row), 0));
      for (int i = 0; i < env.act_dim; i++) d.actions.at(static_cast<int>(row), i) = a[i];
      d.rewards.data[static_cast<size_t>(row)] = r.reward;
      state_to_obs(env, r.next, &d.next_observations.at(static_cast<int>(row), 0));
      d.dones[static_cast<size_t>(row)] = 0;  // time-limit truncation, bootstrap
      s = r.next;
      row++;
    }
  }
  d.validate();
  return d;
}

namespace {
constexpr char kDataMagic[4] = {'L', 'B', 'D', '1'};
constexpr std::uint32_t kDataVersion = 1;
}  // namespace

void save_dataset(const OfflineDataset& data, const std::string& path) {
  data.validate();
  BinWriter w(path);
  w.magic(kDataMagic);
  w.u32(kDataVersion);
  const nlohmann::json meta = {
      {"env", data.meta.env_id},       {"behavior", data.meta.behavior},
      {"obs_dim", data.meta.obs_dim},  {"act_dim", data.meta.act_dim},
      {"rows", data.meta.rows},        {"seed", data.meta.seed},
      {"rng_algorithm", data.meta.rng_algorithm}};
  w.str(meta.dump());
  w.f32_blob(data.observations.data);
  w.f32_blob(data.actions.data);
  w.f32_blob(data.rewards.data);
  w.f32_blob(data.next_observations.data);
  w.bytes(data.dones.data(), data.dones.size());
  w.close();
}

OfflineDataset load_dataset(const std::string& path) {
  BinReader r(path);
  r.expect_magic(kDataMagic);
  const std::uint32_t version = r.u32("version");
  if (version != kDataVersion) {
    throw IoError(path + ": unsupported LBD version " + std::to_string(version));
  }
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(r.str("metadata"));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path + ": corrupt metadata header: " + e.what());
  }
  OfflineDataset d;
  d.meta.env_id = meta.at("env").get<std::string>();
  d.meta.behavior = meta.at("behavior").get<std::string>();
  d.meta.obs_dim = meta.at("obs_dim").get<int>();
  d.meta.act_dim = meta.at("act_dim").get<int>();
  d.meta.rows = meta.at("rows").get<std::int64_t>();
  d.meta.seed = meta.at("seed").get<std::uint64_t>();
  d.meta.rng_algorithm = meta.at("rng_algorithm").get<std::string>();
  if (d.meta.rows < 1 || d.meta.obs_dim < 1 || d.meta.act_dim < 1) {
    throw IoError(path + ": metadata declares invalid dimensions");
  }
  const int rows = static_cast<int>(d.meta.rows);
  d.observations = Tensor(rows, d.meta.obs_dim);
  d.observations.data = r.f32_blob(d.observations.size(), "observations");
  d.actions = Tensor(rows, d.meta.act_dim);
  d.actions.data = r.f32_blob(d.actions.size(), "actions");
  d.rewards = Tensor(rows, 1);
  d.rewards.data = r.f32_blob(d.rewards.size(), "rewards");
  d.next_observations = Tensor(rows, d.meta.obs_dim);
  d.next_observations.data = r.f32_blob(d.next_observations.size(), "next_observations");
  d.dones.resize(static_cast<size_t>(rows));
  r.bytes(d.dones.data(), d.dones.size(), "dones");
  if (!r.at_eof()) throw IoError(path + ": trailing bytes after dones blob");
  d.validate();
  return d;
}

std::vector<double> episode_returns(const OfflineDataset& data, int horizon) {
  std::vector<double> out;
  double acc = 0.0;
  for (std::int64_t i = 0; i < data.meta.rows; i++) {
    acc += data.rewards.data[static_cast<size_t>(i)];
    if ((i + 1) % horizon == 0) {
      out.push_back(acc);
      acc = 0.0;
    }
  }
  return out;
}

Batch gather_batch(const OfflineDataset& data, const std::vector<std::int64_t>& idx) {
  const int b = static_cast<int>(idx.size());
  Batch out{Tensor(b, data.meta.obs_dim), Tensor(b, data.meta.act_dim), Tensor(b, 1),
            Tensor(b, data.meta.obs_dim), Tensor(b, 1)};
  for (int r = 0; r < b; r++) {
    const auto i = idx[static_cast<size_t>(r)];
    for (int c = 0; c < data.meta.obs_dim; c++) {
      out.observations.at(r, c) = data.observations.at(static_cast<int>(i), c);
      out.next_observations.at(r, c) = data.next_observations.at(static_cast<int>(i), c);
    }
    for (int c = 0; c < data.meta.act_dim; c++) {
      out.actions.at(r, c) = data.actions.at(static_cast<int>(i), c);
    }
    out.rewards.data[r] = data.rewards.data[static_cast<size_t>(i)];
    out.dones.data[r] = static_cast<float>(data.dones[static_cast<size_t>(i)]);
  }
  return out;
}

Batch sample_batch(const OfflineDataset& data, int batch_size, RngStream& rng) {
  if (batch_size < 1 || batch_size > data.meta.rows) {
    throw std::invalid_argument("sample_batch: batch size " +
                                std::to_string(batch_size) +
                                " out of range for dataset of " +
                                std::to_string(data.meta.rows));
  }
  std::vector<std::int64_t> idx(static_cast<size_t>(batch_size));
  for (auto& i : idx) {
    i = static_cast<std::int64_t>(rng.next_index(static_cast<std::uint64_t>(data.meta.rows)));
  }
  return gather_batch(data, idx);
}

}  // namespace lbsac
