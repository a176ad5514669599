#include "train.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace lbsac {

void TrainConfig::validate_against(const OfflineDataset& data) const {
  std::vector<std::string> problems;
  if (algorithm != "sac-n" && algorithm != "edac" && algorithm != "lb-sac") {
    problems.push_back("unknown algorithm: " + algorithm);
  }
  if (ensemble_size < 1) problems.push_back("ensemble_size must be >= 1");
  if (eta > 0.0 && ensemble_size < 2) {
    problems.push_back("eta > 0 requires at least 2 critics");
  }
  if (eta < 0.0) problems.push_back("eta must be >= 0");
  if (batch_size < 1) problems.push_back("batch_size must be >= 1");
  if (batch_size > data.rows()) {
    problems.push_back("batch_size " + std::to_string(batch_size) +
                       " exceeds dataset size " + std::to_string(data.rows()));
  }
  if (!(gamma > 0.0 && gamma <= 1.0)) problems.push_back("gamma must be in (0, 1]");
  if (!(tau >= 0.0 && tau <= 1.0)) problems.push_back("tau must be in [0, 1]");
  if (!(learning_rate > 0.0)) problems.push_back("learning_rate must be > 0");
  if (max_steps < 1) problems.push_back("max_steps must be >= 1");
  if (eval_every < 1) problems.push_back("eval_every must be >= 1");
  if (eval_episodes < 1) problems.push_back("eval_episodes must be >= 1");
  if (optimizer != "adamw" && optimizer != "lars" && optimizer != "lamb") {
    problems.push_back("unknown optimizer: " + optimizer);
  }
  if (temperature_lr != "scaled" && temperature_lr != "base") {
    problems.push_back("temperature_lr must be \"scaled\" or \"base\"");
  }
  if (diversity_mode != "gradient" && diversity_mode != "output-variance") {
    problems.push_back("diversity_mode must be \"gradient\" or \"output-variance\"");
  }
  const ToyEnv env = make_env(env_id);  // throws on unknown env
  if (env.obs_dim != data.meta.obs_dim || env.act_dim != data.meta.act_dim) {
    problems.push_back("dataset dims (" + std::to_string(data.meta.obs_dim) + "," +
                       std::to_string(data.meta.act_dim) + ") do not match env " +
                       env_id);
  }
  if (!problems.empty()) {
    std::string what = "invalid config:";
    for (const auto& p : problems) what += "\n  - " + p;
    throw std::invalid_argument(what);
  }
}

Tensor critic_target(const Batch& batch, const PolicyNet& policy,
                     const CriticEnsemble& ensemble, double alpha, double gamma,
                     RngStream& rng) {
  const PolicySample next =
      policy_sample(policy, batch.next_observations, SampleMode::kStochastic, rng);
  const Tensor q = ensemble_forward(ensemble, batch.next_observations, next.actions,
                                    /*use_target=*/true);
  const Tensor minq = min_over_ensemble(q);
  const int b = batch.rewards.rows;
  Tensor y(b, 1);
  for (int i = 0; i < b; i++) {
    const double bootstrap =
        static_cast<double>(minq.data[i]) - alpha * next.log_probs.data[i];
    y.data[i] = static_cast<float>(batch.rewards.data[i] +
                                   gamma * (1.0 - batch.dones.data[i]) * bootstrap);
  }
  return y;
}

std::unique_ptr<CriticLossGraph> build_critic_loss(const CriticEnsemble& ensemble,
                                                   const Tensor& states,
                                                   const Tensor& actions,
                                                   const Tensor& y, double eta,
                                                   const std::string& diversity_mode) {
  const int n = ensemble.size();
  if (eta > 0.0 && n < 2) {
    throw std::invalid_argument("critic loss: eta > 0 requires at least 2 critics");
  }
  auto out = std::make_unique<CriticLossGraph>();
  Graph& g = out->g;
  const int batch = states.rows;

  Value input;
  Value action_leaf{};
  if (eta > 0.0 && diversity_mode == "gradient") {
    Value state_leaf = g.leaf(states);
    action_leaf = g.leaf(actions);
    input = g.concat(state_leaf, action_leaf, 1);
  } else {
    Tensor joined(batch, states.cols + actions.cols);
    for (int r = 0; r < batch; r++) {
      for (int c = 0; c < states.cols; c++) joined.at(r, c) = states.at(r, c);
      for (int c = 0; c < actions.cols; c++) {
        joined.at(r, states.cols + c) = actions.at(r, c);
      }
    }
    input = g.leaf(joined);
  }
  Value y_leaf = g.leaf(y);

  std::vector<Value> qs;
  for (int j = 0; j < n; j++) {
    out->critics.push_back(bind_mlp(g, ensemble.online[static_cast<size_t>(j)]));
    qs.push_back(mlp_forward(g, ensemble.online[static_cast<size_t>(j)],
                             out->critics.back(), input));
    for (Value v : out->critics.back().all) out->params.push_back(v);
  }

  Value mse{};
  for (int j = 0; j < n; j++) {
    Value m = g.mean(g.square(g.sub(qs[static_cast<size_t>(j)], y_leaf)));
    mse = j == 0 ? m : g.add(mse, m);
  }
  out->mse = g.scale(mse, 1.0 / n);

  if (eta > 0.0) {
    out->has_diversity = true;
    if (diversity_mode == "gradient") {
      // mean over batch and over critic pairs of cos(grad_a Q_i, grad_a Q_j);
      // row b of d(sum_b Q_j)/da is grad_a Q_j(s_b, a_b)
      std::vector<Value> grads, sqnorm;
      for (int j = 0; j < n; j++) {
        const Value wrt[] = {action_leaf};
        Value gj = g.gradient_nodes(g.sum(qs[static_cast<size_t>(j)]), wrt)[0];
        grads.push_back(gj);
        sqnorm.push_back(g.sum(g.square(gj), 1));
      }
      Value pair_acc{};
      bool first = true;
      for (int i = 0; i < n; i++) {
        for (int j = i + 1; j < n; j++) {
          Value dot = g.sum(g.mul(grads[static_cast<size_t>(i)],
                                  grads[static_cast<size_t>(j)]), 1);
          Value denom = g.add_scalar(
              g.mul(g.sqrt(sqnorm[static_cast<size_t>(i)]),
                    g.sqrt(sqnorm[static_cast<size_t>(j)])),
              1e-12);
          Value cos = g.div(dot, denom);
          pair_acc = first ? cos : g.add(pair_acc, cos);
          first = false;
        }
      }
      // ordered pairs: each unordered pair counts twice, normalized by N(N-1)
      out->diversity = g.scale(g.mean(pair_acc), 2.0 / (static_cast<double>(n) * (n - 1)));
    } else {
      // fallback: negative ensemble variance of Q (not the gradient-based
      // diversity term; kept only for cost-constrained configurations)
      Value qcat{};
      for (int j = 0; j < n; j++) {
        qcat = j == 0 ? qs[0] : g.concat(qcat, qs[static_cast<size_t>(j)], 1);
      }
      Value qmean = g.mean(qcat, 1);
      Value centered = g.sub(qcat, g.broadcast_to(qmean, batch, n));
      Value var = g.mean(g.square(centered), 1);
      out->diversity = g.scale(g.mean(var), -1.0);
    }
    out->loss = g.add(out->mse, g.scale(out->diversity, eta));
  } else {
    out->diversity = g.constant_scalar(0.0f);
    out->loss = out->mse;
  }
  return out;
}

std::unique_ptr<ActorLossGraph> build_actor_loss(const PolicyNet& policy,
                                                 const CriticEnsemble& ensemble,
                                                 const Tensor& states,
                                                 const Tensor& noise, double alpha) {
  auto out = std::make_unique<ActorLossGraph>();
  Graph& g = out->g;
  Value state_leaf = g.leaf(states);
  Value noise_leaf = g.leaf(noise);
  out->policy_nodes = bind_policy(g, policy);
  Value actions{}, log_probs{};
  policy_forward(g, policy, out->policy_nodes, state_leaf, noise_leaf, &actions,
                 &log_probs);

  Value input = g.concat(state_leaf, actions, 1);
  Value qcat{};
  for (int j = 0; j < ensemble.size(); j++) {
    MlpNodes nodes = bind_mlp(g, ensemble.online[static_cast<size_t>(j)]);
    Value qj = mlp_forward(g, ensemble.online[static_cast<size_t>(j)], nodes, input);
    qcat = j == 0 ? qj : g.concat(qcat, qj, 1);
  }
  Value minq = ensemble.size() == 1 ? qcat : g.min_axis(qcat, 1);
  out->log_probs = log_probs;
  out->mean_log_prob = g.mean(log_probs);
  out->loss = g.mean(g.sub(g.scale(log_probs, alpha), minq));
  return out;
}

float temperature_update(float log_alpha, double mean_log_prob, double target_entropy,
                         Optimizer& opt, Tensor& log_alpha_tensor) {
  // d/d(log alpha) of -exp(log alpha) * (mean_log_prob + target_entropy)
  const double grad =
      -std::exp(static_cast<double>(log_alpha)) * (mean_log_prob + target_entropy);
  log_alpha_tensor.data[0] = log_alpha;
  Tensor g(1, 1);
  g.data[0] = static_cast<float>(grad);
  std::vector<Tensor*> params{&log_alpha_tensor};
  std::vector<const Tensor*> grads{&g};
  opt.step(params, grads);
  return log_alpha_tensor.data[0];
}

// ---------------------------------------------------------------------------
// Trainer

namespace {
constexpr std::uint64_t kStreamSample = 10;
constexpr std::uint64_t kStreamTargetNoise = 11;
constexpr std::uint64_t kStreamActorNoise = 12;
constexpr std::uint64_t kStreamEval = 13;
constexpr std::uint64_t kStreamDiag = 14;
constexpr std::uint64_t kStreamPolicyInit = 20;
constexpr std::uint64_t kStreamCriticInit = 21;
}  // namespace

Trainer::Trainer(const TrainConfig& cfg, const OfflineDataset* data, std::uint64_t seed)
    : cfg_(cfg), data_(data), seed_(seed) {
  cfg_.validate_against(*data);
  const ToyEnv env = make_env(cfg.env_id);
  obs_dim_ = env.obs_dim;
  act_dim_ = env.act_dim;

  RngStream policy_init(seed, kStreamPolicyInit);
  RngStream critic_init(seed, kStreamCriticInit);
  policy_ = make_policy(obs_dim_, act_dim_, policy_init);
  ensemble_ = make_ensemble(cfg.ensemble_size, obs_dim_, act_dim_, cfg.layernorm,
                            critic_init);

  OptimizerConfig oc;
  oc.kind = optimizer_kind_from_string(cfg.optimizer);
  oc.lr = cfg.learning_rate;
  oc.weight_decay = cfg.weight_decay;
  opt_actor_ = Optimizer(oc, policy_params_const());
  opt_critic_ = Optimizer(oc, critic_params_const());

  OptimizerConfig ac = oc;
  ac.kind = OptimizerKind::kAdamW;  // temperature is a single scalar
  ac.weight_decay = 0.0;
  ac.lr = cfg.temperature_lr == "base" ? cfg.base_learning_rate : cfg.learning_rate;
  log_alpha_tensor_ = Tensor::scalar(0.0f);
  opt_alpha_ = Optimizer(ac, {&log_alpha_tensor_});

  sample_rng_ = RngStream(seed, kStreamSample);
  target_noise_rng_ = RngStream(seed, kStreamTargetNoise);
  actor_noise_rng_ = RngStream(seed, kStreamActorNoise);
  eval_rng_ = RngStream(seed, kStreamEval);
  diag_rng_ = RngStream(seed, kStreamDiag);
}

std::vector<Tensor*> Trainer::critic_params() {
  std::vector<Tensor*> out;
  for (auto& net : ensemble_.online) {
    for (Tensor* t : net.param_tensors()) out.push_back(t);
  }
  return out;
}

std::vector<const Tensor*> Trainer::critic_params_const() const {
  std::vector<const Tensor*> out;
  for (const auto& net : ensemble_.online) {
    for (const Tensor* t : net.param_tensors()) out.push_back(t);
  }
  return out;
}

std::vector<Tensor*> Trainer::policy_params() {
  std::vector<Tensor*> out;
  for (Tensor* t : policy_.trunk.param_tensors()) out.push_back(t);
  out.insert(out.end(), {&policy_.mu_head.w, &policy_.mu_head.b,
                         &policy_.log_std_head.w, &policy_.log_std_head.b});
  return out;
}

std::vector<const Tensor*> Trainer::policy_params_const() const {
  std::vector<const Tensor*> out;
  for (const Tensor* t : policy_.trunk.param_tensors()) out.push_back(t);
  out.insert(out.end(), {&policy_.mu_head.w, &policy_.mu_head.b,
                         &policy_.log_std_head.w, &policy_.log_std_head.b});
  return out;
}

StepReport Trainer::train_step() {
  StepReport report;
  const Batch batch = sample_batch(*data_, cfg_.batch_size, sample_rng_);
  const double alpha_now = alpha();

  // critic update
  {
    const Tensor y = critic_target(batch, policy_, ensemble_, alpha_now, cfg_.gamma,
                                   target_noise_rng_);
    auto cl = build_critic_loss(ensemble_, batch.observations, batch.actions, y,
                                cfg_.eta, cfg_.diversity_mode);
    report.critic_loss = cl->g.eval(cl->loss).data[0];
    report.diversity = cl->has_diversity ? cl->g.eval(cl->diversity).data[0] : 0.0;
    if (!std::isfinite(report.critic_loss)) {
      throw TrainingDiverged("critic loss is not finite at step " +
                             std::to_string(step_count_));
    }
    const std::vector<Tensor> grads = cl->g.backward(cl->loss, cl->params);
    std::vector<const Tensor*> gptr;
    gptr.reserve(grads.size());
    for (const Tensor& t : grads) gptr.push_back(&t);
    auto params = critic_params();
    opt_critic_.step(params, gptr);
  }

  // actor update
  double mean_logp = 0.0;
  {
    Tensor noise(batch.observations.rows, act_dim_);
    for (auto& v : noise.data) {
      v = static_cast<float>(actor_noise_rng_.next_normal());
    }
    auto al = build_actor_loss(policy_, ensemble_, batch.observations, noise, alpha_now);
    report.actor_loss = al->g.eval(al->loss).data[0];
    mean_logp = al->g.eval(al->mean_log_prob).data[0];
    if (!std::isfinite(report.actor_loss)) {
      throw TrainingDiverged("actor loss is not finite at step " +
                             std::to_string(step_count_));
    }
    const std::vector<Tensor> grads = al->g.backward(al->loss, al->policy_nodes.all);
    std::vector<const Tensor*> gptr;
    gptr.reserve(grads.size());
    for (const Tensor& t : grads) gptr.push_back(&t);
    auto params = policy_params();
    opt_actor_.step(params, gptr);
  }

  // temperature update
  {
    const double h_bar = cfg_.resolved_target_entropy(act_dim_);
    report.alpha_loss = -alpha_now * (mean_logp + h_bar);
    log_alpha_ = temperature_update(log_alpha_, mean_logp, h_bar, opt_alpha_,
                                    log_alpha_tensor_);
  }

  // target update
  polyak_update(ensemble_, cfg_.tau);

  report.alpha = alpha();
  step_count_++;
  return report;
}

// ---------------------------------------------------------------------------
// checkpoints

void Trainer::save_checkpoint(const std::string& dir, std::uint64_t config_hash) const {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  save_policy(dir + "/policy.lbn", policy_);
  for (int j = 0; j < ensemble_.size(); j++) {
    char name[64];
    std::snprintf(name, sizeof name, "/critic_%03d.lbn", j);
    save_mlp(dir + name, ensemble_.online[static_cast<size_t>(j)]);
    std::snprintf(name, sizeof name, "/target_%03d.lbn", j);
    save_mlp(dir + name, ensemble_.target[static_cast<size_t>(j)]);
  }
  opt_actor_.save(dir + "/opt_actor.lbo");
  opt_critic_.save(dir + "/opt_critic.lbo");
  opt_alpha_.save(dir + "/opt_alpha.lbo");
  const nlohmann::json state = {
      {"format", "lbsac-checkpoint-v1"},
      {"config_hash", config_hash},
      {"env", cfg_.env_id},
      {"obs_dim", obs_dim_},
      {"act_dim", act_dim_},
      {"ensemble_size", cfg_.ensemble_size},
      {"layernorm", cfg_.layernorm},
      {"step", step_count_},
      {"log_alpha", log_alpha_},
      {"seed", seed_},
      {"rng_counters",
       {{"sample", sample_rng_.counter()},
        {"target_noise", target_noise_rng_.counter()},
        {"actor_noise", actor_noise_rng_.counter()},
        {"eval", eval_rng_.counter()},
        {"diag", diag_rng_.counter()}}}};
  std::ofstream out(dir + "/trainer_state.json");
  if (!out) throw std::runtime_error("cannot write trainer state: " + dir);
  out << state.dump(2) << "\n";
}

void Trainer::load_checkpoint(const std::string& dir, std::uint64_t config_hash) {
  std::ifstream in(dir + "/trainer_state.json");
  if (!in) throw std::runtime_error("cannot open trainer state in " + dir);
  nlohmann::json state;
  in >> state;
  if (state.at("format").get<std::string>() != "lbsac-checkpoint-v1") {
    throw std::runtime_error(dir + ": unknown checkpoint format");
  }
  if (config_hash != 0 && state.at("config_hash").get<std::uint64_t>() != config_hash) {
    throw std::runtime_error(dir + ": checkpoint belongs to a different config");
  }
  if (state.at("ensemble_size").get<int>() != cfg_.ensemble_size ||
      state.at("obs_dim").get<int>() != obs_dim_ ||
      state.at("act_dim").get<int>() != act_dim_) {
    throw std::runtime_error(dir + ": checkpoint dimensions do not match config");
  }
  load_policy(dir + "/policy.lbn", policy_);
  for (int j = 0; j < ensemble_.size(); j++) {
    char name[64];
    std::snprintf(name, sizeof name, "/critic_%03d.lbn", j);
    load_mlp(dir + name, ensemble_.online[static_cast<size_t>(j)]);
    std::snprintf(name, sizeof name, "/target_%03d.lbn", j);
    load_mlp(dir + name, ensemble_.target[static_cast<size_t>(j)]);
  }
  opt_actor_.load(dir + "/opt_actor.lbo");
  opt_critic_.load(dir + "/opt_critic.lbo");
  opt_alpha_.load(dir + "/opt_alpha.lbo");
  step_count_ = state.at("step").get<std::int64_t>();
  log_alpha_ = state.at("log_alpha").get<float>();
  log_alpha_tensor_.data[0] = log_alpha_;
  const auto& c = state.at("rng_counters");
  sample_rng_.set_counter(c.at("sample").get<std::uint64_t>());
  target_noise_rng_.set_counter(c.at("target_noise").get<std::uint64_t>());
  actor_noise_rng_.set_counter(c.at("actor_noise").get<std::uint64_t>());
  eval_rng_.set_counter(c.at("eval").get<std::uint64_t>());
  diag_rng_.set_counter(c.at("diag").get<std::uint64_t>());
}

}  // namespace lbsac
