#pragma once

#include <string>
#include <vector>

#include "graph.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace lbsac {

// Network architecture shared by every model in this project: 3 hidden
// layers of width 256 with ReLU. Critics optionally apply layer
// normalization after each hidden affine transform, before the ReLU.
constexpr int kHiddenDim = 256;
constexpr int kHiddenLayers = 3;
constexpr float kLogStdMin = -5.0f;
constexpr float kLogStdMax = 2.0f;
constexpr double kActionSquashEps = 1e-6;
constexpr double kLayerNormEps = 1e-5;

struct LinearLayer {
  Tensor w;  // in x out
  Tensor b;  // 1 x out
};

struct LayerNormParams {
  Tensor gain;  // 1 x width
  Tensor bias;  // 1 x width
};

// Uniform init in +-1/sqrt(fan_in) for weights and biases.
LinearLayer make_linear(int in, int out, RngStream& rng);

// Plain MLP chain: hidden relu layers and a final affine head.
struct Mlp {
  std::vector<LinearLayer> layers;       // hidden layers then output head
  std::vector<LayerNormParams> norms;    // per hidden layer when layernorm on
  bool layernorm = false;
  int in_dim = 0;
  int out_dim = 0;

  std::vector<Tensor*> param_tensors();              // stable order: w,b per layer, then ln gain,bias
  std::vector<const Tensor*> param_tensors() const;
};

Mlp make_mlp(int in_dim, int out_dim, bool layernorm, RngStream& rng);

// Leaf handles for one Mlp bound into a graph.
struct MlpNodes {
  std::vector<Value> w, b, ln_gain, ln_bias;
  std::vector<Value> all;  // same order as Mlp::param_tensors()
};

MlpNodes bind_mlp(Graph& g, const Mlp& net);
Value mlp_forward(Graph& g, const Mlp& net, const MlpNodes& nodes, Value input);

// Numeric forward pass (no graph). Bitwise-identical to the graph path:
// both run the same kernels in the same order.
Tensor mlp_eval(const Mlp& net, const Tensor& input);

// tanh-squashed Gaussian policy: shared trunk, state-dependent mean and
// log-std heads. log-std is clamped to [-5, 2]; emitted actions are clamped
// a hair inside (-1, 1) so downstream logs never see exactly +-1.
struct PolicyNet {
  Mlp trunk;  // obs -> 256, three relu hidden layers, no output head
  LinearLayer mu_head;
  LinearLayer log_std_head;
  int obs_dim = 0;
  int act_dim = 0;
};

PolicyNet make_policy(int obs_dim, int act_dim, RngStream& rng);

struct PolicySample {
  Tensor actions;    // batch x act_dim, strictly inside (-1, 1)
  Tensor log_probs;  // batch x 1 (empty in deterministic mode)
};

enum class SampleMode { kStochastic, kDeterministic };

// Numeric sampling for rollouts, dataset targets and diagnostics.
PolicySample policy_sample(const PolicyNet& policy, const Tensor& states,
                           SampleMode mode, RngStream& rng);

// Mean and clamped log-std heads (numeric).
void policy_heads(const PolicyNet& policy, const Tensor& states, Tensor* mu,
                  Tensor* log_std);

// Graph construction for the actor update: returns action node (batch x act),
// log-prob node (batch x 1). noise is the reparameterization epsilon leaf.
struct PolicyNodes {
  MlpNodes trunk;
  Value mu_w, mu_b, ls_w, ls_b;
  std::vector<Value> all;
};
PolicyNodes bind_policy(Graph& g, const PolicyNet& policy);
void policy_forward(Graph& g, const PolicyNet& policy, const PolicyNodes& nodes,
                    Value states, Value noise, Value* actions, Value* log_probs);

// N online critics plus N polyak-averaged target critics over concat(s, a).
struct CriticEnsemble {
  std::vector<Mlp> online;
  std::vector<Mlp> target;
  bool layernorm = false;
  int obs_dim = 0;
  int act_dim = 0;

  int size() const { return static_cast<int>(online.size()); }
};

// Targets start as exact copies of the online critics.
CriticEnsemble make_ensemble(int n, int obs_dim, int act_dim, bool layernorm,
                             RngStream& rng);

// Q-values, one row per critic: N x batch.
Tensor ensemble_forward(const CriticEnsemble& ensemble, const Tensor& states,
                        const Tensor& actions, bool use_target);

// target <- (1 - tau) * target + tau * online, elementwise.
void polyak_update(CriticEnsemble& ensemble, double tau);

// Columnwise minimum over the ensemble axis: N x batch -> 1 x batch.
Tensor min_over_ensemble(const Tensor& q_values);

// LBN1 checkpoint: magic, version, flags, tensor count, dims, float32 blobs.
void save_network(const std::string& path, const std::vector<const Tensor*>& tensors,
                  std::uint32_t flags);
void load_network(const std::string& path, const std::vector<Tensor*>& tensors,
                  std::uint32_t* flags);

void save_mlp(const std::string& path, const Mlp& net);
void load_mlp(const std::string& path, Mlp& net);
void save_policy(const std::string& path, const PolicyNet& policy);
void load_policy(const std::string& path, PolicyNet& policy);

}  // namespace lbsac
