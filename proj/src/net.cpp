#include "net.hpp"

#include <cmath>
#include <numbers>

#include "bin_io.hpp"

namespace lbsac {

namespace {
constexpr double kHalfLog2Pi = 0.9189385332046727417803297364;  // 0.5*log(2*pi)
}

LinearLayer make_linear(int in, int out, RngStream& rng) {
  LinearLayer l{Tensor(in, out), Tensor(1, out)};
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  for (auto& v : l.w.data) v = static_cast<float>(rng.next_uniform(-bound, bound));
  for (auto& v : l.b.data) v = static_cast<float>(rng.next_uniform(-bound, bound));
  return l;
}

Mlp make_mlp(int in_dim, int out_dim, bool layernorm, RngStream& rng) {
  Mlp net;
  net.in_dim = in_dim;
  net.out_dim = out_dim;
  net.layernorm = layernorm;
  int prev = in_dim;
  for (int i = 0; i < kHiddenLayers; i++) {
    net.layers.push_back(make_linear(prev, kHiddenDim, rng));
    prev = kHiddenDim;
  }
  if (out_dim > 0) net.layers.push_back(make_linear(prev, out_dim, rng));
  if (layernorm) {
    for (int i = 0; i < kHiddenLayers; i++) {
      net.norms.push_back({Tensor::full(1, kHiddenDim, 1.0f), Tensor::zeros(1, kHiddenDim)});
    }
  }
  return net;
}

std::vector<Tensor*> Mlp::param_tensors() {
  std::vector<Tensor*> out;
  for (auto& l : layers) {
    out.push_back(&l.w);
    out.push_back(&l.b);
  }
  for (auto& n : norms) {
    out.push_back(&n.gain);
    out.push_back(&n.bias);
  }
  return out;
}

std::vector<const Tensor*> Mlp::param_tensors() const {
  std::vector<const Tensor*> out;
  for (const auto& l : layers) {
    out.push_back(&l.w);
    out.push_back(&l.b);
  }
  for (const auto& n : norms) {
    out.push_back(&n.gain);
    out.push_back(&n.bias);
  }
  return out;
}

MlpNodes bind_mlp(Graph& g, const Mlp& net) {
  MlpNodes nodes;
  for (const auto& l : net.layers) {
    nodes.w.push_back(g.leaf(l.w));
    nodes.b.push_back(g.leaf(l.b));
  }
  for (const auto& n : net.norms) {
    nodes.ln_gain.push_back(g.leaf(n.gain));
    nodes.ln_bias.push_back(g.leaf(n.bias));
  }
  for (size_t i = 0; i < nodes.w.size(); i++) {
    nodes.all.push_back(nodes.w[i]);
    nodes.all.push_back(nodes.b[i]);
  }
  for (size_t i = 0; i < nodes.ln_gain.size(); i++) {
    nodes.all.push_back(nodes.ln_gain[i]);
    nodes.all.push_back(nodes.ln_bias[i]);
  }
  return nodes;
}

Value mlp_forward(Graph& g, const Mlp& net, const MlpNodes& nodes, Value input) {
  const int batch = g.rows_of(input);
  Value h = input;
  const int n_hidden = kHiddenLayers;
  for (int i = 0; i < n_hidden; i++) {
    Value z = g.add(g.matmul(h, nodes.w[i]),
                    g.broadcast_to(nodes.b[i], batch, kHiddenDim));
    if (net.layernorm) {
      Value normed = g.layernorm(z, kLayerNormEps);
      z = g.add(g.mul(normed, g.broadcast_to(nodes.ln_gain[i], batch, kHiddenDim)),
                g.broadcast_to(nodes.ln_bias[i], batch, kHiddenDim));
    }
    h = g.relu(z);
  }
  if (net.out_dim > 0) {
    const int i = n_hidden;
    h = g.add(g.matmul(h, nodes.w[i]),
              g.broadcast_to(nodes.b[i], batch, net.out_dim));
  }
  return h;
}

Tensor mlp_eval(const Mlp& net, const Tensor& input) {
  Graph g;
  Value in = g.leaf(input);
  MlpNodes nodes = bind_mlp(g, net);
  return g.eval(mlp_forward(g, net, nodes, in));
}

PolicyNet make_policy(int obs_dim, int act_dim, RngStream& rng) {
  PolicyNet p;
  p.obs_dim = obs_dim;
  p.act_dim = act_dim;
  p.trunk = make_mlp(obs_dim, 0, false, rng);
  p.mu_head = make_linear(kHiddenDim, act_dim, rng);
  p.log_std_head = make_linear(kHiddenDim, act_dim, rng);
  return p;
}

PolicyNodes bind_policy(Graph& g, const PolicyNet& policy) {
  PolicyNodes n;
  n.trunk = bind_mlp(g, policy.trunk);
  n.mu_w = g.leaf(policy.mu_head.w);
  n.mu_b = g.leaf(policy.mu_head.b);
  n.ls_w = g.leaf(policy.log_std_head.w);
  n.ls_b = g.leaf(policy.log_std_head.b);
  n.all = n.trunk.all;
  n.all.insert(n.all.end(), {n.mu_w, n.mu_b, n.ls_w, n.ls_b});
  return n;
}

void policy_forward(Graph& g, const PolicyNet& policy, const PolicyNodes& nodes,
                    Value states, Value noise, Value* actions, Value* log_probs) {
  const int batch = g.rows_of(states);
  const int act = policy.act_dim;
  Value h = mlp_forward(g, policy.trunk, nodes.trunk, states);
  Value mu = g.add(g.matmul(h, nodes.mu_w), g.broadcast_to(nodes.mu_b, batch, act));
  Value log_std = g.clamp(
      g.add(g.matmul(h, nodes.ls_w), g.broadcast_to(nodes.ls_b, batch, act)),
      kLogStdMin, kLogStdMax);
  Value sigma = g.exp(log_std);
  Value u = g.add(mu, g.mul(sigma, noise));
  Value a = g.tanh(u);
  // log N(u; mu, sigma) with the tanh change-of-variables correction
  Value d = g.div(g.sub(u, mu), sigma);
  Value normal_lp =
      g.add_scalar(g.sub(g.scale(g.square(d), -0.5), log_std), -kHalfLog2Pi);
  Value corr = g.log(g.add_scalar(g.scale(g.square(a), -1.0), 1.0 + kActionSquashEps));
  *actions = a;
  *log_probs = g.sub(g.sum(normal_lp, 1), g.sum(corr, 1));
}

void policy_heads(const PolicyNet& policy, const Tensor& states, Tensor* mu,
                  Tensor* log_std) {
  Graph g;
  Value in = g.leaf(states);
  const int batch = states.rows;
  const int act = policy.act_dim;
  MlpNodes trunk = bind_mlp(g, policy.trunk);
  Value h = mlp_forward(g, policy.trunk, trunk, in);
  Value muv = g.add(g.matmul(h, g.leaf(policy.mu_head.w)),
                    g.broadcast_to(g.leaf(policy.mu_head.b), batch, act));
  Value lsv = g.clamp(g.add(g.matmul(h, g.leaf(policy.log_std_head.w)),
                            g.broadcast_to(g.leaf(policy.log_std_head.b), batch, act)),
                      kLogStdMin, kLogStdMax);
  *mu = g.eval(muv);
  *log_std = g.eval(lsv);
}

namespace {

// Cold path: locate the first trunk layer producing a non-finite output.
int find_bad_layer(const PolicyNet& policy, const Tensor& states) {
  Tensor h = states;
  for (int i = 0; i < kHiddenLayers; i++) {
    const LinearLayer& l = policy.trunk.layers[static_cast<size_t>(i)];
    Graph g;
    Value in = g.leaf(h);
    Value z = g.add(g.matmul(in, g.leaf(l.w)),
                    g.broadcast_to(g.leaf(l.b), h.rows, kHiddenDim));
    h = g.eval(g.relu(z));
    for (float v : h.data) {
      if (!std::isfinite(v)) return i;
    }
  }
  return kHiddenLayers;  // one of the heads
}

}  // namespace

PolicySample policy_sample(const PolicyNet& policy, const Tensor& states,
                           SampleMode mode, RngStream& rng) {
  Tensor mu, log_std;
  policy_heads(policy, states, &mu, &log_std);
  for (size_t i = 0; i < mu.data.size(); i++) {
    if (!std::isfinite(mu.data[i]) || !std::isfinite(log_std.data[i])) {
      throw std::runtime_error("policy_sample: non-finite network output (layer " +
                               std::to_string(find_bad_layer(policy, states)) + ")");
    }
  }
  const int batch = states.rows;
  const int act = policy.act_dim;
  const float amax = static_cast<float>(1.0 - kActionSquashEps);
  PolicySample out;
  out.actions = Tensor(batch, act);
  if (mode == SampleMode::kDeterministic) {
    for (size_t i = 0; i < mu.data.size(); i++) {
      const float a = std::tanh(mu.data[i]);
      out.actions.data[i] = std::min(std::max(a, -amax), amax);
    }
    return out;
  }
  out.log_probs = Tensor(batch, 1);
  for (int r = 0; r < batch; r++) {
    double lp = 0.0;
    for (int c = 0; c < act; c++) {
      const size_t i = static_cast<size_t>(r) * act + c;
      const double eps = rng.next_normal();
      const double m = mu.data[i];
      const double ls = log_std.data[i];
      const double sigma = std::exp(ls);
      const double u = m + sigma * eps;
      float a = static_cast<float>(std::tanh(u));
      a = std::min(std::max(a, -amax), amax);
      out.actions.data[i] = a;
      lp += -0.5 * eps * eps - ls - kHalfLog2Pi;
      lp -= std::log(1.0 - static_cast<double>(a) * a + kActionSquashEps);
    }
    out.log_probs.data[r] = static_cast<float>(lp);
  }
  return out;
}

CriticEnsemble make_ensemble(int n, int obs_dim, int act_dim, bool layernorm,
                             RngStream& rng) {
  if (n < 1) throw std::invalid_argument("make_ensemble: N must be >= 1");
  CriticEnsemble e;
  e.layernorm = layernorm;
  e.obs_dim = obs_dim;
  e.act_dim = act_dim;
  for (int i = 0; i < n; i++) {
    e.online.push_back(make_mlp(obs_dim + act_dim, 1, layernorm, rng));
  }
  e.target = e.online;
  return e;
}

Tensor ensemble_forward(const CriticEnsemble& ensemble, const Tensor& states,
                        const Tensor& actions, bool use_target) {
  if (states.rows != actions.rows) {
    throw std::invalid_argument("ensemble_forward: state/action batch mismatch");
  }
  if (actions.cols != ensemble.act_dim || states.cols != ensemble.obs_dim) {
    throw std::invalid_argument("ensemble_forward: dimension mismatch");
  }
  const int batch = states.rows;
  Tensor input(batch, states.cols + actions.cols);
  for (int r = 0; r < batch; r++) {
    for (int c = 0; c < states.cols; c++) input.at(r, c) = states.at(r, c);
    for (int c = 0; c < actions.cols; c++) input.at(r, states.cols + c) = actions.at(r, c);
  }
  const auto& nets = use_target ? ensemble.target : ensemble.online;
  Tensor out(ensemble.size(), batch);
  Graph g;
  Value in = g.leaf(input);
  for (int j = 0; j < ensemble.size(); j++) {
    MlpNodes nodes = bind_mlp(g, nets[j]);
    const Tensor& q = g.eval(mlp_forward(g, nets[j], nodes, in));
    for (int r = 0; r < batch; r++) out.at(j, r) = q.data[r];
  }
  return out;
}

void polyak_update(CriticEnsemble& ensemble, double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) {
    throw std::invalid_argument("polyak_update: tau must be in [0, 1]");
  }
  for (int j = 0; j < ensemble.size(); j++) {
    auto src = ensemble.online[j].param_tensors();
    auto dst = ensemble.target[j].param_tensors();
    for (size_t t = 0; t < src.size(); t++) {
      for (size_t i = 0; i < src[t]->data.size(); i++) {
        dst[t]->data[i] = static_cast<float>((1.0 - tau) * dst[t]->data[i] +
                                             tau * src[t]->data[i]);
      }
    }
  }
}

Tensor min_over_ensemble(const Tensor& q_values) {
  Tensor out(1, q_values.cols);
  for (int c = 0; c < q_values.cols; c++) {
    float best = q_values.at(0, c);
    for (int r = 1; r < q_values.rows; r++) best = std::min(best, q_values.at(r, c));
    out.data[c] = best;
  }
  return out;
}

// ---------------------------------------------------------------------------
// LBN1 checkpoints

namespace {
constexpr char kNetMagic[4] = {'L', 'B', 'N', '1'};
constexpr std::uint32_t kNetVersion = 1;
}  // namespace

void save_network(const std::string& path, const std::vector<const Tensor*>& tensors,
                  std::uint32_t flags) {
  BinWriter w(path);
  w.magic(kNetMagic);
  w.u32(kNetVersion);
  w.u32(flags);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const Tensor* t : tensors) {
    w.u32(static_cast<std::uint32_t>(t->rows));
    w.u32(static_cast<std::uint32_t>(t->cols));
  }
  for (const Tensor* t : tensors) w.f32_blob(t->data);
  w.close();
}

void load_network(const std::string& path, const std::vector<Tensor*>& tensors,
                  std::uint32_t* flags) {
  BinReader r(path);
  r.expect_magic(kNetMagic);
  const std::uint32_t version = r.u32("version");
  if (version != kNetVersion) {
    throw IoError(path + ": unsupported LBN version " + std::to_string(version));
  }
  const std::uint32_t f = r.u32("flags");
  if (flags) *flags = f;
  const std::uint32_t count = r.u32("tensor count");
  if (count != tensors.size()) {
    throw IoError(path + ": expected " + std::to_string(tensors.size()) +
                  " tensors, file has " + std::to_string(count));
  }
  for (Tensor* t : tensors) {
    const int rows = static_cast<int>(r.u32("rows"));
    const int cols = static_cast<int>(r.u32("cols"));
    if (rows != t->rows || cols != t->cols) {
      throw IoError(path + ": tensor shape " + std::to_string(rows) + "x" +
                    std::to_string(cols) + " does not match expected " + t->shape_str());
    }
  }
  for (Tensor* t : tensors) t->data = r.f32_blob(t->data.size(), "weights");
  if (!r.at_eof()) throw IoError(path + ": trailing bytes after weight blobs");
}

void save_mlp(const std::string& path, const Mlp& net) {
  save_network(path, net.param_tensors(), net.layernorm ? 1u : 0u);
}

void load_mlp(const std::string& path, Mlp& net) {
  std::uint32_t flags = 0;
  load_network(path, net.param_tensors(), &flags);
  if ((flags & 1u) != (net.layernorm ? 1u : 0u)) {
    throw IoError(path + ": layernorm flag mismatch");
  }
}

void save_policy(const std::string& path, const PolicyNet& policy) {
  std::vector<const Tensor*> ts;
  for (const auto* t : policy.trunk.param_tensors()) ts.push_back(t);
  ts.insert(ts.end(), {&policy.mu_head.w, &policy.mu_head.b, &policy.log_std_head.w,
                       &policy.log_std_head.b});
  save_network(path, ts, 0);
}

void load_policy(const std::string& path, PolicyNet& policy) {
  std::vector<Tensor*> ts;
  for (auto* t : policy.trunk.param_tensors()) ts.push_back(t);
  ts.insert(ts.end(), {&policy.mu_head.w, &policy.mu_head.b, &policy.log_std_head.w,
                       &policy.log_std_head.b});
  load_network(path, ts, nullptr);
}

}  // namespace lbsac
